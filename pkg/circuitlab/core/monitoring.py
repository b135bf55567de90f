import logging
import threading
from datetime import datetime
from typing import Any, Dict, Optional

logger = logging.getLogger("monitoring")


class RunMonitoring:
    """Pass counters for the model runs of one process"""

    COUNTERS = (
        "forward_passes",
        "backward_passes",
        "patched_runs",
        "prompts_processed",
        "errors",
    )

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.metrics: Dict[str, Any] = {name: 0 for name in self.COUNTERS}
            self.metrics["average_pass_ms"] = 0.0
            self.metrics["last_error"] = None
            self._timed_passes = 0

    def record_forward(self, n_prompts: int, elapsed_ms: float = 0.0, patched: bool = False):
        """Record one (possibly batched) forward pass"""
        with self._lock:
            self.metrics["forward_passes"] += 1
            self.metrics["prompts_processed"] += n_prompts
            if patched:
                self.metrics["patched_runs"] += 1
            self._record_time(elapsed_ms)

    def record_backward(self, elapsed_ms: float = 0.0):
        with self._lock:
            self.metrics["backward_passes"] += 1
            self._record_time(elapsed_ms)

    def record_error(self, error: str, context: Optional[str] = None):
        with self._lock:
            self.metrics["errors"] += 1
            self.metrics["last_error"] = {
                "error": error,
                "context": context,
                "timestamp": datetime.now().isoformat(),
            }
        logger.error(f"Run error: {error} ({context})")

    def _record_time(self, elapsed_ms: float):
        # Running mean over every timed pass
        self._timed_passes += 1
        current = self.metrics["average_pass_ms"]
        self.metrics["average_pass_ms"] = current + (elapsed_ms - current) / self._timed_passes

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {name: self.metrics[name] for name in self.COUNTERS}

    def diff(self, before: Dict[str, int]) -> Dict[str, int]:
        """Counter deltas since `before` (a snapshot)"""
        now = self.snapshot()
        return {name: now[name] - before.get(name, 0) for name in self.COUNTERS}

    def get_status(self) -> Dict[str, Any]:
        with self._lock:
            status = dict(self.metrics)
        status["average_pass_ms"] = round(status["average_pass_ms"], 3)
        status["status"] = "CLEAN" if status["errors"] == 0 else "ERRORS"
        status["timestamp"] = datetime.now().isoformat()
        return status


# Global monitoring instance
monitoring = RunMonitoring()
