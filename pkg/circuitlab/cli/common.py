# circuitlab/cli/common.py - Shared CLI plumbing: config loading, run context, manifests
import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from circuitlab.core.config import settings
from circuitlab.core.errors import ConfigError, DatasetError
from circuitlab.core.monitoring import monitoring
from circuitlab.crud.artifacts import read_json
from circuitlab.crud.checkpoint import load_checkpoint
from circuitlab.crud.dataset import dataset_id, read_pairs
from circuitlab.crud.manifest import write_manifest
from circuitlab.models.transformer import Parameters
from circuitlab.schemas.config import PipelineConfig
from circuitlab.schemas.dataset import PromptPair
from circuitlab.schemas.report import RunManifest
from circuitlab.services.dataset_service import DatasetService
from circuitlab.services.trainer_service import TrainerService
from circuitlab.utils.utils import stable_hash

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.npz"


def add_common_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="pipeline config JSON; flags override its values")
    parser.add_argument("--run-dir", default=None, help=f"artifact directory (default {settings.ARTIFACT_DIR})")
    parser.add_argument("--seed", type=int, default=None, help="run-level seed")


def add_checkpoint_arg(parser: argparse.ArgumentParser):
    parser.add_argument("--checkpoint", default=None, help=f"model checkpoint (default <run-dir>/{CHECKPOINT_NAME})")


def csv_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [chunk.strip() for chunk in text.split(",") if chunk.strip()]


def load_config(path: Optional[str]) -> PipelineConfig:
    if not path:
        return PipelineConfig()
    try:
        return PipelineConfig(**read_json(path))
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid config ({exc})") from exc


def override(config: PipelineConfig, section: str, **values) -> PipelineConfig:
    """Config with non-None flag values applied to one section, re-validated"""
    updates = {k: v for k, v in values.items() if v is not None}
    if not updates:
        return config
    current = getattr(config, section)
    base = current.model_dump()
    if section == "model" and {"d_model", "n_heads"} & set(updates):
        base.pop("d_head", None)  # re-derived from the new dims
    try:
        updated = type(current)(**{**base, **updates})
    except ValidationError as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc
    return config.model_copy(update={section: updated})


@dataclass
class RunContext:
    command: str
    run_dir: Path
    config: PipelineConfig
    argv: List[str] = field(default_factory=list)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    dataset_ids: List[str] = field(default_factory=list)
    checkpoint_id: Optional[str] = None

    @classmethod
    def from_args(cls, command: str, args: argparse.Namespace) -> "RunContext":
        config = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            config = config.model_copy(update={"seed": args.seed})
        run_dir = Path(getattr(args, "run_dir", None) or settings.ARTIFACT_DIR)
        run_dir.mkdir(parents=True, exist_ok=True)
        return cls(command=command, run_dir=run_dir, config=config, argv=list(getattr(args, "argv", [])))

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def output(self, key: str, path: Path) -> Path:
        self.outputs[key] = str(path)
        return path

    # Inputs

    def load_params(self, path: Optional[str]) -> Parameters:
        path = path or str(self.path(CHECKPOINT_NAME))
        params, _ = load_checkpoint(path)
        self.inputs["checkpoint"] = path
        self.checkpoint_id = params.fingerprint()[:16]
        return params

    def load_pairs(self, path: str) -> List[PromptPair]:
        pairs = read_pairs(path)
        self.inputs[f"data:{Path(path).stem}"] = path
        self.dataset_ids.append(dataset_id(pairs))
        return pairs

    def data_path(self, error_type: str, operation: Optional[str] = None) -> Path:
        return self.path("data", f"{operation or self.config.dataset.operation}-{error_type}.jsonl")

    def load_error_pairs(self, error_type: str, path: Optional[str] = None) -> List[PromptPair]:
        path = path or str(self.data_path(error_type))
        if not Path(path).exists():
            raise DatasetError(f"dataset {path} does not exist (run `gen` first)")
        return self.load_pairs(path)

    # Manifest

    def finish(self) -> Path:
        manifest = RunManifest(
            command=self.command,
            argv=self.argv,
            config_hash=stable_hash(self.config.model_dump()),
            seed=self.seed,
            checkpoint_id=self.checkpoint_id,
            dataset_ids=self.dataset_ids,
            inputs=self.inputs,
            outputs=self.outputs,
            config=self.config.model_dump(),
            status=monitoring.get_status(),
        )
        path = write_manifest(self.run_dir, manifest)
        logger.info(f"{self.command}: wrote {len(self.outputs)} artifacts, manifest {path.name}")
        return path


def by_template(pairs: Sequence[PromptPair]) -> Dict[int, List[PromptPair]]:
    groups: Dict[int, List[PromptPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.template_id, []).append(pair)
    return dict(sorted(groups.items()))


def discovery_split(
    params: Parameters, pairs: Sequence[PromptPair], ctx: RunContext, filter_correct: bool = True
) -> Tuple[List[PromptPair], List[PromptPair]]:
    """Correctly classified pairs split into (attribution, held-out faithfulness) sets"""
    kept = TrainerService.filter_pairs(params, pairs) if filter_correct else list(pairs)
    if len(kept) < 2:
        raise DatasetError(f"only {len(kept)} correctly classified pairs; train the model further")
    service = DatasetService(max_dividend=ctx.config.dataset.max_dividend)
    train, held_out = [], []
    for template_id, group in by_template(kept).items():
        if len(group) < 2:
            continue
        a, b = service.split_pairs(group, ctx.config.dataset.holdout_fraction, ctx.seed)
        train.extend(a)
        held_out.extend(b)
    return train, held_out


def stdout(message: str):
    sys.stdout.write(message + "\n")
