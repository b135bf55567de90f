# circuitlab/cli/commands_report.py - `report`: aggregate a run directory
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from circuitlab.cli.common import CHECKPOINT_NAME, RunContext, add_checkpoint_arg, add_common_args, stdout
from circuitlab.crud.artifacts import load_circuit, read_json, write_json, write_text
from circuitlab.crud.manifest import list_manifests
from circuitlab.schemas.intervention import BridgeReport, HeadPatchReport
from circuitlab.schemas.report import AccuracySummary, ProbeGrid
from circuitlab.services.report_service import ReportService

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("report", help="summarise every artifact of a run directory")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--probe-position", default="equals", help="position used for the probe-depth check")
    parser.set_defaults(handler=run_report)


def _optional(path: Path) -> Optional[Any]:
    return read_json(path) if path.exists() else None


def run_report(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("report", args)
    manifests = [m for m in list_manifests(ctx.run_dir) if m.command != "report"]
    n_layers = None
    checkpoint = Path(args.checkpoint or ctx.path(CHECKPOINT_NAME))
    if checkpoint.exists():
        n_layers = ctx.load_params(str(checkpoint)).config.n_layers

    accuracy = _optional(ctx.path("accuracy.json")) or {}
    summaries = {k: AccuracySummary(**v) for k, v in accuracy.items()}
    forward = _optional(ctx.path("interventions", "patch-heads-forward.json"))
    reverse = _optional(ctx.path("interventions", "patch-heads-reverse.json"))
    bridge = _optional(ctx.path("interventions", "bridge.json"))
    probe = _optional(ctx.path("probe_grid.json"))
    tau_sweeps = {path.stem: read_json(path) for path in sorted(ctx.path("tau_sweep").glob("*.json"))}

    probe_grid = ProbeGrid(layers=probe["layers"], positions=probe["positions"], cells=probe["cells"]) if probe else None
    signature = ReportService.signature(
        single=summaries.get("single"),
        consistent=summaries.get("both"),
        head_patch=HeadPatchReport(**forward) if forward else None,
        probe_grid=probe_grid,
        bridge=BridgeReport(**bridge) if bridge else None,
        n_layers=n_layers,
        probe_position=args.probe_position,
    )

    dot_files: Dict[str, str] = {}
    for path in sorted(ctx.path("circuits").glob("*.json")):
        circuit = load_circuit(path)
        dot_path = ctx.output(f"dot:{path.stem}", write_text(
            ctx.path("dot", f"{path.stem}.dot"), ReportService.export_dot(circuit, n_layers)
        ))
        ctx.inputs[f"circuit:{path.stem}"] = str(path)
        dot_files[path.stem] = str(dot_path)

    payload = {
        "manifests": [
            {"command": m.command, "created_at": m.created_at, "config_hash": m.config_hash, "outputs": m.outputs}
            for m in manifests
        ],
        "accuracy": {k: v.model_dump() for k, v in summaries.items()},
        "tau_sweeps": tau_sweeps,
        "interventions": {"forward": forward, "reverse": reverse, "bridge": bridge},
        "probe_grid": probe,
        "circuits": dot_files,
        "signature": {
            "gate_passed": signature.gate_passed,
            "checks": [{**c.model_dump(), "verdict": c.verdict} for c in signature.checks],
        },
    }
    ctx.output("report", write_json(ctx.path("report.json"), payload))
    ctx.output("report_text", write_text(ctx.path("report.md"), _markdown(payload, signature.checks)))
    for check in signature.checks:
        gate = "gate" if check.gating else "diag"
        stdout(f"[{check.verdict}] ({gate}) {check.name}: {check.description}")
    ctx.finish()
    return 0


def _markdown(payload: Dict[str, Any], checks) -> str:
    lines: List[str] = ["# Run report", "", "## Pipeline", ""]
    for manifest in payload["manifests"]:
        lines.append(f"- `{manifest['command']}` ({manifest['created_at']}): {len(manifest['outputs'])} artifacts")
    lines += ["", "## Detection accuracy", "", "| error type | mean | std |", "|---|---|---|"]
    for error_type, summary in payload["accuracy"].items():
        lines.append(f"| {error_type} | {summary['mean']:.2f} | {summary['std']:.2f} |")
    for name, rows in payload["tau_sweeps"].items():
        lines += ["", f"## Soft intersection: {name}", "", "| tau | instances | faithfulness |", "|---|---|---|"]
        for row in rows:
            mark = " (best)" if row["best_balance"] else ""
            lines.append(
                f"| {row['tau']}{mark} | {row['edge_count']} | "
                f"{row['faithfulness_mean']:.2f} ± {row['faithfulness_std']:.2f} |"
            )
    lines += ["", "## Validation-gap signature", ""]
    for check in checks:
        value = "n/a" if check.value is None else f"{check.value:.2f}"
        lines.append(f"- **{check.verdict}** {check.name}: {check.description} (value {value})")
    return "\n".join(lines) + "\n"
