# circuitlab/cli/commands_circuits.py - `eap`, `search`, `intersect`, `overlap`
import argparse
import logging
import re
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Tuple

from circuitlab.cli.common import (
    RunContext,
    add_checkpoint_arg,
    add_common_args,
    by_template,
    csv_list,
    discovery_split,
    override,
    stdout,
)
from circuitlab.core.errors import CircuitError
from circuitlab.crud.artifacts import load_circuit, load_table, save_circuit, save_table, write_csv, write_json
from circuitlab.schemas.dataset import PromptPair
from circuitlab.services.circuit_service import CircuitService
from circuitlab.services.patching_service import PatchingService
from circuitlab.services.report_service import BALANCE_MODES, ReportService

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("eap", help="edge attribution scores per template")
    _discovery_args(parser)
    parser.add_argument("--abs-mode", choices=["per-pair", "mean"], default=None,
                        help="absolute value per pair before averaging, or of the mean")
    parser.add_argument("--spearman", type=int, default=0, metavar="K",
                        help="also check agreement with exact patching over the top-K instances")
    parser.set_defaults(handler=run_eap)

    parser = subparsers.add_parser("search", help="faithfulness-banded minimal circuit per template")
    _discovery_args(parser)
    parser.add_argument("--k", type=int, default=None, help="initial circuit size")
    parser.add_argument("--step", type=int, default=None, help="instances added per step")
    parser.add_argument("--band", default=None, help="faithfulness band, e.g. 99,101")
    parser.add_argument("--eval-pairs", type=int, default=None)
    parser.set_defaults(handler=run_search)

    parser = subparsers.add_parser("intersect", help="soft intersection of template circuits")
    _discovery_args(parser)
    parser.add_argument("--circuits", default=None,
                        help="comma-separated circuit files (default: the search outputs of each error type, intersected separately)")
    parser.add_argument("--tau", default=None, help="membership threshold, e.g. 5/8")
    parser.add_argument("--sweep", action="store_true", help="faithfulness and size for every tau")
    parser.add_argument("--balance", choices=BALANCE_MODES, default="smallest")
    parser.set_defaults(handler=run_intersect)

    parser = subparsers.add_parser("overlap", help="IoU / IoM of two circuits")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--a", required=True, help="first circuit file")
    parser.add_argument("--b", required=True, help="second circuit file")
    parser.add_argument("--combine", choices=["union", "intersection"], default=None,
                        help="also write the combined circuit")
    parser.add_argument("--faithfulness-on", default=None,
                        help="comma-separated error types to evaluate the combined circuit on")
    parser.add_argument("--no-filter", action="store_true")
    parser.set_defaults(handler=run_overlap)


def _discovery_args(parser):
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--error-types", default=None, help="comma-separated (default: dataset config)")
    parser.add_argument("--templates", default=None, help="comma-separated template ids")
    parser.add_argument("--no-filter", action="store_true", help="keep misclassified pairs")


def _name(ctx: RunContext, error_type: str, template_id: int) -> str:
    return f"{ctx.config.dataset.operation}-{error_type}-t{template_id}"


def _discovery_sets(ctx: RunContext, params, args, error_type: str, held_out: bool) -> Dict[int, List[PromptPair]]:
    pairs = ctx.load_error_pairs(error_type)
    attribution, evaluation = discovery_split(params, pairs, ctx, filter_correct=not args.no_filter)
    wanted = {int(t) for t in csv_list(getattr(args, "templates", None)) or []}
    groups = by_template(evaluation if held_out else attribution)
    return {t: g for t, g in groups.items() if not wanted or t in wanted}


def _error_types(ctx: RunContext, args) -> List[str]:
    return csv_list(getattr(args, "error_types", None)) or ctx.config.dataset.error_types


def run_eap(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("eap", args)
    params = ctx.load_params(args.checkpoint)
    abs_per_pair = None if args.abs_mode is None else args.abs_mode == "per-pair"
    for error_type in _error_types(ctx, args):
        for template_id, pairs in _discovery_sets(ctx, params, args, error_type, held_out=False).items():
            table = PatchingService.eap_scores(params, pairs, abs_per_pair=abs_per_pair)
            name = _name(ctx, error_type, template_id)
            ctx.output(f"eap:{name}", save_table(ctx.path("eap", f"{name}.json"), table))
            stdout(f"{name}: {len(pairs)} pairs, top score {table.scores.max():.4g}")
            if args.spearman:
                rho, _, _ = PatchingService.spearman_agreement(params, table, pairs, top_k=args.spearman)
                ctx.output(f"spearman:{name}", write_json(
                    ctx.path("eap", f"{name}-spearman.json"), {"rho": rho, "top_k": args.spearman}
                ))
                stdout(f"{name}: Spearman {rho:.3f}")
    ctx.finish()
    return 0


def run_search(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("search", args)
    band = tuple(float(v) for v in csv_list(args.band)) if args.band else None
    ctx.config = override(ctx.config, "search", k=args.k, n=args.step, band=band, eval_pairs=args.eval_pairs)
    params = ctx.load_params(args.checkpoint)
    for error_type in _error_types(ctx, args):
        for template_id, pairs in _discovery_sets(ctx, params, args, error_type, held_out=True).items():
            name = _name(ctx, error_type, template_id)
            table_path = ctx.path("eap", f"{name}.json")
            table = load_table(table_path, params.graph.edge_texts())
            ctx.inputs[f"eap:{name}"] = str(table_path)
            circuit, result = CircuitService.search_minimal_circuit(table, params, pairs, ctx.config.search)
            ctx.output(f"circuit:{name}", save_circuit(ctx.path("circuits", f"{name}.json"), circuit))
            ctx.output(f"search:{name}", write_json(ctx.path("search", f"{name}.json"), result.model_dump()))
            flag = " (FLAGGED: band not reached)" if result.flagged else ""
            stdout(f"{name}: {result.circuit_size} instances ({100 * result.fraction:.1f}%), "
                   f"faithfulness {result.faithfulness:.2f}%{flag}")
    ctx.finish()
    return 0


def _template_circuits(ctx: RunContext, error_type: str) -> List[Path]:
    """Search outputs `<op>-<error type>-t<id>.json`, in template order"""
    pattern = re.compile(rf"{re.escape(ctx.config.dataset.operation)}-{re.escape(error_type)}-t(\d+)")
    found = [(int(m.group(1)), p) for p in ctx.path("circuits").glob("*.json") if (m := pattern.fullmatch(p.stem))]
    return [p for _, p in sorted(found)]


def _circuit_groups(ctx: RunContext, args, error_types: List[str]) -> Dict[str, Tuple[List[str], List[Path]]]:
    """label -> (error types whose pairs evaluate the group, circuit files)"""
    if args.circuits:
        return {"+".join(error_types): (error_types, [Path(p) for p in csv_list(args.circuits)])}
    return {e: ([e], _template_circuits(ctx, e)) for e in error_types}


def run_intersect(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("intersect", args)
    if not args.tau and not args.sweep:
        raise CircuitError("nothing to do: pass --tau and/or --sweep")
    params = ctx.load_params(args.checkpoint)
    operation = ctx.config.dataset.operation

    for label, (error_types, paths) in _circuit_groups(ctx, args, _error_types(ctx, args)).items():
        if len(paths) < 2:
            raise CircuitError(f"need at least 2 circuits to intersect for {label}, found {len(paths)}")
        circuits = []
        for path in paths:
            circuits.append(load_circuit(path))
            ctx.inputs[f"circuit:{path.stem}"] = str(path)

        if args.tau:
            tau = Fraction(args.tau)
            circuit = CircuitService.soft_intersection(circuits, tau)
            name = f"{operation}-{label}-tau{tau.numerator}of{tau.denominator}"
            ctx.output(f"circuit:{name}", save_circuit(ctx.path("circuits", f"{name}.json"), circuit))
            stdout(f"{label} tau {tau}: {len(circuit)} instances -> {name}")

        if args.sweep:
            pairs_by_template: Dict[int, List[PromptPair]] = {}
            for error_type in error_types:
                for template_id, group in _discovery_sets(ctx, params, args, error_type, held_out=True).items():
                    pairs_by_template.setdefault(template_id, []).extend(group)
            rows = ReportService.tau_sweep_report(params, circuits, pairs_by_template, args.balance)
            payload = [r.model_dump() for r in rows]
            name = f"{operation}-{label}"
            ctx.output(f"tau_sweep:{name}", write_json(ctx.path("tau_sweep", f"{name}.json"), payload))
            ctx.output(f"tau_sweep_table:{name}", write_csv(
                ctx.path("tau_sweep", f"{name}.csv"), payload,
                ["tau", "edge_count", "faithfulness_mean", "faithfulness_std", "best_balance"],
            ))
            for row in rows:
                mark = " *" if row.best_balance else ""
                stdout(f"{label} tau {row.tau}: {row.edge_count} instances, "
                       f"{row.faithfulness_mean:.2f} ± {row.faithfulness_std:.2f}%{mark}")
    ctx.finish()
    return 0


def run_overlap(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("overlap", args)
    a, b = load_circuit(args.a), load_circuit(args.b)
    ctx.inputs.update({"a": args.a, "b": args.b})
    result = CircuitService.overlap(a, b)
    payload = result.model_dump()
    stdout(f"IoU {result.iou:.3f}  IoM {result.iom:.3f}  ({result.intersection}/{result.union})")

    if args.combine:
        combined = CircuitService.set_ops(a, b, args.combine)
        name = f"{Path(args.a).stem}-{args.combine}-{Path(args.b).stem}"
        ctx.output(f"circuit:{name}", save_circuit(ctx.path("circuits", f"{name}.json"), combined))
        if args.faithfulness_on:
            params = ctx.load_params(args.checkpoint)
            pair_sets = {}
            for error_type in csv_list(args.faithfulness_on):
                held_out = _discovery_sets(ctx, params, args, error_type, held_out=True)
                pair_sets[error_type] = [p for group in held_out.values() for p in group]
            payload["cross_faithfulness"] = CircuitService.cross_faithfulness(params, combined, pair_sets)
            for error_type, value in payload["cross_faithfulness"].items():
                stdout(f"{args.combine} circuit on {error_type}: {value:.2f}%")

    ctx.output("overlap", write_json(ctx.path("overlap.json"), payload))
    ctx.finish()
    return 0
