# circuitlab/cli/commands_probe.py - `probe`
import argparse
import logging

from circuitlab.cli.common import RunContext, add_checkpoint_arg, add_common_args, csv_list, override, stdout
from circuitlab.crud.artifacts import write_csv, write_json
from circuitlab.services.probe_service import ProbeService

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("probe", help="linear probes for the true result, per layer and position")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--layers", default="all", help="'all' or comma-separated residual layers")
    parser.add_argument("--positions", default=None, help="comma-separated position labels")
    parser.add_argument("--error-type", default="both", help="dataset whose error prompts are probed")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.set_defaults(handler=run_probe)


def run_probe(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("probe", args)
    layers = None if args.layers == "all" else [int(l) for l in csv_list(args.layers)]
    ctx.config = override(
        ctx.config, "probe", layers=layers, positions=csv_list(args.positions), epochs=args.epochs, lr=args.lr,
    )
    params = ctx.load_params(args.checkpoint)
    pairs = ctx.load_error_pairs(args.error_type)
    grid, _ = ProbeService.probe_layer_sweep(
        params, pairs, cfg=ctx.config.probe, seed=ctx.seed, n_workers=args.workers
    )

    ctx.output("probe_grid_table", write_csv(
        ctx.path("probe_grid.csv"),
        [c.model_dump() for c in grid.cells],
        ["layer", "position", "train_accuracy", "test_accuracy", "n_classes", "n_train", "n_test"],
    ))
    ctx.output("probe_grid", write_json(ctx.path("probe_grid.json"), {
        **grid.model_dump(),
        "test_accuracy": grid.accuracy("test"),
        "train_accuracy": grid.accuracy("train"),
        "error_type": args.error_type,
    }))
    for position in grid.positions:
        column = [row[grid.positions.index(position)] for row in grid.accuracy("test")]
        stdout(f"{position:>14}: " + " ".join(f"{v:.2f}" for v in column))
    ctx.finish()
    return 0
