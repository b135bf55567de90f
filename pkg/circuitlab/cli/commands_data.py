# circuitlab/cli/commands_data.py - `gen`: prompt-pair datasets
import argparse
import logging

from circuitlab.cli.common import RunContext, add_common_args, csv_list, override, stdout
from circuitlab.crud.artifacts import write_json
from circuitlab.crud.dataset import write_pairs
from circuitlab.services.dataset_service import DatasetService
from circuitlab.services.tokenizer_service import get_tokenizer

logger = logging.getLogger(__name__)

DEFAULT_ERROR_TYPES = "result,answer,both"


def register(subparsers):
    parser = subparsers.add_parser("gen", help="generate clean/corrupt prompt pairs")
    add_common_args(parser)
    parser.add_argument("--operation", choices=["add", "sub", "mul", "div"], default=None)
    parser.add_argument("--templates", default=None, help="comma-separated template ids (default 1..8)")
    parser.add_argument("--n", type=int, default=None, help="pairs per template and error type")
    parser.add_argument("--error-types", default=DEFAULT_ERROR_TYPES,
                        help=f"comma-separated error types (default {DEFAULT_ERROR_TYPES})")
    parser.add_argument("--computation", action="store_true", help="also write computation pairs")
    parser.set_defaults(handler=run_gen)


def run_gen(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("gen", args)
    templates = csv_list(args.templates)
    ctx.config = override(
        ctx.config,
        "dataset",
        operation=args.operation,
        templates=[int(t) for t in templates] if templates else None,
        n=args.n,
        error_types=csv_list(args.error_types),
    )
    cfg = ctx.config.dataset
    service = DatasetService(max_dividend=cfg.max_dividend)

    first_type = None
    for error_type in cfg.error_types:
        pairs = []
        for template_id in cfg.templates:
            pairs.extend(service.generate_pairs(template_id, cfg.n, error_type, ctx.seed, cfg.operation))
        path = write_pairs(ctx.data_path(error_type), pairs)
        ctx.output(f"data:{error_type}", path)
        stdout(f"{error_type}: {len(pairs)} pairs -> {path}")
        first_type = first_type or pairs

    if args.computation and first_type:
        pairs = service.make_computation_pairs(first_type, ctx.seed)
        path = write_pairs(ctx.data_path("computation"), pairs)
        ctx.output("data:computation", path)
        stdout(f"computation: {len(pairs)} pairs -> {path}")

    ctx.output("tokenizer", write_json(ctx.path("tokenizer.json"), get_tokenizer().to_json()))
    ctx.finish()
    return 0
