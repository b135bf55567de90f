# circuitlab/cli/commands_train.py - `train` and `eval`
import argparse
import logging
from pathlib import Path

from circuitlab.cli.common import (
    CHECKPOINT_NAME,
    RunContext,
    add_checkpoint_arg,
    add_common_args,
    csv_list,
    override,
    stdout,
)
from circuitlab.crud.artifacts import write_csv, write_json
from circuitlab.crud.checkpoint import save_checkpoint
from circuitlab.models.transformer import init_model
from circuitlab.services.dataset_service import DatasetService
from circuitlab.services.report_service import ReportService
from circuitlab.services.tokenizer_service import get_tokenizer
from circuitlab.services.trainer_service import TrainerService, TrainingData

logger = logging.getLogger(__name__)

SINGLE_ERROR_TYPES = ("result", "answer")


def register(subparsers):
    parser = subparsers.add_parser("train", help="train the desk transformer")
    add_common_args(parser)
    parser.add_argument("--data", default=None, help="comma-separated JSONL datasets (default result+answer)")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--n-layers", type=int, default=None)
    parser.add_argument("--n-heads", type=int, default=None)
    parser.add_argument("--d-model", type=int, default=None)
    parser.add_argument("--computation-n", type=int, default=None,
                        help="computation prompts per template (default: dataset n)")
    parser.add_argument("--no-progress", action="store_true")
    parser.set_defaults(handler=run_train)

    parser = subparsers.add_parser("eval", help="detection accuracy per error type")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--error-types", default="result,answer,both")
    parser.set_defaults(handler=run_eval)


def run_train(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("train", args)
    tokenizer = get_tokenizer()
    ctx.config = override(
        ctx.config, "model",
        n_layers=args.n_layers, n_heads=args.n_heads, d_model=args.d_model,
        vocab_size=len(tokenizer), seed=ctx.seed,
    )
    ctx.config = override(ctx.config, "train", steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=ctx.seed)
    cfg = ctx.config

    paths = csv_list(args.data) or [str(ctx.data_path(e)) for e in SINGLE_ERROR_TYPES]
    pairs = []
    for path in paths:
        pairs.extend(ctx.load_error_pairs(Path(path).stem, path))

    computation = []
    if cfg.train.task_mix.get("computation", 0) > 0:
        service = DatasetService(max_dividend=cfg.dataset.max_dividend)
        n = args.computation_n or cfg.dataset.n
        for template_id in sorted({p.template_id for p in pairs}):
            computation.append(service.make_computation_prompts(template_id, n, ctx.seed, cfg.dataset.operation))

    params = init_model(cfg.model)
    logger.info(f"Training {params.n_parameters()} parameters for {cfg.train.steps} steps")
    trained, curve = TrainerService.train(
        params, TrainingData.from_pairs(pairs, computation), cfg.train, progress=not args.no_progress
    )
    checkpoint = save_checkpoint(ctx.path(CHECKPOINT_NAME), trained, extra={"steps": cfg.train.steps})
    ctx.checkpoint_id = trained.fingerprint()[:16]
    ctx.output("checkpoint", checkpoint)
    ctx.output("loss_curve", write_csv(ctx.path("loss.csv"), curve, ["step", "loss", "task"]))
    if curve:
        stdout(f"final loss {curve[-1]['loss']:.4f} after {len(curve)} steps")
    ctx.finish()
    return 0


def run_eval(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("eval", args)
    params = ctx.load_params(args.checkpoint)

    summaries = {}
    single_pairs = []
    for error_type in csv_list(args.error_types):
        pairs = ctx.load_error_pairs(error_type)
        summaries[error_type] = TrainerService.evaluate_detection_accuracy(params, pairs)
        if error_type in SINGLE_ERROR_TYPES:
            single_pairs.extend(pairs)
        stdout(f"{error_type}: {summaries[error_type].mean:.2f}% ± {summaries[error_type].std:.2f}")
    if single_pairs:
        summaries["single"] = TrainerService.evaluate_detection_accuracy(params, single_pairs)

    ctx.output("accuracy", write_json(ctx.path("accuracy.json"), {k: v.model_dump() for k, v in summaries.items()}))
    ctx.output("accuracy_table", write_csv(
        ctx.path("accuracy.csv"),
        ReportService.accuracy_rows(list(summaries.values())),
        ["error_type", "template_id", "accuracy", "n_pairs"],
    ))
    ctx.finish()
    return 0
