# circuitlab/cli/commands_interventions.py - `patch-heads` and `bridge`
import argparse
import logging

from circuitlab.cli.common import RunContext, add_checkpoint_arg, add_common_args, override, stdout
from circuitlab.core.errors import ConfigError
from circuitlab.crud.artifacts import load_circuit, write_json
from circuitlab.schemas.intervention import InterventionKind, InterventionSpec
from circuitlab.services.intervention_service import InterventionService, consistency_heads, top_heads
from circuitlab.utils.utils import format_head, parse_heads

logger = logging.getLogger(__name__)

SOURCES = {"single-error": "single", "consistent-error": "both"}
TARGETS = {"both-error": "both", "single-error": "single"}


def register(subparsers):
    parser = subparsers.add_parser("patch-heads", help="scaled attention-pattern patching with a random control")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--heads", default=None, help="manual head list, e.g. L1H2,L1H0 (default: detected)")
    parser.add_argument("--circuit", default=None, help="restrict head detection to this circuit's heads")
    parser.add_argument("--top-heads", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--source", choices=sorted(SOURCES), default="single-error")
    parser.add_argument("--target", choices=sorted(TARGETS), default="both-error")
    parser.add_argument("--single-type", choices=["result", "answer"], default="result",
                        help="which single-error dataset plays the single-error role")
    parser.add_argument("--control-seed", type=int, default=None)
    parser.add_argument("--max-pairs", type=int, default=None)
    parser.set_defaults(handler=run_patch_heads)

    parser = subparsers.add_parser("bridge", help="add an upper residual vector into a lower layer")
    add_common_args(parser)
    add_checkpoint_arg(parser)
    parser.add_argument("--src-layer", type=int, default=None, help="default: final residual stream")
    parser.add_argument("--src-pos", default=None)
    parser.add_argument("--dst-layer", type=int, default=None)
    parser.add_argument("--dst-pos", default=None)
    parser.add_argument("--scale", type=float, default=None)
    parser.add_argument("--max-pairs", type=int, default=None)
    parser.set_defaults(handler=run_bridge)


def _limit(pairs, max_pairs):
    return pairs[:max_pairs] if max_pairs else pairs


def run_patch_heads(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("patch-heads", args)
    ctx.config = override(ctx.config, "intervention", top_heads=args.top_heads, control_seed=args.control_seed)
    cfg = ctx.config.intervention
    params = ctx.load_params(args.checkpoint)

    roles = {"single": args.single_type, "both": "both"}
    target_key, source_key = TARGETS[args.target], SOURCES[args.source]
    if target_key == source_key:
        raise ConfigError("source and target conditions must differ")
    target_pairs = _limit(ctx.load_error_pairs(roles[target_key]), args.max_pairs)
    source_pairs = _limit(ctx.load_error_pairs(roles[source_key]), args.max_pairs)
    direction = "forward" if target_key == "both" else "reverse"
    alpha = args.alpha or (cfg.alpha if direction == "forward" else cfg.reverse_alpha)

    manual = args.heads or (",".join(cfg.heads) if cfg.heads else None)
    flagged = []
    if manual:
        heads = parse_heads(manual)
    else:
        circuit = load_circuit(args.circuit) if args.circuit else None
        if args.circuit:
            ctx.inputs["circuit"] = args.circuit
        prompt_sets = InterventionService.condition_prompts({
            error_type: _limit(ctx.load_error_pairs(error_type), args.max_pairs)
            for error_type in ("result", "answer", "both")
        })
        scores = InterventionService.detect_consistency_heads(
            params, circuit, prompt_sets, cfg.first_digit_min, cfg.match_gap_min
        )
        ctx.output("consistency_heads", write_json(
            ctx.path("consistency_heads.json"), [s.model_dump() for s in scores]
        ))
        heads = top_heads(scores, cfg.top_heads)
        flagged = consistency_heads(scores)
        first = prompt_sets["none"][0].template_id
        for layer, head in heads:
            grids = {
                condition: InterventionService.average_attention(
                    params,
                    [p.corrupt_tokens if condition == "none" else p.clean_tokens
                     for p in pairs if p.template_id == first],
                    (layer, head),
                ).tolist()
                for condition, pairs in prompt_sets.items()
            }
            name = format_head(layer, head)
            ctx.output(f"attention:{name}", write_json(
                ctx.path("attention", f"{name}.json"), {"template_id": first, "conditions": grids}
            ))
    if not heads:
        stdout("no heads selected; nothing to patch")

    report = InterventionService.head_patch_experiment(
        params, target_pairs, source_pairs, heads, alpha, direction,
        control_seed=cfg.control_seed, exclude_heads=flagged,
    )
    ctx.output(f"patch_heads:{direction}", write_json(
        ctx.path("interventions", f"patch-heads-{direction}.json"), report.model_dump()
    ))
    stdout(f"{report.spec.describe()} on {args.target}: accuracy "
           f"{report.result.accuracy_before:.1f} -> {report.result.accuracy_after:.1f}")
    if report.control is not None:
        stdout(f"random control {','.join(format_head(*h) for h in report.control_heads)}: accuracy "
               f"{report.control.accuracy_before:.1f} -> {report.control.accuracy_after:.1f}")
    ctx.finish()
    return 0


def run_bridge(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args("bridge", args)
    ctx.config = override(
        ctx.config, "intervention",
        bridge_src_layer=args.src_layer, bridge_src_pos=args.src_pos,
        bridge_dst_layer=args.dst_layer, bridge_dst_pos=args.dst_pos, bridge_scale=args.scale,
    )
    cfg = ctx.config.intervention
    params = ctx.load_params(args.checkpoint)
    spec = InterventionSpec(
        kind=InterventionKind.RESIDUAL_BRIDGE,
        src_layer=params.config.n_layers if cfg.bridge_src_layer is None else cfg.bridge_src_layer,
        src_pos=cfg.bridge_src_pos,
        dst_layer=cfg.bridge_dst_layer,
        dst_pos=cfg.bridge_dst_pos,
        scale=cfg.bridge_scale,
    )
    consistent = _limit(ctx.load_error_pairs("both"), args.max_pairs)
    single = {e: _limit(ctx.load_error_pairs(e), args.max_pairs) for e in ("result", "answer")}
    report = InterventionService.bridge_experiment(params, consistent, single, spec)
    ctx.output("bridge", write_json(ctx.path("interventions", "bridge.json"), report.model_dump()))
    stdout(f"{spec.describe()}: consistent-error accuracy "
           f"{report.consistent.accuracy_before:.1f} -> {report.consistent.accuracy_after:.1f}")
    for error_type, delta in report.single.items():
        stdout(f"  {error_type}-error accuracy {delta.accuracy_before:.1f} -> {delta.accuracy_after:.1f}")
    ctx.finish()
    return 0
