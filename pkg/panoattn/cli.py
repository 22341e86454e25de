"""panoattn CLI: layout, encoder, benchmark, oracle and evaluation commands.

Usage:
    panoattn layout   [--profile desk] [--out DIR]    # layout.yml + window images
    panoattn forward  [--seed N]                      # encoder on a synthetic pyramid
    panoattn bench    [--measure TRIALS]              # FLOP table, optional timing
    panoattn verify   [--only NAME ...]               # oracle suite
    panoattn eval     --pred FILE --gt FILE           # metrics for detection files
    panoattn pipeline                                 # end-to-end run + manifest
"""

import argparse
import logging
import os
import sys

from panoattn import workspace
from panoattn.archive import (
    encoder_tensors,
    pyramid_tensors,
    read_detections,
    write_detections,
    write_json,
    write_jsonl,
    write_npz,
    write_text,
)
from panoattn.config import RunConfig, config_hash, load_config
from panoattn.encoder import encoder_forward
from panoattn.errors import ConfigError, PanoattnError
from panoattn.flops import flop_report, format_table, measure_empirical
from panoattn.geometry import KINDS
from panoattn.metrics import evaluate, format_report
from panoattn.pipeline import build_stack, run_pipeline, tensor_checksum
from panoattn.render import write_layout_images, write_layout_yaml
from panoattn.synthetic import synth_pyramid
from panoattn.verify import OracleSuite

logger = logging.getLogger("panoattn.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _load(args) -> tuple[dict, RunConfig]:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    raw = load_config(args.config, profile=args.profile, overrides=overrides)
    config = RunConfig.from_dict(raw)
    workspace.init(raw, cli_out=args.out)
    return raw, config


def cmd_layout(args, config: RunConfig) -> int:
    layout = config.layout
    yml = write_layout_yaml(layout, workspace.path("layout.yml"))
    images = write_layout_images(layout, workspace.root())
    print(f"\n🗺️  Layout ({config.profile}): {layout.num_cameras} cameras, {layout.num_levels} levels\n")
    for lv in layout.levels:
        print(f"   L{lv.index}  stride {lv.stride:>3}  pano {lv.pano_h}x{lv.pano_w}  r_mv={lv.r_mv}  r_roi={lv.r_roi}")
    print(f"\n✅ Wrote {yml.name} and {len(images)} images to {workspace.root()}\n")
    return EXIT_OK


def cmd_forward(args, config: RunConfig) -> int:
    pyramid = synth_pyramid(config, config.seed)
    stack = build_stack(config)
    output = encoder_forward(stack, pyramid, workers=config.threads)

    write_npz(workspace.path("encoder_output.npz"), "encoder_output", pyramid_tensors(output))
    write_npz(workspace.path("encoder_params.npz"), "encoder_params", encoder_tensors(stack))
    manifest = {
        "config_hash": config_hash(config.raw),
        "profile": config.profile,
        "mode": config.mode,
        "seed": config.seed,
        "shapes": [list(level.shape) for level in output],
        "checksums": {
            "encoder_input": tensor_checksum(pyramid),
            "encoder_output": tensor_checksum(output),
            "encoder_params": tensor_checksum(encoder_tensors(stack).values()),
        },
    }
    write_json(workspace.path("manifest.json"), "manifest", manifest)
    print(f"✅ Encoder forward: {len(stack.blocks)} blocks, output checksum {manifest['checksums']['encoder_output'][:16]}…")
    return EXIT_OK


def cmd_bench(args, config: RunConfig) -> int:
    layout = config.layout
    report = flop_report(layout, config.encoder.batch, config.encoder.channels)
    timings = {}
    if args.measure:
        for lv in layout.levels:
            for kind in KINDS:
                timings[(lv.index, kind)] = measure_empirical(layout, lv.index, kind, args.measure,
                                                              channels=config.encoder.channels, seed=config.seed)

    table = format_table(report, timings)
    write_text(workspace.path("bench.txt"), "bench", table)
    rows = []
    for row in report.rows:
        record = row.to_record()
        timing = timings.get((row.level, row.kind))
        if timing is not None:
            record["measured_ratio"] = timing.measured_ratio
        rows.append(record)
    write_jsonl(workspace.path("bench.jsonl"), "bench", rows)
    print(table)
    return EXIT_OK


def cmd_verify(args, config: RunConfig) -> int:
    try:
        results = OracleSuite(config).run(args.only)
    except ValueError as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    write_jsonl(workspace.path("verify.jsonl"), "verify", (r.to_record() for r in results))
    print()
    for r in results:
        print(f"  {'✅' if r.passed else '❌'} {r.name:<24} {r.detail}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print()
    if failed:
        print(f"❌ {len(failed)} of {len(results)} oracles failed: {', '.join(failed)}\n")
        return EXIT_FAILURE
    print(f"✅ All {len(results)} oracles passed\n")
    return EXIT_OK


def _write_metrics(bundle) -> str:
    report = format_report(bundle)
    write_json(workspace.path("metrics.json"), "metrics", bundle.to_dict())
    write_text(workspace.path("metrics.txt"), "metrics", report)
    return report


def cmd_eval(args, config: RunConfig) -> int:
    preds = read_detections(args.pred)
    gts = read_detections(args.gt)
    bundle = evaluate(preds, gts, config.dist_thresholds, config.tp_threshold)
    print(_write_metrics(bundle))
    return EXIT_OK


def cmd_pipeline(args, config: RunConfig) -> int:
    result = run_pipeline(config)
    write_detections(workspace.path("detections.jsonl"), result.detections)
    write_detections(workspace.path("ground_truth.jsonl"), result.ground_truth)
    report = _write_metrics(result.metrics)
    write_json(workspace.path("manifest.json"), "manifest", result.manifest)
    counts = result.manifest["counts"]
    print(report)
    print(f"✅ Pipeline: {counts['aggregated']} fused detections → {counts['post_nms']} after NMS")
    return EXIT_OK


COMMANDS = {
    "layout": cmd_layout,
    "forward": cmd_forward,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML config file")
    common.add_argument("--profile", "-p", help="Base profile (paper or desk)")
    common.add_argument("--seed", "-s", type=int, help="Run seed (unsigned 64-bit)")
    common.add_argument("--mode", choices=["verify", "bench"], help="Element type: 64-bit (verify) or 32-bit (bench)")
    common.add_argument("--out", "-o", help="Output directory")

    parser = argparse.ArgumentParser(
        prog="panoattn",
        description="Windowed multi-view attention over panoramic camera features",
    )
    subparsers = parser.add_subparsers(dest="command")

    subparsers.add_parser("layout", parents=[common], help="Write the layout file and window images")
    subparsers.add_parser("forward", parents=[common], help="Run the encoder on a synthetic pyramid")

    bench_parser = subparsers.add_parser("bench", parents=[common], help="FLOP table per level and window kind")
    bench_parser.add_argument("--measure", type=int, default=0, metavar="TRIALS", help="Add best-of-TRIALS timings")

    verify_parser = subparsers.add_parser("verify", parents=[common], help="Run the oracle suite")
    verify_parser.add_argument("--only", nargs="+", metavar="NAME", help="Run only these oracles")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate detection files")
    eval_parser.add_argument("--pred", required=True, help="Prediction records (.jsonl)")
    eval_parser.add_argument("--gt", required=True, help="Ground-truth records (.jsonl)")

    subparsers.add_parser("pipeline", parents=[common], help="End-to-end synthetic run")
    return parser


def _setup_logging():
    level = os.getenv("PANOATTN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    _setup_logging()
    try:
        _, config = _load(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_USAGE
    except (PanoattnError, OSError) as e:
        print(f"❌ {e}")
        return EXIT_FAILURE


def main_sync():
    """Entry point for the 'panoattn' console script."""
    sys.exit(main())


if __name__ == "__main__":
    main_sync()
