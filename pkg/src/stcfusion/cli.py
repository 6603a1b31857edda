"""Command-line entry point: ``stcfusion <command> [--config run.toml] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import pipeline
from .config import load_config
from .errors import StcError
from .scoring import UndefinedAUCError

log = logging.getLogger("stcfusion")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set train.spatial.epochs=5")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    for name in ("data-root", "cache-root", "checkpoints", "reports"):
        p.add_argument(f"--{name}", help=f"shorthand for --set paths.{name.replace('-', '_')}=...")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcfusion",
                                     description="Object-centric dual-stream video anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("synth", "generate the synthetic corpus"),
                        ("preprocess", "detections + flow -> cached frame groups"),
                        ("score", "score the test split into scores.csv"),
                        ("plot", "draw score-vs-label curves from scores.csv")):
        _common(sub.add_parser(name, help=help_))
    p = sub.add_parser("train", help="train one stream")
    _common(p)
    p.add_argument("--stream", required=True, choices=pipeline.STREAMS)
    p.add_argument("--no-memory", action="store_true", help="train the ablation variant without memory")
    p = sub.add_parser("eval", help="AUC, report and optional ablation table")
    _common(p)
    p.add_argument("--ablation", action="store_true",
                   help="also score spatial/temporal/dual networks with and without memory")
    p = sub.add_parser("all", help="synth -> preprocess -> train both streams -> score -> eval")
    _common(p)
    p.add_argument("--ablation", action="store_true",
                   help="also train the no-memory variants and report the ablation table")
    p.add_argument("--skip-synth", action="store_true", help="use existing data under data_root")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for name in ("data_root", "cache_root", "checkpoints", "reports"):
        value = getattr(args, name)
        if value is not None:
            overrides.append(f"paths.{name}={value!r}".replace("'", '"'))
    return load_config(args.config, overrides)


def _print_eval(report):
    print(f"frame AUC: {report['auc']:.6f}")
    for video, auc in report["auc_per_video"].items():
        print(f"  {video}: {'n/a' if auc is None else f'{auc:.6f}'}")
    if "ablation" in report:
        print(pipeline.format_ablation(report["ablation"]))


def run(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "synth":
        m = pipeline.run_synth(cfg)
        print(f"corpus written to {cfg.paths.data_root} ({m['anomalous_frames_total']} anomalous test frames)")
    elif cmd == "preprocess":
        m = pipeline.run_preprocess(cfg)
        for split, videos in m["splits"].items():
            groups = sum(v["groups"] for v in videos.values())
            print(f"{split}: {len(videos)} videos, {groups} frames with targets")
    elif cmd == "train":
        path = pipeline.run_train(cfg, args.stream, memory=not args.no_memory)
        print(f"checkpoint written to {path}")
    elif cmd == "score":
        series = pipeline.run_score(cfg)
        print(f"scored {len(series)} frames -> {cfg.path('reports') / 'scores.csv'}")
    elif cmd == "eval":
        _print_eval(pipeline.run_eval(cfg, ablation=args.ablation))
    elif cmd == "plot":
        paths = pipeline.run_plot(cfg)
        print(f"{len(paths)} curves written")
    elif cmd == "all":
        t0 = time.perf_counter()
        if not args.skip_synth:
            pipeline.run_synth(cfg)
        pipeline.run_preprocess(cfg)
        variants = (True, False) if args.ablation else (True,)
        for memory in variants:
            for stream in pipeline.STREAMS:
                pipeline.run_train(cfg, stream, memory)
        pipeline.run_score(cfg)
        _print_eval(pipeline.run_eval(cfg, ablation=args.ablation))
        print(f"total time: {time.perf_counter() - t0:.1f}s")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except StcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except UndefinedAUCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
