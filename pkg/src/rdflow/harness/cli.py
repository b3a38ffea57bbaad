"""``rdflow`` command line: gen-data | train | eval | rollout | render | corr-study."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .. import __version__
from ..icgen import FAMILIES
from . import runner
from .config import PRESETS, ConfigError, ExperimentConfig, load, merge, preset

EXIT_ERROR = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--preset", help=f"named preset ({len(PRESETS)} available, see `rdflow presets`)")
    p.add_argument("--seed", type=int, help="base seed S: ICs S, validation S+1, weights S, evaluation S+2")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdflow", description="Reaction-diffusion flow-map operator learning.")
    parser.add_argument("--version", action="version", version=f"rdflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write reference trajectories (RDTRAJ01)")
    _common(p)
    p.add_argument("--split", action="append", choices=runner.SPLITS,
                   help="split to generate (repeatable; default train, val, test)")

    p = sub.add_parser("train", help="train the configured method")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from ckpt/last.ckpt")

    p = sub.add_parser("eval", help="AMAE protocol on the test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate (default ckpt/best.ckpt)")

    p = sub.add_parser("rollout", help="dump a single-IC rollout and its reference")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--family", default="single_gaussian", choices=FAMILIES)
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("render", help="snapshots to PGM (per channel) or paletted PPM")
    _common(p)
    p.add_argument("inputs", nargs="+", type=Path, help="RDTRAJ01 files")
    p.add_argument("--palette", action="store_true", help="write P6 colour images, u and v side by side")
    p.add_argument("--every", type=int, help="render every k-th snapshot")
    p.add_argument("--render-dir", type=Path, help="output directory (default OUT/render)")

    p = sub.add_parser("corr-study", help="validation vs OOD-probe correlation over training")
    _common(p)

    sub.add_parser("presets", help="list preset names")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.preset:
        cfg = preset(args.preset)
        if args.config:
            if not args.config.exists():
                raise ConfigError(f"config file {args.config} does not exist")
            cfg = merge(cfg, args.config.read_text())
    elif args.config:
        cfg = load(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        s = args.seed
        cfg = dataclasses.replace(cfg, seeds=dataclasses.replace(cfg.seeds, ics=s, val=s + 1, weights=s, eval=s + 2))
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(sorted(PRESETS)))
        return 0
    say = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        cfg = resolve_config(args)
        say(f"rdflow {args.command}: {cfg.provenance()} out={cfg.out}")
        if args.command == "gen-data":
            paths = runner.gen_data(cfg, tuple(args.split or ("train", "val", "test")))
            say(f"wrote {len(paths)} trajectories")
        elif args.command == "train":
            result = runner.train(cfg, resume=args.resume, progress=say)
            say(f"done: {result.state.updates} updates, best validation {result.state.J_best}")
        elif args.command == "eval":
            _, summaries = runner.evaluate(cfg, runner.load_operator(cfg, args.checkpoint))
            for kind, method, s in summaries:
                print(f"{kind} {method} {s.family}: AMAE {s.amae:.6g} over {s.n_seeds} seeds"
                      + (f" (blew up: {s.blown_up})" if s.blown_up else ""))
        elif args.command == "rollout":
            pred, ref = runner.rollout_dump(cfg, runner.load_operator(cfg, args.checkpoint), args.family, args.index)
            print(pred)
            print(ref)
        elif args.command == "render":
            if args.every is not None and args.every < 1:
                raise ConfigError("--every must be >= 1")
            n = 0
            for path in args.inputs:
                if not path.exists():
                    raise runner.HarnessError(f"input file {path} does not exist")
                n += len(runner.render(cfg, path, args.render_dir, args.palette or None, args.every))
            say(f"wrote {n} images")
        elif args.command == "corr-study":
            _, summary = runner.corr_study(cfg, progress=say)
            for key, (n, r, p) in summary.items():
                print(f"n_fail={key}: r={r:.4f} p={p:.3g} over {n} points")
    except (ConfigError, runner.HarnessError, ValueError, OSError) as exc:
        print(f"rdflow: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
