"""``avfulldit`` command line: train, compare, sample, ablate, verify.

Exit codes: 0 success, 2 configuration error, 3 verification failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as C
from . import harness as H
from .canonical import ConfigError
from .container import CheckpointError
from .descriptors import UnknownDescriptor
from .flowmatch import GuidanceSpec

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.override(**{"train.seed": args.seed, "infer.seed": args.seed})
    if args.out:
        cfg = cfg.override(out=args.out)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    res = H.run(cfg, Path(cfg.out), log=_log)
    ratio = H.train_loss_ratio(res.losses) if len(res.losses) >= 60 else float("nan")
    print(f"run directory: {res.out}")
    print(f"final/initial train loss: {ratio:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    H.compare(cfg, Path(cfg.out), log=_log)
    print(f"report: {Path(cfg.out) / 'compare.txt'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    H.ablate(cfg, Path(cfg.out), args.grid, log=_log)
    print(f"report: {Path(cfg.out) / 'ablate.txt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.out)
    guidance = GuidanceSpec(
        cfg.infer.scale_video if args.scale_video is None else args.scale_video,
        cfg.infer.scale_audio if args.scale_audio is None else args.scale_audio,
    )
    steps = cfg.infer.steps if args.steps is None else args.steps
    c_v = [s.strip() for s in args.video.split(",")]
    c_a = [s.strip() for s in args.audio.split(",")]
    rows = H.sample_clips(Path(args.checkpoint), c_v, c_a, guidance, cfg.infer.seed, args.n, steps, out)
    for r in rows:
        print(r.format())
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify as V

    if args.list_mutations:
        print("\n".join(V.MUTATIONS))
        return EXIT_OK
    results = V.run_checks(args.mutate)
    text = V.format_results(results)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "verify.txt").write_text(text)
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avfulldit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config (key = value text)")
        sp.add_argument("--out", help="output directory (overrides the config's `out`)")
        sp.add_argument("--seed", type=int, help="overrides train.seed and infer.seed")

    common(sub.add_parser("train", help="train one model and evaluate it"))
    common(sub.add_parser("compare", help="matched-seed T2AV vs T2V comparison"))
    sp = sub.add_parser("ablate", help="run a grid of variants")
    common(sp)
    sp.add_argument("--grid", help='e.g. "rope=vanilla,shrink_audio;lambda_a=0.1,1.0"')
    sp = sub.add_parser("sample", help="generate clips from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--video", default="scene:bouncing_ball,height:mid,contact:yes",
                    help="comma-separated video descriptor symbols")
    sp.add_argument("--audio", default="clicks:yes,count:3-4,bed:quiet",
                    help="comma-separated audio descriptor symbols")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--scale-video", type=float)
    sp.add_argument("--scale-audio", type=float)
    sp = sub.add_parser("verify", help="run the invariant suite")
    common(sp)
    sp.add_argument("--mutate", help="inject a named defect; the suite must then fail")
    sp.add_argument("--list-mutations", action="store_true")
    return p


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "ablate": cmd_ablate, "sample": cmd_sample,
            "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, UnknownDescriptor, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
