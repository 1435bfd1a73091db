"""Command-line surface: data generation, training, sampling, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import acdt, gradcheck, latentcodec, metrics, synthdata, training
from .config import RunConfig, load_config, save_config


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    p = _Parser(prog="acd", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic layout-annotated dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--config", default=None, help="key=value file (defaults when omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)

    s = sub.add_parser("sample", help="generate a video from a checkpoint and a layout")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layout", required=True, help="sample directory with control signals")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--cfg-scale", type=float, default=None)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a checkpoint against a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=1000)

    c = sub.add_parser("grad-check", help="finite-difference the ops and both losses")
    c.add_argument("--module", choices=("all", "ops", "model"), default="all")

    v = sub.add_parser("validate-data", help="schema-check a dataset directory")
    v.add_argument("--dir", required=True)
    return p


def _cmd_gen_data(args) -> int:
    manifest = synthdata.write_dataset(args.n, args.out, args.seed, frames=args.frames,
                                       height=args.height, width=args.width)
    print(f"wrote {args.n} samples under {args.out} (manifest: {manifest})")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    cfg.data_dir = str(args.data)
    cfg.out_dir = str(args.out)
    dataset = synthdata.load_dataset(args.data)
    final = training.run_training(dataset, cfg, args.out, log=print)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_sample(args) -> int:
    cfg = load_config(Path(args.ckpt) / "config.txt")
    if args.steps is not None:
        cfg.sampler_steps = args.steps
    if args.cfg_scale is not None:
        cfg.cfg_scale = args.cfg_scale
    cfg.validate()
    model, control = training.load_system(args.ckpt, cfg)
    layout_sample = synthdata.load_sample(args.layout)
    video = metrics.generate_for_sample(model, control, layout_sample, cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", cfg)
    latent = latentcodec.encode(video, cfg.patch_t, cfg.patch_s)
    acdt.save_acdt(out / "latent.acdt", latent)
    acdt.save_acdt(out / "video.acdt", video)
    synthdata.video_to_ppm_frames(video, out / "frames")
    print(f"sampled {video.shape} video into {out}")
    return 0


def _cmd_eval(args) -> int:
    dataset = synthdata.load_dataset(args.data)
    report = metrics.eval_checkpoint(args.ckpt, dataset, args.out, eval_seed=args.seed,
                                     log=print)
    cfg = load_config(Path(args.ckpt) / "config.txt")
    save_config(Path(args.out) / "config.txt", cfg)
    print(report.summary(), end="")
    return 0


def _cmd_grad_check(args) -> int:
    errors = {}
    if args.module in ("all", "ops"):
        errors.update(gradcheck.op_suite_checks())
    if args.module in ("all", "model"):
        errors.update(gradcheck.model_loss_checks())
    ok = True
    for name in sorted(errors):
        good = errors[name] < gradcheck.TOLERANCE
        ok = ok and good
        print(f"{name:>18s}  max_rel_err={errors[name]:.3e}  [{'ok' if good else 'FAIL'}]")
    if not ok:
        raise RuntimeError("gradient check failed (see per-op errors above)")
    return 0


def _cmd_validate_data(args) -> int:
    problems = synthdata.validate_dataset(args.dir)
    if problems:
        for msg in problems:
            print(msg, file=sys.stderr)
        raise RuntimeError(f"{len(problems)} schema problem(s) in {args.dir}")
    print(f"{args.dir}: dataset conforms to schema")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
    "validate-data": _cmd_validate_data,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"acd {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
