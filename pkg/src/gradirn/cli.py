"""Command-line entry point: synth, train, register, evaluate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime or data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .tensor import TensorError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_LAMBDA = {"ssd": 0.05, "ncc-global": 0.5, "ncc-local": 0.5}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _similarity(args):
    from .similarity import SimilarityKind

    if args.sim == "ncc-local":
        return SimilarityKind.ncc_local(args.window)
    return SimilarityKind(args.sim)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    from .data import synth_dataset

    path = synth_dataset(args.out, args.num_pairs, size=args.size, seed=args.seed,
                         deform_scale=args.deform_scale, smoothness=args.smoothness,
                         val_frac=args.val_frac, test_pairs=args.test_pairs)
    print(json.dumps({"manifest": str(path)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import DatasetError, load_dataset
    from .registration import RegistrationConfig, Variant
    from .training import TrainConfig, train

    if args.variant == "plain-gd":
        raise UsageError("nothing to train: plain-gd has no learnable parameters")
    lam = DEFAULT_LAMBDA[args.sim] if args.lam is None else args.lam
    reg_cfg = RegistrationConfig(variant=Variant(args.variant), levels=args.levels,
                                 steps_per_level=args.steps, similarity=_similarity(args), lam=lam)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed, clip_norm=args.clip_norm,
                      checkpoint_every=args.checkpoint_every)
    train_set = load_dataset(args.data, split="train")
    try:
        val_set = load_dataset(args.data, split="val")
    except DatasetError:
        val_set = None
    out = Path(args.out)
    params, state, tlog = train(train_set, cfg, reg_cfg, val_dataset=val_set, checkpoint_dir=out,
                                progress=lambda e: print(json.dumps(e), file=sys.stderr))
    _write_json(out / "train_log.json", {"config": reg_cfg.to_dict(), "seed": args.seed,
                                         "num_train": len(train_set),
                                         "num_val": len(val_set) if val_set else 0,
                                         **tlog.to_dict()})
    return EXIT_OK


def _params_for(args):
    """Registration config and parameters from ``--ckpt`` and/or the plain-gd flags."""
    from .registration import RegistrationConfig, Variant
    from .training import load_checkpoint

    if args.variant == "plain-gd":
        base = RegistrationConfig()
        if args.ckpt:
            _, _, _, base = load_checkpoint(args.ckpt)
        cfg = base.with_(variant=Variant.PLAIN_GD, alpha=args.alpha, plain_gd_step=args.step)
        if args.sim:
            cfg = cfg.with_(similarity=_similarity(args))
        return None, cfg
    if not args.ckpt:
        raise UsageError("--ckpt is required unless --variant plain-gd")
    params, _, _, cfg = load_checkpoint(args.ckpt)
    if args.variant and args.variant != cfg.variant.value:
        raise UsageError(f"checkpoint holds variant {cfg.variant.value}, not {args.variant}")
    return params, cfg


def cmd_register(args) -> int:
    from . import gtf
    from .data import load_image
    from .registration import register_pair

    params, cfg = _params_for(args)
    if args.dump_steps:
        cfg = cfg.with_(dump_intermediate=True)
    moving, fixed = load_image(args.moving), load_image(args.fixed)
    res = register_pair(moving, fixed, params, cfg)
    if args.out_disp:
        gtf.write(res.field.numpy(), args.out_disp)
    if args.out_warped:
        gtf.write(res.warped.numpy()[0], args.out_warped)
    report = {"variant": cfg.variant.value, "dissimilarity_before": res.dissimilarity_before,
              "dissimilarity_after": res.dissimilarity_after, "jacobian": res.jacobian.to_dict(),
              "seconds": res.seconds}
    if res.trajectory is not None:
        out = Path(args.dump_steps)
        out.mkdir(parents=True, exist_ok=True)
        steps = []
        for s in res.trajectory.steps:
            name = f"step-{s.step:02d}.gtf"
            gtf.write(s.field, out / name)
            steps.append({"step": s.step, "level": s.level, "shape": list(s.field.shape[1:]),
                          "dissimilarity": s.dissimilarity, "file": name})
        _write_json(out / "steps.json", {"steps": steps})
        report["trajectory"] = steps
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .evaluation import evaluate_dataset

    params, cfg = _params_for(args)
    dataset = load_dataset(args.data, split=args.split)
    report = evaluate_dataset(dataset, params, cfg, percentile=args.percentile, threads=args.threads)
    out = report.to_dict()
    out["config"] = cfg.to_dict()
    _write_json(args.report, out)
    agg = report.aggregate()
    print(json.dumps({"num_pairs": agg["num_pairs"], "mean_dice": agg["mean_dice"]["mean"],
                      "mean_initial_dice": agg["mean_initial_dice"]["mean"],
                      "folding_percent": agg["folding_percent"]["mean"]}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.kind:9s} {r.rel_error:.2e} < {r.tolerance:.0e}  {r.name}")
    failed = [r for r in results if not r.passed]
    if args.json:
        _write_json(args.json, {"seed": args.seed, "results": [r.to_dict() for r in results]})
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _add_model_flags(p, *, train: bool):
    variants = ["vn", "vn-nograd", "rc-cnn"] + ([] if train else ["plain-gd"])
    p.add_argument("--variant", choices=variants, default="vn" if train else None)
    p.add_argument("--sim", choices=["ssd", "ncc-global", "ncc-local"],
                   default="ssd" if train else None)
    p.add_argument("--window", type=int, default=9)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradirn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-pairs", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deform-scale", type=float, default=6.0)
    p.add_argument("--smoothness", type=float, default=16.0)
    p.add_argument("--val-frac", type=float, default=0.0)
    p.add_argument("--test-pairs", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a learnable variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p, train=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func in (("register", cmd_register), ("evaluate", cmd_evaluate)):
        p = sub.add_parser(name, help=f"{name} with a trained checkpoint or plain-gd")
        p.add_argument("--ckpt")
        _add_model_flags(p, train=False)
        p.add_argument("--alpha", type=float, default=0.0)
        p.add_argument("--step", type=float, default=1e-2)
        if name == "register":
            p.add_argument("--moving", required=True)
            p.add_argument("--fixed", required=True)
            p.add_argument("--out-disp")
            p.add_argument("--out-warped")
            p.add_argument("--dump-steps")
        else:
            p.add_argument("--data", required=True)
            p.add_argument("--report", required=True)
            p.add_argument("--split", default=None)
            p.add_argument("--percentile", type=float, default=100.0)
            p.add_argument("--threads", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gradirn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, ArithmeticError, KeyError, TensorError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"gradirn {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
