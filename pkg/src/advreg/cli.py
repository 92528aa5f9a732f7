"""Command-line interface: ``advreg <subcommand> [options]``.

Every subcommand resolves an experiment configuration (``--config`` JSON
document, then explicit flags on top, then ``--seed``) so flags mirror
the configuration fields.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import TVConfig, fbp, tv_reconstruct
from .harness.experiment import ExperimentConfig, StageError, run_experiment, stability_check
from .harness.imageio import load_stack, save_image, save_stack
from .harness.metrics import psnr, ssim
from .harness.phantoms import generate_phantoms
from .nets import load_weights, save_weights
from .operators import add_noise
from .reconstruction import estimate_lambda, reconstruct
from .training import save_config, train

# flag name -> config field
_CONFIG_FLAGS = {
    "task": "task",
    "size": "size",
    "angles": "n_angles",
    "delta": "delta",
    "sigma": "sigma",
    "n_real": "n_real",
    "n_measured": "n_measured",
    "n_val": "n_val",
    "n_test": "n_test",
    "lam": "lam",
    "output_dir": "output_dir",
}
_TRAIN_FLAGS = ("steps", "mu", "lr", "batch_size", "optimizer")
_SOLVE_FLAGS = {"step": "step", "iterations": "iterations"}


def _common(p: argparse.ArgumentParser, train=False, solve=False):
    p.add_argument("--config", help="JSON experiment document")
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--task", choices=("denoise", "ct"))
    p.add_argument("--size", type=int, help="image side length")
    p.add_argument("--angles", type=int, help="number of projection angles (ct)")
    p.add_argument("--delta", type=float, help="pseudo-inverse smoothing in (0, 1]")
    p.add_argument("--sigma", type=float, help="noise standard deviation")
    if train:
        p.add_argument("--steps", type=int)
        p.add_argument("--mu", type=float, help="gradient-penalty weight")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--optimizer", choices=("adam", "rmsprop"))
    if solve:
        p.add_argument("--lam", type=float, help="regularization weight (default: noise heuristic)")
        p.add_argument("--step", type=float, help="gradient-descent step size")
        p.add_argument("--iterations", type=int)


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    d = cfg.to_dict()
    for flag, key in _CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    for flag in _TRAIN_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            d["train"][flag] = v
    for flag, key in _SOLVE_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d["solve"][key] = v
    cfg = ExperimentConfig.from_dict(d)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _save_batch(out: Path, name: str, images) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_stack(out / f"{name}.npy", images)
    for i, x in enumerate(images):
        save_image(out / name / f"{i:03d}", x)


def cmd_generate_data(args):
    cfg = resolve_config(args)
    op = cfg.operator()
    out = Path(args.out)
    images = generate_phantoms(cfg.phantom_spec(), args.n)
    rng = np.random.default_rng(cfg.noise().seed)
    meas = np.stack([add_noise(op.apply(x), cfg.noise(), rng) for x in images])
    _save_batch(out, "truth", images)
    save_stack(out / "measurements.npy", meas)
    (out / "config.json").write_text(cfg.resolved().to_json())
    print(f"wrote {len(images)} phantoms and measurements to {out}")


def cmd_train(args):
    cfg = resolve_config(args)
    op = cfg.operator()
    real = load_stack(args.real)
    meas = load_stack(args.measurements)
    tc = cfg.train_config()
    net, log = train(tc, real, meas, op)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(net, out)
    log.write_csv(out.with_suffix(".log.csv"))
    save_config(tc, out.with_suffix(".config.json"))
    print(f"trained {tc.steps} steps; final gap {np.mean(log.gap[-50:]):.4f}; weights -> {out}")


def _lambda(cfg, op):
    if cfg.lam is not None:
        return float(cfg.lam)
    return cfg.lam_scale * estimate_lambda(op, cfg.noise(), cfg.lam_samples, seed=cfg.seed + 3)


def cmd_reconstruct(args):
    cfg = resolve_config(args)
    op = cfg.operator()
    net = load_weights(args.weights)
    ys = load_stack(args.measurements)
    lam = _lambda(cfg, op)
    sc = cfg.solve_config(lam)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    recs = []
    for i, y in enumerate(ys):
        x, trace = reconstruct(net, op, y, sc, cfg.delta)
        recs.append(x)
        with open(out / "traces" / f"{i:03d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "data_term", "regularizer", "grad_norm", "step"])
            w.writerows(trace.rows())
    _save_batch(out, "recon", recs)
    if args.stability:
        rep = stability_check(net, op, ys[0], [0.1, 0.05, 0.025], sc, cfg.delta, seed=cfg.seed)
        (out / "stability.json").write_text(json.dumps({"scales": rep.scales, "deviations": rep.deviations, "monotone": rep.monotone}, indent=2))
    print(f"reconstructed {len(recs)} images with lambda {lam:.4f} -> {out}")


def cmd_tv(args):
    cfg = resolve_config(args)
    op = cfg.operator()
    ys = load_stack(args.measurements)
    tcfg = TVConfig(alpha=args.alpha, iterations=args.tv_iterations)
    out = Path(args.out)
    recs = []
    (out / "traces").mkdir(parents=True, exist_ok=True)
    for i, y in enumerate(ys):
        x, energies = tv_reconstruct(op, y, tcfg)
        recs.append(x)
        np.savetxt(out / "traces" / f"{i:03d}.csv", energies, delimiter=",", header="energy", comments="")
    _save_batch(out, "recon", recs)
    print(f"TV (alpha {args.alpha:g}) on {len(recs)} measurements -> {out}")


def cmd_fbp(args):
    cfg = resolve_config(args)
    op = cfg.operator()
    ys = load_stack(args.measurements)
    _save_batch(Path(args.out), "recon", [fbp(op, y, cfg.delta) for y in ys])
    print(f"pseudo-inverse of {len(ys)} measurements -> {args.out}")


def cmd_evaluate(args):
    recon = load_stack(args.recon)
    truth = load_stack(args.truth)
    if recon.shape != truth.shape:
        raise ValueError(f"reconstructions {recon.shape} and truths {truth.shape} differ in shape")
    p = [psnr(x, t) for x, t in zip(recon, truth)]
    s = [ssim(x, t) for x, t in zip(recon, truth)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "psnr", "ssim"])
        w.writerows([(i, repr(a), repr(b)) for i, (a, b) in enumerate(zip(p, s))])
    summary = {"count": len(p), "psnr": float(np.mean(p)), "ssim": float(np.mean(s))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"mean PSNR {summary['psnr']:.3f} dB, mean SSIM {summary['ssim']:.4f} over {len(p)} images")


def cmd_verify_theory(args):
    from .harness.theory import verify_theory

    seed = 0 if args.seed is None else args.seed
    verify_theory(args.out, seed=seed, steps=args.steps, toy_steps=args.toy_steps, figures=not args.no_figures)


def cmd_run_experiment(args):
    cfg = resolve_config(args)
    if args.no_figures:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "figures": False})
    run_experiment(cfg)


_STAGES = {
    "generate-data": "data",
    "train": "train",
    "reconstruct": "reconstruct",
    "tv": "baselines",
    "fbp": "baselines",
    "evaluate": "report",
    "verify-theory": "theory",
    "run-experiment": "experiment",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advreg", description="Learned adversarial regularizers for inverse problems.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="random ellipse phantoms and their noisy measurements")
    _common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a critic on unpaired ground truth and measurements")
    _common(p, train=True)
    p.add_argument("--real", required=True, help=".npy stack or directory of ground-truth images")
    p.add_argument("--measurements", required=True, help=".npy stack of measurements")
    p.add_argument("--out", required=True, help="weights file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="variational reconstruction with a trained critic")
    _common(p, solve=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stability", action="store_true", help="also run the data-perturbation stability check")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("tv", help="total-variation reconstruction")
    _common(p)
    p.add_argument("--measurements", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--tv-iterations", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tv)

    p = sub.add_parser("fbp", help="pseudo-inverse (filtered backprojection for ct)")
    _common(p)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of reconstructions against ground truth")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify-theory", help="circle-manifold and toy-duality probes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--toy-steps", type=int, default=2000)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("run-experiment", help="full pipeline: data, training, reconstructions, baselines, report")
    _common(p, train=True, solve=True)
    p.add_argument("--n-real", type=int)
    p.add_argument("--n-measured", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"advreg: error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"advreg: error [{_STAGES[args.command]}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
