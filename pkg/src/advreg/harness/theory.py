"""Toy experiments probing the critic theory, and the ``verify-theory`` report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..analysis import (
    Circle,
    coercivity_probe,
    constant_critic,
    critic_vs_distance,
    decay_slope,
    distance_critic,
    rotated_critic,
    segment_samples,
    wasserstein1_exact,
)
from ..nets import Architecture
from ..operators import IdentityOperator
from ..training import TrainConfig, lipschitz_report, train

CIRCLE_SIGMA = 0.3
CIRCLE_SAMPLES = 512


def circle_samples(n: int = CIRCLE_SAMPLES, sigma: float = CIRCLE_SIGMA, seed: int = 0, radius: float = 1.0):
    """``(real, noisy)`` on a circle; ``real`` is the projection of the radially perturbed ``noisy``."""
    m = Circle(radius)
    noisy = m.perturb(n, sigma, np.random.default_rng(seed))
    return m, m.project(noisy), noisy


def circle_train_config(seed: int = 0, steps: int = 5000) -> TrainConfig:
    return TrainConfig(
        mu=10.0,
        batch_size=64,
        steps=steps,
        lr=1e-3,
        seed=seed,
        architecture=asdict(Architecture(input_shape=(2,), conv=(), dense=(64, 64))),
    )


def train_circle_critic(real, noisy, seed: int = 0, steps: int = 5000):
    cfg = circle_train_config(seed, steps)
    return train(cfg, real, noisy, IdentityOperator((2,)))


def toy_duality(mu: float = 100.0, lr: float = 3e-4, steps: int = 2000, seed: int = 0) -> dict:
    """Critic on real = {-1, 1}, noisy = {-3, 3}; exact W1 is 2."""
    real = np.array([[-1.0], [1.0]])
    noisy = np.array([[-3.0], [3.0]])
    cfg = TrainConfig(
        mu=mu, batch_size=16, steps=steps, lr=lr, seed=seed,
        architecture=asdict(Architecture(input_shape=(1,), conv=(), dense=(64, 64))),
    )
    net, log = train(cfg, real, noisy, IdentityOperator((1,)))
    gap = float(np.mean(net(noisy)) - np.mean(net(real)))
    return {
        "gap": gap,
        "w1": wasserstein1_exact(real, noisy),
        "lipschitz": lipschitz_report(net, real, noisy, 256, seed=seed),
        "net": net,
        "log": log,
    }


def penalized_toy_gap(mu: float) -> float:
    """Gap of the exact minimizer of the penalized toy loss over piecewise-linear critics.

    Interpolates put mass 3/4 on |x| in [1, 3] and 1/4 on [-1, 1]; the
    optimal critic is flat on the middle and has slope ``1 + 1/(0.75 mu)``
    outside, so the gap is twice that slope.
    """
    return 2.0 * (1.0 + 1.0 / (0.75 * mu))


def verify_theory(out_dir, seed: int = 0, steps: int = 5000, toy_steps: int = 2000, figures: bool = True, log=print) -> dict:
    """Run the circle and toy probes; write ``theory.csv``, ``theory.json`` and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = log or (lambda *a: None)
    m, real, noisy = circle_samples(seed=seed)
    scale = CIRCLE_SIGMA
    rows = []

    ana = decay_slope(distance_critic(m), real, noisy, scale=scale)
    rot = decay_slope(rotated_critic(m), real, noisy, scale=scale)
    const = decay_slope(constant_critic(), real, noisy, scale=scale)
    rows += [
        ("decay_slope", "distance", ana.numeric, ana.predicted),
        ("decay_slope", "rotated", rot.numeric, rot.predicted),
        ("decay_slope", "constant", const.numeric, const.predicted),
    ]
    log(f"analytic critic slope {ana.numeric:.4f} (predicted {ana.predicted:.4f})")
    log(f"rotated competitor slope {rot.numeric:.4f}")

    net, tlog = train_circle_critic(real, noisy, seed=seed, steps=steps)
    tlog.write_csv(out / "circle_train_log.csv")
    trained = decay_slope(net, real, noisy, scale=scale)
    rows.append(("decay_slope", "trained", trained.numeric, trained.predicted))
    log(f"trained critic slope {trained.numeric:.4f} (predicted {trained.predicted:.4f})")

    rep = critic_vs_distance(net, m, segment_samples(m, noisy, 4, seed=seed))
    rows += [("distance_fit", "correlation", rep.correlation, 1.0), ("distance_fit", "cosine", rep.mean_cosine, 1.0)]
    log(f"trained critic vs distance: correlation {rep.correlation:.4f}, cosine {rep.mean_cosine:.4f}")

    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((8, 2))
    ts = np.linspace(0.0, 100.0, 401)
    y = noisy[0]
    coer = coercivity_probe(net, IdentityOperator((2,)), y, dirs, ts, lam=1.0)
    rows.append(("coercivity", "all_finite", float(coer.all_finite), 1.0))
    rows.append(("coercivity", "max_threshold", float(coer.thresholds.max()), float("nan")))

    toy = toy_duality(steps=toy_steps, seed=seed)
    rows += [("toy_duality", "gap", toy["gap"], toy["w1"]), ("toy_duality", "lipschitz_mean", toy["lipschitz"]["mean"], 1.0)]
    log(f"toy duality gap {toy['gap']:.4f} vs W1 {toy['w1']:.4f}")

    with open(out / "theory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "quantity", "measured", "reference"])
        w.writerows([(a, b, repr(float(c)), repr(float(d))) for a, b, c, d in rows])
    summary = {f"{a}.{b}": {"measured": float(c), "reference": float(d)} for a, b, c, d in rows}
    (out / "theory.json").write_text(json.dumps(summary, indent=2, allow_nan=True))
    if figures:
        from .figures import critic_field, decay_curve

        decay_curve(ana.etas, ana.distances, ana.numeric, out / "decay_distance.png", "distance critic")
        decay_curve(trained.etas, trained.distances, trained.numeric, out / "decay_trained.png", "trained critic")
        critic_field(net, m, real, noisy, out / "circle_critic.png")
    return summary
