"""Critic training with the one-sided gradient penalty."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nets import Architecture, CriticNetwork, build_critic, make_optimizer
from .operators import OperatorSpec


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters of a training run.

    ``mu`` weights the gradient penalty; ``batch_size`` is the number of
    (real, noisy, interpolate) triplets per optimizer step.
    """

    mu: float = 10.0
    batch_size: int = 16
    steps: int = 1000
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    rho: float = 0.9
    seed: int = 0
    delta: float = 1.0
    architecture: dict = field(default_factory=lambda: asdict(Architecture()))

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def arch(self) -> Architecture:
        a = self.architecture
        return a if isinstance(a, Architecture) else Architecture(**a)

    def make_optimizer(self):
        if self.optimizer == "adam":
            return make_optimizer("adam", lr=self.lr, beta1=self.beta1, beta2=self.beta2)
        return make_optimizer(self.optimizer, lr=self.lr, rho=self.rho)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.architecture, Architecture):
            d["architecture"] = asdict(self.architecture)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLog:
    """One record per optimizer step.

    ``gap`` is the batch estimate of E[psi(x_r)] - E[psi(x_n)]; its
    negative estimates the Wasserstein distance.
    """

    step: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    mean_grad_norm: list = field(default_factory=list)

    def __len__(self):
        return len(self.step)

    def append(self, step, gap, penalty, gnorm):
        self.step.append(step)
        self.gap.append(gap)
        self.penalty.append(penalty)
        self.mean_grad_norm.append(gnorm)

    @property
    def loss(self) -> np.ndarray:
        return np.asarray(self.gap) + np.asarray(self.penalty)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "gap", "penalty", "mean_grad_norm"])
            for row in zip(self.step, self.gap, self.penalty, self.mean_grad_norm):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.append(int(row["step"]), float(row["gap"]), float(row["penalty"]), float(row["mean_grad_norm"]))
        return log


def pseudo_inverse_samples(op: OperatorSpec, measurements, delta: float) -> np.ndarray:
    """Push measurements through ``A^+_delta``: samples of the noisy distribution."""
    return np.stack([op.pseudo_inverse(y, delta) for y in measurements])


def sample_triplet(real, measurements, op: OperatorSpec, delta: float, rng: np.random.Generator, eps: float | None = None):
    """Draw ``(x_r, x_n, x_i, eps)`` with ``x_n = A^+_delta y`` and ``x_i = eps x_r + (1 - eps) x_n``."""
    if len(real) == 0 or len(measurements) == 0:
        raise ValueError("empty dataset")
    xr = np.asarray(real[rng.integers(len(real))], dtype=np.float64)
    xn = op.pseudo_inverse(measurements[rng.integers(len(measurements))], delta)
    if eps is None:
        eps = float(rng.uniform())
    return xr, xn, eps * xr + (1.0 - eps) * xn, eps


def critic_loss(psi, xr, xn, xi, mu: float) -> float:
    """Batch value of the critic loss for any ``psi`` with ``value_and_grad``."""
    xr, xn, xi = (np.asarray(a, dtype=np.float64) for a in (xr, xn, xi))
    if not (len(xr) == len(xn) == len(xi)) or len(xr) == 0:
        raise ValueError("batches must have the same nonzero size")
    m = len(xr)
    vr = np.array([psi.value_and_grad(x)[0] for x in xr])
    vn = np.array([psi.value_and_grad(x)[0] for x in xn])
    norms = np.array([np.linalg.norm(psi.value_and_grad(x)[1]) for x in xi])
    return float(vr.sum() / m - vn.sum() / m + mu * np.mean(np.maximum(norms - 1.0, 0.0) ** 2))


def loss_and_grads(net: CriticNetwork, xr, xn, xi, mu: float):
    """Critic loss terms and their parameter gradient for batches already in network layout."""
    m = xr.shape[0]
    g = ad.Graph()
    params = {k: g.leaf(v, k) for k, v in net.params.items()}
    out = net.build(g.constant(np.concatenate([xr, xn])), params)
    weights = np.concatenate([np.full(m, 1.0 / m), np.full(m, -1.0 / m)])
    gap_node = ad.reduce_sum(out * weights)
    grads = g.grad(gap_node, list(params))
    gap = float(gap_node.value)
    g.release()
    penalty, pgrads, norms = ad.grad_of_grad_penalty(net.build, xi, net.params, mu)
    for k in grads:
        grads[k] = grads[k] + pgrads[k]
    return gap, penalty, norms, grads


def train(
    config: TrainConfig,
    real,
    measurements,
    op: OperatorSpec,
    net: CriticNetwork | None = None,
    noisy=None,
    callback=None,
):
    """Run ``config.steps`` optimizer steps; returns ``(net, log)``.

    ``noisy`` may hold precomputed pseudo-inverses of ``measurements``.
    """
    real = np.asarray(real, dtype=np.float64)
    if len(real) == 0 or len(measurements) == 0:
        raise ValueError("empty dataset")
    if noisy is None:
        noisy = pseudo_inverse_samples(op, measurements, config.delta)
    noisy = np.asarray(noisy, dtype=np.float64)
    if net is None:
        net = build_critic(config.arch, config.seed)
    if real.shape[1:] != noisy.shape[1:]:
        raise ValueError(f"real samples {real.shape[1:]} and pseudo-inverses {noisy.shape[1:]} differ in shape")
    xr_all, _ = net._as_batch(real)
    xn_all, _ = net._as_batch(noisy)
    rng = np.random.default_rng(config.seed + 1)
    opt = config.make_optimizer()
    log = TrainLog()
    m = config.batch_size
    for step in range(config.steps):
        ir = rng.integers(len(xr_all), size=m)
        inn = rng.integers(len(xn_all), size=m)
        eps = rng.uniform(size=m).reshape((m,) + (1,) * (xr_all.ndim - 1))
        xr = xr_all[ir]
        xn = xn_all[inn]
        xi = eps * xr + (1.0 - eps) * xn
        try:
            gap, penalty, norms, grads = loss_and_grads(net, xr, xn, xi, config.mu)
        except FloatingPointError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not np.isfinite(gap):
            raise TrainingError(f"step {step}: non-finite critic gap {gap}")
        if not np.isfinite(penalty):
            raise TrainingError(f"step {step}: non-finite gradient penalty {penalty}")
        bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
        if bad:
            raise TrainingError(f"step {step}: non-finite gradient in {bad[0]}")
        opt.step(net.params, grads)
        log.append(step, gap, penalty, float(np.mean(norms)))
        if callback is not None:
            callback(step, net, log)
    return net, log


def lipschitz_report(psi, real, noisy, count: int = 256, seed: int = 0) -> dict:
    """Min/mean/max of input-gradient norms at fresh random interpolates."""
    if count < 1:
        raise ValueError("count must be >= 1")
    real = np.asarray(real, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    rng = np.random.default_rng(seed)
    ir = rng.integers(len(real), size=count)
    inn = rng.integers(len(noisy), size=count)
    eps = rng.uniform(size=count).reshape((count,) + (1,) * (real.ndim - 1))
    xi = eps * real[ir] + (1.0 - eps) * noisy[inn]
    norms = grad_norms(psi, xi)
    return {"min": float(norms.min()), "mean": float(norms.mean()), "max": float(norms.max()), "count": count}


def grad_norms(psi, xs) -> np.ndarray:
    """Per-sample input-gradient norms."""
    xs = np.asarray(xs, dtype=np.float64)
    if isinstance(psi, CriticNetwork):
        out = []
        for start in range(0, len(xs), 64):
            chunk = xs[start : start + 64]
            _, g = psi.value_and_grad(chunk)
            out.append(np.sqrt((g.reshape(len(chunk), -1) ** 2).sum(axis=1)))
        return np.concatenate(out)
    return np.array([np.linalg.norm(psi.value_and_grad(x)[1]) for x in xs])


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
