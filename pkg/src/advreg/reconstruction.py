"""Variational reconstruction with a learned regularizer.

Solves ``min_x ||Ax - y||^2 + lam * psi(x)`` by gradient descent started
at the pseudo-inverse.  ``psi`` is anything exposing
``value_and_grad(x) -> (value, gradient)``; a :class:`~advreg.nets.CriticNetwork`
qualifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import NoiseModel, OperatorSpec


class NonFiniteIterate(FloatingPointError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolveConfig:
    lam: float = 1.0
    step: float = 0.1
    iterations: int = 200
    tol: float | None = None
    backtrack: bool = True
    max_halvings: int = 30

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step size must be positive")
        if self.iterations < 1 and not (self.tol and self.tol > 0):
            raise ValueError("need iterations >= 1 or a positive tolerance")


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)
    data_term: list = field(default_factory=list)
    regularizer: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)

    def append(self, obj, data, reg, gnorm, step):
        self.objective.append(obj)
        self.data_term.append(data)
        self.regularizer.append(reg)
        self.grad_norm.append(gnorm)
        self.step.append(step)

    def __len__(self):
        return len(self.objective)

    def rows(self):
        for i in range(len(self)):
            yield i, self.objective[i], self.data_term[i], self.regularizer[i], self.grad_norm[i], self.step[i]


class ZeroRegularizer:
    def value_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.0, np.zeros_like(x)


class NormRegularizer:
    """``psi(x) = ||x||`` -- an analytic stand-in with unit-norm gradients."""

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        n = float(np.linalg.norm(x))
        return n, (x / n if n > 0 else np.zeros_like(x))


class LinearRegularizer:
    """``psi(x) = <w, x>``."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def value_and_grad(self, x):
        return float(np.sum(self.w * x)), self.w.copy()


def estimate_lambda(op: OperatorSpec, noise: NoiseModel, n_samples: int = 32, seed: int | None = None) -> float:
    """``2 E ||A* e||`` by Monte Carlo over ``n_samples`` noise draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(noise.seed if seed is None else seed)
    norms = [np.linalg.norm(op.adjoint(noise.sigma * rng.standard_normal(op.data_shape))) for _ in range(n_samples)]
    return 2.0 * float(np.mean(norms))


def objective(psi, op: OperatorSpec, y, lam: float, x):
    """Objective value, its parts, and gradient ``2A*(Ax - y) + lam grad psi(x)``."""
    r = op.apply(x) - y
    data = float(np.sum(r * r))
    if lam == 0.0:
        reg, rgrad = 0.0, None
    else:
        reg, rgrad = psi.value_and_grad(x)
    g = 2.0 * op.adjoint(r)
    if rgrad is not None:
        g = g + lam * rgrad
    return data + lam * reg, data, float(reg), g


def reconstruct(psi, op: OperatorSpec, y, config: SolveConfig | None = None, delta: float = 1.0, x0=None):
    """Gradient descent from ``A^+_delta y``; returns ``(x, trace)``.

    With ``backtrack`` the step is halved whenever a step would raise the
    objective (the step then stays at the reduced value).
    """
    cfg = config or SolveConfig()
    y = np.asarray(y, dtype=np.float64)
    x = op.pseudo_inverse(y, delta) if x0 is None else np.array(x0, dtype=np.float64)
    step = cfg.step
    trace = SolveTrace()
    f, data, reg, g = objective(psi, op, y, cfg.lam, x)
    max_iter = cfg.iterations if cfg.iterations >= 1 else 10**6
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        trace.append(f, data, reg, gnorm, step)
        if cfg.tol is not None and gnorm < cfg.tol:
            break
        for _ in range(cfg.max_halvings + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = x - step * g
            if not np.all(np.isfinite(x_new)):
                raise NonFiniteIterate(f"non-finite iterate after {len(trace)} iterations", trace)
            f_new, data_new, reg_new, g_new = objective(psi, op, y, cfg.lam, x_new)
            if not cfg.backtrack or f_new <= f:
                break
            step *= 0.5
        else:
            # no decrease even with a tiny step: we are at a critical point up to rounding
            break
        x, f, data, reg, g = x_new, f_new, data_new, reg_new, g_new
    return x, trace


def flow_step(psi, x, eta: float):
    """One gradient-descent step of size ``eta`` on the regularizer alone."""
    _, g = psi.value_and_grad(x)
    return np.asarray(x, dtype=np.float64) - eta * g
