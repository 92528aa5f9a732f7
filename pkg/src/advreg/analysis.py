"""Numerical checks of the critic theory.

Exact Wasserstein-1 between equal-size point clouds, toy data manifolds
with closed-form distance and projection, and probes for the decay rate
of the Wasserstein distance under the critic's gradient flow, the
distance-function characterization, and coercivity of the objective.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


# ---------------------------------------------------------------------------
# Wasserstein-1
# ---------------------------------------------------------------------------


@dataclass
class EmpiricalDistribution:
    """Uniformly weighted points of a common dimension."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("need a nonempty (n, d) point array")
        self.points = pts.reshape(len(pts), -1)

    def __len__(self):
        return len(self.points)

    @property
    def weights(self):
        return np.full(len(self), 1.0 / len(self))

    def resample(self, n: int, seed: int) -> "EmpiricalDistribution":
        rng = np.random.default_rng(seed)
        return EmpiricalDistribution(self.points[rng.integers(len(self), size=n)])


def _as_points(p):
    if isinstance(p, EmpiricalDistribution):
        return p.points
    return EmpiricalDistribution(p).points


def wasserstein1_exact(p, q, seed: int = 0) -> float:
    """Optimal assignment cost / n under the Euclidean ground metric.

    Unequal sizes are handled by resampling the smaller cloud to the size
    of the larger one (uniformly, with ``seed``).
    """
    a = _as_points(p)
    b = _as_points(q)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) != len(b):
        rng = np.random.default_rng(seed)
        if len(a) < len(b):
            a = a[rng.integers(len(a), size=len(b))]
        else:
            b = b[rng.integers(len(b), size=len(a))]
    cost = cdist(a, b)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / len(a))


def wasserstein1_bruteforce(p, q) -> float:
    """Minimum over all permutations; only for tiny n."""
    a = _as_points(p)
    b = _as_points(q)
    if len(a) != len(b):
        raise ValueError("brute force needs equal sizes")
    cost = cdist(a, b)
    n = len(a)
    best = min(cost[range(n), perm].sum() for perm in itertools.permutations(range(n)))
    return float(best / n)


# ---------------------------------------------------------------------------
# manifolds
# ---------------------------------------------------------------------------


class Circle:
    """Circle of ``radius`` around ``center`` in the plane."""

    kind = "circle"

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def distance(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.abs(np.linalg.norm(x - self.center, axis=-1) - self.radius)

    def _unit(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(r == 0):
            raise ValueError("projection undefined at the circle centre")
        return d / r, r

    def project(self, x):
        u, _ = self._unit(x)
        return self.center + self.radius * u

    def distance_grad(self, x):
        u, r = self._unit(x)
        return np.sign(r - self.radius) * u

    def sample(self, n: int, rng: np.random.Generator):
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return self.center + self.radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)

    def perturb(self, n: int, sigma: float, rng: np.random.Generator):
        """Radial Gaussian noise; projecting back recovers the uniform law on the circle."""
        base = self.sample(n, rng)
        u = (base - self.center) / self.radius
        t = np.empty(n)
        todo = np.arange(n)
        # reject offsets that reach the centre (projection undefined / flips side)
        while todo.size:
            z = sigma * rng.standard_normal(todo.size)
            ok = self.radius + z > 1e-6
            t[todo[ok]] = z[ok]
            todo = todo[~ok]
        return base + t[:, None] * u


class Segment:
    """Segment from ``a`` to ``b`` in the plane."""

    kind = "segment"

    def __init__(self, a=(-1.0, 0.0), b=(1.0, 0.0)):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        d = self.b - self.a
        self.length = float(np.linalg.norm(d))
        self.tangent = d / self.length
        self.normal = np.array([-self.tangent[1], self.tangent[0]])

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        t = np.clip((x - self.a) @ self.tangent, 0.0, self.length)
        return self.a + t[..., None] * self.tangent

    def distance(self, x):
        return np.linalg.norm(np.asarray(x, dtype=np.float64) - self.project(x), axis=-1)

    def distance_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = x - self.project(x)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)

    def sample(self, n: int, rng: np.random.Generator):
        t = rng.uniform(0.0, self.length, size=n)
        return self.a + t[:, None] * self.tangent

    def perturb(self, n: int, sigma: float, rng: np.random.Generator):
        """Offsets along the normal; the projection of each point is its base point."""
        base = self.sample(n, rng)
        return base + (sigma * rng.standard_normal(n))[:, None] * self.normal


class EllipseFamily:
    """One-parameter family of images: a centred disk whose radius is the parameter.

    The family is a curve in image space; distance and projection are
    computed numerically over a fine parameter grid.
    """

    kind = "ellipse-family"

    def __init__(self, size: int = 16, radii=(0.2, 0.8), grid: int = 2001):
        self.size = size
        c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
        xx, yy = np.meshgrid(c, -c)
        self._r = np.sqrt(xx**2 + yy**2)
        self.params = np.linspace(radii[0], radii[1], grid)
        self.table = np.stack([self.image(p) for p in self.params]).reshape(grid, -1)

    def image(self, radius: float) -> np.ndarray:
        # soft edge keeps the curve continuous in the parameter
        return np.clip(0.5 + (radius - self._r) * self.size / 2.0, 0.0, 1.0)

    def _nearest(self, x):
        flat = np.asarray(x, dtype=np.float64).reshape(-1, self.size * self.size)
        d = cdist(flat, self.table)
        idx = d.argmin(axis=1)
        return idx, d[np.arange(len(flat)), idx]

    def distance(self, x):
        x = np.asarray(x, dtype=np.float64)
        _, d = self._nearest(x)
        return d if x.ndim == 3 else d[0]

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        idx, _ = self._nearest(x)
        out = self.table[idx].reshape(-1, self.size, self.size)
        return out if x.ndim == 3 else out[0]

    def sample(self, n: int, rng: np.random.Generator):
        p = rng.uniform(self.params[0], self.params[-1], size=n)
        return np.stack([self.image(r) for r in p])


# ---------------------------------------------------------------------------
# critics defined by formulas
# ---------------------------------------------------------------------------


class FieldCritic:
    """A critic given by a value function and a gradient field on point arrays."""

    def __init__(self, value_fn, grad_fn):
        self._value = value_fn
        self._grad = grad_fn

    def value(self, x):
        return self._value(np.asarray(x, dtype=np.float64))

    def gradient(self, x):
        return self._grad(np.asarray(x, dtype=np.float64))

    def value_and_grad(self, x):
        return self.value(x), self.gradient(x)


def distance_critic(manifold, offset: float = 0.0) -> FieldCritic:
    return FieldCritic(lambda x: manifold.distance(x) + offset, manifold.distance_grad)


def constant_critic(c: float = 0.0) -> FieldCritic:
    return FieldCritic(lambda x: np.full(np.shape(x)[:-1], c), lambda x: np.zeros_like(x))


def rotated_critic(manifold) -> FieldCritic:
    """Unit-gradient competitor whose flow is ``grad d`` turned by 90 degrees.

    Only the field matters for the flow; the value is the angle about the
    origin scaled to carry that gradient on the unit circle.
    """

    def grad(x):
        g = manifold.distance_grad(x)
        return np.stack([-g[..., 1], g[..., 0]], axis=-1)

    def value(x):
        return np.arctan2(x[..., 1], x[..., 0])

    return FieldCritic(value, grad)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def _critic_grad(critic, x):
    if hasattr(critic, "gradient"):
        return np.asarray(critic.gradient(x), dtype=np.float64)
    return np.asarray(critic.value_and_grad(x)[1], dtype=np.float64)


def _critic_value(critic, x):
    if hasattr(critic, "value"):
        return np.asarray(critic.value(x), dtype=np.float64)
    return np.asarray(critic.value_and_grad(x)[0], dtype=np.float64)


@dataclass
class DecaySlope:
    numeric: float
    predicted: float
    etas: np.ndarray
    distances: np.ndarray


def decay_slope(critic, real, noisy, etas=(0.01, 0.02, 0.04), scale: float = 1.0) -> DecaySlope:
    """Slope at 0 of ``eta -> W1(real, (x - eta grad psi(x))_# noisy)``.

    The numeric slope is the least-squares line through W1 evaluated on
    the symmetric grid ``{0, +-eta * scale}``; the prediction is
    ``-E ||grad psi||^2`` over the noisy samples.
    """
    etas = np.asarray(sorted(abs(float(e)) for e in etas)) * scale
    if etas.size == 0 or np.any(etas == 0) or len(set(etas)) != len(etas):
        raise ValueError("degenerate eta grid")
    real = np.asarray(real, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    g = _critic_grad(critic, noisy)
    flat_r = real.reshape(len(real), -1)
    grid = np.concatenate([-etas[::-1], [0.0], etas])
    w = np.array([wasserstein1_exact(flat_r, (noisy - e * g).reshape(len(noisy), -1)) for e in grid])
    slope = float(np.polyfit(grid, w, 1)[0])
    predicted = -float(np.mean((g.reshape(len(g), -1) ** 2).sum(axis=1)))
    return DecaySlope(slope, predicted, grid, w)


@dataclass
class DistanceReport:
    correlation: float
    mean_cosine: float
    n_samples: int


def segment_samples(manifold, noisy, per_segment: int = 4, seed: int = 0):
    """Points on the segments joining each noisy sample to its projection."""
    noisy = np.asarray(noisy, dtype=np.float64)
    proj = manifold.project(noisy)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, size=(len(noisy), per_segment))
    shape = (len(noisy), per_segment) + (1,) * (noisy.ndim - 1)
    pts = proj[:, None] + t.reshape(shape) * (noisy - proj)[:, None]
    return pts.reshape((-1,) + noisy.shape[1:])


def critic_vs_distance(critic, manifold, points) -> DistanceReport:
    """Centred-value Pearson correlation and mean gradient cosine against ``d_M``."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 10:
        raise ValueError("need at least 10 sample points")
    v = _critic_value(critic, points).ravel()
    d = np.asarray(manifold.distance(points), dtype=np.float64).ravel()
    v = v - v.mean()
    d = d - d.mean()
    denom = np.linalg.norm(v) * np.linalg.norm(d)
    corr = float(v @ d / denom) if denom > 0 else 0.0
    gc = _critic_grad(critic, points).reshape(len(points), -1)
    gd = np.asarray(manifold.distance_grad(points), dtype=np.float64).reshape(len(points), -1)
    nc = np.linalg.norm(gc, axis=1)
    nd = np.linalg.norm(gd, axis=1)
    ok = (nc > 0) & (nd > 0)
    cos = (gc[ok] * gd[ok]).sum(axis=1) / (nc[ok] * nd[ok])
    return DistanceReport(corr, float(cos.mean()) if cos.size else 0.0, len(points))


@dataclass
class CoercivityReport:
    thresholds: np.ndarray
    finite: np.ndarray
    ts: np.ndarray
    values: np.ndarray

    @property
    def all_finite(self) -> bool:
        return bool(np.all(self.finite))


def coercivity_probe(psi, op, y, directions, ts, lam: float, tail: int = 3) -> CoercivityReport:
    """Evaluate ``F(t) = ||A(t d) - y||^2 + lam psi(t d)`` along rays.

    For each direction the threshold is the smallest grid value after
    which ``F`` increases strictly at every subsequent grid point; it is
    reported finite when at least the last ``tail`` grid steps increase.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 1 or ts.size < 2 or np.any(np.diff(ts) <= 0):
        raise ValueError("t grid must be strictly increasing")
    y = np.asarray(y, dtype=np.float64)
    values = np.empty((len(directions), ts.size))
    for i, d in enumerate(directions):
        d = np.asarray(d, dtype=np.float64)
        d = d / np.linalg.norm(d)
        for j, t in enumerate(ts):
            x = t * d
            r = op.apply(x) - y
            reg = 0.0 if lam == 0 else float(_critic_value(psi, x))
            values[i, j] = float(np.sum(r * r)) + lam * reg
    thresholds = np.empty(len(directions))
    finite = np.empty(len(directions), dtype=bool)
    for i in range(len(directions)):
        inc = np.diff(values[i]) > 0
        bad = np.flatnonzero(~inc)
        start = 0 if bad.size == 0 else bad[-1] + 1
        thresholds[i] = ts[start]
        finite[i] = (ts.size - 1 - start) >= min(tail, ts.size - 1)
    return CoercivityReport(thresholds, finite, ts, values)
