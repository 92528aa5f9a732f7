"""Synthetic ellipse images."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

# (intensity, semi-axis a, semi-axis b, centre x, centre y, rotation in degrees),
# modified Shepp-Logan contrast on the unit square [-1, 1]^2
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _grid(size: int):
    c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    x, y = np.meshgrid(c, -c)
    return x, y


def draw_ellipses(size: int, ellipses) -> np.ndarray:
    """Sum of constant-intensity ellipses on a ``size`` x ``size`` grid over [-1, 1]^2."""
    x, y = _grid(size)
    img = np.zeros((size, size))
    for val, a, b, x0, y0, phi in ellipses:
        t = np.deg2rad(phi)
        ct, st = np.cos(t), np.sin(t)
        u = (x - x0) * ct + (y - y0) * st
        v = -(x - x0) * st + (y - y0) * ct
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
    return img


def shepp_logan(size: int = 64) -> np.ndarray:
    return np.clip(draw_ellipses(size, _SHEPP_LOGAN), 0.0, 1.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Random ellipse phantoms; every ellipse is regenerable from ``seed``."""

    size: int = 32
    min_ellipses: int = 3
    max_ellipses: int = 8
    intensity: tuple = (-0.4, 0.8)
    axes: tuple = (0.1, 0.6)
    centre: float = 0.5
    background: bool = True
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def phantom_parameters(spec: PhantomSpec, n: int) -> list[list[tuple]]:
    """The ellipse draws behind :func:`generate_phantoms`."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(n):
        count = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
        ells = []
        if spec.background and count > 0:
            # a large low-contrast body the other ellipses sit in
            a, b = rng.uniform(0.7, 0.9, size=2)
            ells.append((float(rng.uniform(0.2, 0.4)), float(a), float(b), 0.0, 0.0, float(rng.uniform(0, 180))))
            count -= 1
        for _ in range(count):
            val = rng.uniform(*spec.intensity)
            a, b = rng.uniform(*spec.axes, size=2)
            x0, y0 = rng.uniform(-spec.centre, spec.centre, size=2)
            phi = rng.uniform(0.0, 180.0)
            ells.append((float(val), float(a), float(b), float(x0), float(y0), float(phi)))
        out.append(ells)
    return out


def generate_phantoms(spec: PhantomSpec, n: int) -> np.ndarray:
    """``n`` phantoms of shape (size, size), clipped to [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params = phantom_parameters(spec, n)
    return np.stack([np.clip(draw_ellipses(spec.size, e), 0.0, 1.0) for e in params])
