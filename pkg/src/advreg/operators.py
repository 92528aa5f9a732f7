"""Forward operators, their adjoints and regularized pseudo-inverses.

The ray transform is a parallel-beam geometry discretized once into a
sparse matrix: each ray is sampled every half pixel and every sample
spreads bilinear weights onto the four surrounding pixel centres.  The
adjoint is the literal transpose of that matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "GeometryError",
    "OperatorSpec",
    "IdentityOperator",
    "RayTransform",
    "NoiseModel",
    "make_operator",
    "apply",
    "adjoint",
    "pseudo_inverse",
    "add_noise",
    "operator_norm_sq",
]


class GeometryError(ValueError):
    """Array does not match the operator geometry."""


class OperatorSpec:
    """Common interface: ``apply``, ``adjoint`` and ``pseudo_inverse``."""

    kind: str
    image_shape: tuple[int, int]
    data_shape: tuple[int, ...]

    def _check(self, arr, shape, what):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != tuple(shape):
            raise GeometryError(f"{self.kind}: {what} must have shape {tuple(shape)}, got {arr.shape}")
        return arr

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, m):
        raise NotImplementedError

    def pseudo_inverse(self, m, delta: float = 1.0):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class IdentityOperator(OperatorSpec):
    kind = "identity"

    def __init__(self, image_shape):
        self.image_shape = tuple(int(n) for n in image_shape)
        self.data_shape = self.image_shape

    def apply(self, x):
        return self._check(x, self.image_shape, "image").copy()

    def adjoint(self, m):
        return self._check(m, self.data_shape, "measurement").copy()

    def pseudo_inverse(self, m, delta: float = 1.0):
        _check_delta(delta)
        return self._check(m, self.data_shape, "measurement").copy()

    def to_dict(self):
        return {"kind": self.kind, "image_shape": list(self.image_shape)}


def _check_delta(delta):
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"smoothing parameter must lie in (0, 1], got {delta}")


def _ray_matrix(h: int, w: int, angles: np.ndarray, n_det: int, step: float) -> sp.csr_matrix:
    """Sparse line-integral matrix of shape (n_angles * n_det, h * w)."""
    # pixel (i, j) centre sits at (j - (w-1)/2, (h-1)/2 - i)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    s = (np.arange(n_det) - (n_det - 1) / 2.0)
    half = 0.5 * math.hypot(h, w) + 1.0
    t = np.arange(-half, half + step / 2, step)
    rows, cols, vals = [], [], []
    det_idx = np.arange(n_det)
    for a, theta in enumerate(angles):
        c, sn = math.cos(theta), math.sin(theta)
        # sample points, shape (n_det, n_t)
        px = s[:, None] * c - t[None, :] * sn
        py = s[:, None] * sn + t[None, :] * c
        col = px + cx
        row = cy - py
        j0 = np.floor(col).astype(np.int64)
        i0 = np.floor(row).astype(np.int64)
        fj = col - j0
        fi = row - i0
        ray = np.broadcast_to((a * n_det + det_idx)[:, None], px.shape)
        for di, dj, wgt in (
            (0, 0, (1 - fi) * (1 - fj)),
            (0, 1, (1 - fi) * fj),
            (1, 0, fi * (1 - fj)),
            (1, 1, fi * fj),
        ):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w) & (wgt > 0)
            rows.append(ray[ok])
            cols.append((ii * w + jj)[ok])
            vals.append(step * wgt[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * n_det, h * w),
    )
    return mat.tocsr()


class RayTransform(OperatorSpec):
    """Parallel-beam ray transform with ``n_angles`` uniform angles in [0, pi)."""

    kind = "radon"

    def __init__(self, image_shape, n_angles: int = 30, step: float = 0.5):
        h, w = (int(n) for n in image_shape)
        if n_angles < 1:
            raise ValueError("need at least one angle")
        self.image_shape = (h, w)
        self.n_angles = int(n_angles)
        self.step = float(step)
        self.n_detectors = int(math.ceil(math.sqrt(2.0) * max(h, w)))
        self.angles = np.arange(self.n_angles) * (np.pi / self.n_angles)
        self.data_shape = (self.n_angles, self.n_detectors)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return _ray_matrix(*self.image_shape, self.angles, self.n_detectors, self.step)

    @cached_property
    def _matrix_t(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def apply(self, x):
        x = self._check(x, self.image_shape, "image")
        return (self.matrix @ x.ravel()).reshape(self.data_shape)

    def adjoint(self, m):
        m = self._check(m, self.data_shape, "sinogram")
        return (self._matrix_t @ m.ravel()).reshape(self.image_shape)

    def ramp_filter(self, delta: float = 1.0) -> np.ndarray:
        """Frequency response of the apodized ramp on the padded detector grid."""
        _check_delta(delta)
        n = max(64, 1 << int(math.ceil(math.log2(2 * self.n_detectors))))
        # Ram-Lak built from its spatial kernel so the DC term is right
        k = np.arange(n)
        k = np.where(k > n // 2, k - n, k)
        kernel = np.zeros(n)
        kernel[0] = 0.25
        odd = k % 2 == 1
        kernel[odd] = -1.0 / (np.pi * k[odd]) ** 2
        ramp = 2.0 * np.real(np.fft.fft(kernel))
        # raised cosine reaching zero at delta * Nyquist
        f = np.abs(np.fft.fftfreq(n))
        cutoff = 0.5 * delta
        window = np.where(f <= cutoff, 0.5 * (1.0 + np.cos(np.pi * f / cutoff)), 0.0)
        return ramp * window

    def filter_sinogram(self, m, delta: float = 1.0) -> np.ndarray:
        m = self._check(m, self.data_shape, "sinogram")
        filt = self.ramp_filter(delta)
        n = filt.size
        spec = np.fft.fft(m, n=n, axis=1) * filt[None, :]
        return np.real(np.fft.ifft(spec, axis=1))[:, : self.n_detectors]

    def pseudo_inverse(self, m, delta: float = 1.0):
        """Filtered backprojection through the exact adjoint."""
        filtered = self.filter_sinogram(m, delta)
        return self.adjoint(filtered) * (np.pi / (2.0 * self.n_angles))

    def to_dict(self):
        return {
            "kind": self.kind,
            "image_shape": list(self.image_shape),
            "n_angles": self.n_angles,
            "step": self.step,
        }


def make_operator(kind: str, image_shape, n_angles: int = 30) -> OperatorSpec:
    if kind == "identity":
        return IdentityOperator(image_shape)
    if kind == "radon":
        return RayTransform(image_shape, n_angles)
    raise ValueError(f"unknown operator kind {kind!r}")


def apply(op: OperatorSpec, x):
    return op.apply(x)


def adjoint(op: OperatorSpec, m):
    return op.adjoint(m)


def pseudo_inverse(op: OperatorSpec, m, delta: float = 1.0):
    return op.pseudo_inverse(m, delta)


def operator_norm_sq(op: OperatorSpec, iterations: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ||A||^2 = largest eigenvalue of A*A."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.image_shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        z = op.adjoint(op.apply(x))
        lam = float(np.linalg.norm(z))
        if lam == 0.0:
            return 0.0
        x = z / lam
    return lam


@dataclass
class NoiseModel:
    """White Gaussian noise with standard deviation ``sigma``."""

    sigma: float
    seed: int = 0
    kind: str = "gaussian"
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self._rng = np.random.default_rng(self.seed)

    def sample(self, shape, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self._rng if rng is None else rng
        return self.sigma * rng.standard_normal(shape)


def add_noise(m, noise: NoiseModel, rng: np.random.Generator | None = None) -> np.ndarray:
    """``m`` plus one draw of the noise; a fresh generator from ``noise.seed`` unless ``rng`` is given."""
    m = np.asarray(m, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    return m + noise.sigma * rng.standard_normal(m.shape)
