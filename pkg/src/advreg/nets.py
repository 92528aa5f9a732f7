"""Critic networks, optimizers and the weights file format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

DEFAULT_CONV = (
    (16, 3, 1),
    (16, 3, 2),
    (32, 3, 1),
    (32, 3, 2),
    (64, 3, 1),
    (64, 3, 2),
    (128, 3, 1),
    (128, 3, 2),
)

MAGIC = b"ADVR"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    """Malformed or incompatible weights file."""


@dataclass(frozen=True)
class Architecture:
    """Layer description of a critic.

    ``input_shape`` is ``(H, W, C)`` for image critics or ``(d,)`` for
    vector critics (which then consist of dense layers only).
    ``conv`` lists ``(out_channels, kernel, stride)`` per layer.
    ``head`` is ``"dense"`` (flatten + dense layers) or ``"pool"``
    (1x1 convolution to one channel + global average pooling).
    """

    input_shape: tuple = (32, 32, 1)
    conv: tuple = DEFAULT_CONV
    dense: tuple = (256,)
    slope: float = 0.1
    head: str = "dense"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in layer) for layer in self.conv))
        object.__setattr__(self, "dense", tuple(int(n) for n in self.dense))

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def downsampling(self) -> int:
        return int(np.prod([s for _, _, s in self.conv])) if self.conv else 1

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "Architecture":
        d = json.loads(text)
        return cls(**d)

    def validate(self):
        if self.head not in ("dense", "pool"):
            raise ValueError(f"unknown head {self.head!r}")
        if any(n <= 0 for n in self.input_shape):
            raise ValueError(f"invalid input shape {self.input_shape}")
        for i, (c, k, s) in enumerate(self.conv):
            if c <= 0:
                raise ValueError(f"conv layer {i} has {c} channels")
            if k <= 0 or k % 2 == 0:
                raise ValueError(f"conv layer {i}: kernel must be odd and positive, got {k}")
            if s not in (1, 2):
                raise ValueError(f"conv layer {i}: stride must be 1 or 2, got {s}")
        if any(n <= 0 for n in self.dense):
            raise ValueError("dense widths must be positive")
        if not self.is_image:
            if self.conv:
                raise ValueError("vector critics cannot have conv layers")
            if self.head != "dense":
                raise ValueError("vector critics need a dense head")
            return
        h, w, _ = self.input_shape
        f = self.downsampling
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by {f}")


def _feature_shape(arch: Architecture, h: int, w: int):
    c = arch.input_shape[2]
    for out, k, s in arch.conv:
        h = ad.conv2d_output_size(h, k, s, k // 2)
        w = ad.conv2d_output_size(w, k, s, k // 2)
        c = out
    return c, h, w


def init_params(arch: Architecture, seed: int) -> dict[str, np.ndarray]:
    """He-style fan-in initialization, biases zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if arch.is_image:
        c = arch.input_shape[2]
        for i, (out, k, _) in enumerate(arch.conv):
            fan_in = c * k * k
            params[f"conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, c, out))
            params[f"conv{i}.bias"] = np.zeros(out)
            c = out
        if arch.head == "pool":
            params["head.weight"] = rng.normal(0.0, np.sqrt(2.0 / c), size=(1, 1, c, 1))
            params["head.bias"] = np.zeros(1)
            return params
        fc, fh, fw = _feature_shape(arch, *arch.input_shape[:2])
        width = fc * fh * fw
    else:
        width = arch.input_shape[0]
    for j, n in enumerate(arch.dense + (1,)):
        params[f"dense{j}.weight"] = rng.normal(0.0, np.sqrt(2.0 / width), size=(width, n))
        params[f"dense{j}.bias"] = np.zeros(n)
        width = n
    return params


def _param_shapes(arch: Architecture) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(arch, 0).items()}


@dataclass
class CriticNetwork:
    """A scalar-valued network on images (or vectors)."""

    arch: Architecture
    params: dict[str, np.ndarray] = field(repr=False)

    # -- graph construction -------------------------------------------------

    def build(self, x: ad.Tensor, params: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
        """Record the forward pass on ``x`` (a batch); returns one value per sample."""
        g = x.graph
        if params is None:
            params = {k: g.constant(v) for k, v in self.params.items()}
        arch = self.arch
        n = x.shape[0]
        h = x
        if arch.is_image:
            for i, (_, k, s) in enumerate(arch.conv):
                h = ad.conv2d(h, params[f"conv{i}.weight"], stride=s, padding=k // 2)
                h = ad.leaky_relu(h + params[f"conv{i}.bias"], arch.slope)
            if arch.head == "pool":
                h = ad.conv2d(h, params["head.weight"]) + params["head.bias"]
                return ad.mean(ad.reshape(h, (n, -1)), axis=1)
            h = ad.reshape(h, (n, -1))
        depth = len(arch.dense)
        for j in range(depth + 1):
            h = h @ params[f"dense{j}.weight"] + params[f"dense{j}.bias"]
            if j < depth:
                h = ad.leaky_relu(h, arch.slope)
        return ad.reshape(h, (n,))

    def _as_batch(self, x):
        """Normalize input to a channels-last batch; return ``(batch, single)``."""
        x = np.asarray(x, dtype=np.float64)
        shape = self.arch.input_shape
        if not self.arch.is_image:
            if x.ndim == 1:
                batch, single = x[None, :], True
            elif x.ndim == 2:
                batch, single = x, False
            else:
                raise ad.ShapeError(f"expected vectors of length {shape[0]}, got array {x.shape}")
            if batch.shape[1] != shape[0]:
                raise ad.ShapeError(f"expected vectors of length {shape[0]}, got {batch.shape[1]}")
            return batch, single
        c = shape[2]
        if x.ndim == 2 and c == 1:
            batch, single = x[None, :, :, None], True
        elif x.ndim == 3 and c == 1 and x.shape[-1] != 1:
            batch, single = x[..., None], False
        elif x.ndim == 3:
            batch, single = x[None], True
        elif x.ndim == 4:
            batch, single = x, False
        else:
            raise ad.ShapeError(f"cannot interpret array of shape {x.shape} as images")
        if batch.shape[3] != c:
            raise ad.ShapeError(f"expected {c} channels, got {batch.shape[3]}")
        h, w = batch.shape[1:3]
        if self.arch.head == "dense":
            if (h, w) != tuple(shape[:2]):
                raise ad.ShapeError(f"critic expects {shape[0]}x{shape[1]} images, got {h}x{w}")
        elif h % self.arch.downsampling or w % self.arch.downsampling:
            raise ad.ShapeError(f"image size {h}x{w} not divisible by {self.arch.downsampling}")
        return batch, single

    # -- numpy front-end ----------------------------------------------------

    def __call__(self, x):
        batch, single = self._as_batch(x)
        g = ad.Graph()
        out = self.build(g.constant(batch)).value
        g.release()
        return float(out[0]) if single else out.copy()

    def value_and_grad(self, x):
        """Critic values and input gradients, shaped like ``x``."""
        x = np.asarray(x, dtype=np.float64)
        batch, single = self._as_batch(x)
        g = ad.Graph()
        xt = g.leaf(batch, "x")
        out = self.build(xt)
        gx = g.grad(ad.reduce_sum(out), [xt])["x"].reshape(x.shape)
        vals = out.value
        g.release()
        return (float(vals[0]) if single else vals.copy()), gx

    def grad_x(self, x):
        return self.value_and_grad(x)[1]

    # aliases used by the analysis helpers
    def value(self, x):
        return self(x)

    def gradient(self, x):
        return self.grad_x(x)

    def copy(self) -> "CriticNetwork":
        return CriticNetwork(self.arch, {k: v.copy() for k, v in self.params.items()})


def build_critic(arch: Architecture | None = None, seed: int = 0) -> CriticNetwork:
    arch = arch or Architecture()
    arch.validate()
    return CriticNetwork(arch, init_params(arch, seed))


def critic_forward(net: CriticNetwork, x) -> float:
    return net(x)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_keys(params, grads):
    missing = set(params) - set(grads)
    extra = set(grads) - set(params)
    if missing or extra:
        raise KeyError(f"gradient keys differ from parameters: missing={sorted(missing)} extra={sorted(extra)}")


class Adam:
    """Adam with bias-corrected moments."""

    kind = "adam"

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        _check_keys(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RMSProp:
    kind = "rmsprop"

    def __init__(self, lr=1e-4, rho=0.9, eps=1e-8):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        _check_keys(params, grads)
        self.t += 1
        for k in params:
            g = grads[k]
            if k not in self.v:
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            params[k] -= self.lr * g / (np.sqrt(v) + self.eps)


def make_optimizer(kind: str = "adam", **hyper):
    if kind == "adam":
        return Adam(**hyper)
    if kind == "rmsprop":
        return RMSProp(**hyper)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state, params, grads):
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# weights file
#
#   "ADVR" | u16 version | u32 len | descriptor (utf-8) | u32 count |
#   count x ( u16 len | name | u8 ndim | ndim x u32 | float64 LE data )
# ---------------------------------------------------------------------------


def save_weights(net: CriticNetwork, path) -> None:
    desc = net.arch.to_text().encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(desc)), desc]
    names = sorted(net.params)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsFormatError("truncated weights file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> CriticNetwork:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    (dlen,) = r.unpack("<I")
    arch = Architecture.from_text(r.take(dlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise WeightsFormatError("trailing bytes after last parameter record")
    expected = _param_shapes(arch)
    if set(expected) != set(params):
        raise WeightsFormatError(f"parameter names do not match architecture: {sorted(set(expected) ^ set(params))}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise WeightsFormatError(f"parameter {k!r} has shape {params[k].shape}, architecture needs {shape}")
    return CriticNetwork(arch, params)
