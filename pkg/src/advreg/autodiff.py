"""Reverse-mode differentiation on a recorded tape.

Every operation applied to a :class:`Tensor` is appended to the owning
:class:`Graph` together with whatever it needs for the backward sweep.
Besides plain gradients the tape supports forward-mode tangents, which
can be pushed through both the forward and the backward sweep
(forward-over-reverse).  That is all the gradient penalty needs: the
parameter gradient of ``(||grad_x psi|| - 1)_+^2`` equals the directional
derivative of ``grad_theta psi`` along the penalty's gradient in ``x``.

All arithmetic is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "ShapeError",
    "NonScalarError",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "conv2d_output_size",
    "leaky_relu",
    "reduce_sum",
    "mean",
    "reshape",
    "square",
    "l2_norm",
    "positive_part",
    "grad",
    "grad_of_grad_penalty",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonScalarError(ValueError):
    """Raised when differentiating a non-scalar root."""


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g is None or g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _addopt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# ---------------------------------------------------------------------------
# operation rules
#
# forward(attrs, *values) -> (out, cache)
# tangent(attrs, cache, values, dvalues) -> dout        (dvalues may hold None)
# backward(attrs, cache, values, g, gdot, dvalues, needs) -> [(gx, gxdot), ...]
#   gdot / dvalues are None when no tangents are active.
# ---------------------------------------------------------------------------


class _Add:
    name = "add"

    @staticmethod
    def forward(attrs, a, b):
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
        del shape
        return a + b, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        da, db = dvals
        if da is None and db is None:
            return None
        out_shape = np.broadcast_shapes(vals[0].shape, vals[1].shape)
        out = np.zeros(out_shape)
        if da is not None:
            out = out + da
        if db is not None:
            out = out + db
        return out

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        a, b = vals
        return [
            (_unbroadcast(g, a.shape), _unbroadcast(gdot, a.shape)),
            (_unbroadcast(g, b.shape), _unbroadcast(gdot, b.shape)),
        ]


class _Sub:
    name = "sub"

    @staticmethod
    def forward(attrs, a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
        return a - b, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        da, db = dvals
        if da is None and db is None:
            return None
        out = np.zeros(np.broadcast_shapes(vals[0].shape, vals[1].shape))
        if da is not None:
            out = out + da
        if db is not None:
            out = out - db
        return out

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        a, b = vals
        neg_gdot = None if gdot is None else -gdot
        return [
            (_unbroadcast(g, a.shape), _unbroadcast(gdot, a.shape)),
            (_unbroadcast(-g, b.shape), _unbroadcast(neg_gdot, b.shape)),
        ]


class _Mul:
    name = "mul"

    @staticmethod
    def forward(attrs, a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
        return a * b, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        a, b = vals
        da, db = dvals
        out = None
        if da is not None:
            out = da * b
        if db is not None:
            out = _addopt(out, a * db)
        return out

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        a, b = vals
        da, db = dvals if dvals is not None else (None, None)
        res = []
        if needs[0]:
            ga = g * b
            gad = None
            if gdot is not None:
                gad = gdot * b
                if db is not None:
                    gad = gad + g * db
            res.append((_unbroadcast(ga, a.shape), _unbroadcast(gad, a.shape)))
        else:
            res.append((None, None))
        if needs[1]:
            gb = g * a
            gbd = None
            if gdot is not None:
                gbd = gdot * a
                if da is not None:
                    gbd = gbd + g * da
            res.append((_unbroadcast(gb, b.shape), _unbroadcast(gbd, b.shape)))
        else:
            res.append((None, None))
        return res


class _Scale:
    name = "scale"

    @staticmethod
    def forward(attrs, a):
        return attrs["c"] * a, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else attrs["c"] * dvals[0]

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        c = attrs["c"]
        return [(c * g, None if gdot is None else c * gdot)]


def _as2d(a, b):
    """Promote matmul operands to 2-D; return a restore function."""
    va = a.ndim == 1
    vb = b.ndim == 1
    a2 = a[None, :] if va else a
    b2 = b[:, None] if vb else b
    return a2, b2, va, vb


class _MatMul:
    name = "matmul"

    @staticmethod
    def forward(attrs, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        a, b = vals
        da, db = dvals
        out = None
        if da is not None:
            out = da @ b
        if db is not None:
            out = _addopt(out, a @ db)
        return out

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        a, b = vals
        a2, b2, va, vb = _as2d(a, b)
        g2 = g
        if va:
            g2 = g2[None, ...]
        if vb:
            g2 = g2[..., None]
        gd2 = None
        if gdot is not None:
            gd2 = gdot
            if va:
                gd2 = gd2[None, ...]
            if vb:
                gd2 = gd2[..., None]
        da2 = db2 = None
        if dvals is not None:
            da, db = dvals
            if da is not None:
                da2 = da[None, :] if va else da
            if db is not None:
                db2 = db[:, None] if vb else db
        res = []
        if needs[0]:
            ga = g2 @ b2.T
            gad = None
            if gd2 is not None:
                gad = gd2 @ b2.T
                if db2 is not None:
                    gad = gad + g2 @ db2.T
            if va:
                ga = ga[0]
                gad = None if gad is None else gad[0]
            res.append((ga, gad))
        else:
            res.append((None, None))
        if needs[1]:
            gb = a2.T @ g2
            gbd = None
            if gd2 is not None:
                gbd = a2.T @ gd2
                if da2 is not None:
                    gbd = gbd + da2.T @ g2
            if vb:
                gb = gb[:, 0]
                gbd = None if gbd is None else gbd[:, 0]
            res.append((gb, gbd))
        else:
            res.append((None, None))
        return res


def conv2d_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial extent after a strided, zero-padded convolution."""
    return (n + 2 * padding - kernel) // stride + 1


def _im2col(x, k, stride, padding):
    """(N, H, W, C) -> (N*Ho*Wo, k*k*C) patch matrix."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    ho = conv2d_output_size(h, k, stride, padding)
    wo = conv2d_output_size(w, k, stride, padding)
    cols = np.empty((n, ho, wo, k, k, c))
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = xp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _col2im(cols, xshape, k, stride, padding):
    """Adjoint of :func:`_im2col`."""
    n, h, w, c = xshape
    ho = conv2d_output_size(h, k, stride, padding)
    wo = conv2d_output_size(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    for a in range(k):
        for b in range(k):
            out[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride, :] += cols[
                :, :, :, a, b, :
            ]
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return out


class _Conv2d:
    name = "conv2d"

    @staticmethod
    def _check(x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects (N,H,W,C) input and (k,k,C,O) kernel, got {x.shape} and {w.shape}")
        if x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d channel mismatch: input {x.shape[3]} vs kernel {w.shape[2]}")
        if w.shape[0] != w.shape[1]:
            raise ShapeError(f"conv2d kernel must be square, got {w.shape[:2]}")
        k = w.shape[0]
        if x.shape[1] + 2 * padding < k or x.shape[2] + 2 * padding < k:
            raise ShapeError(f"conv2d kernel {k} larger than padded input {x.shape[1:3]}")

    @staticmethod
    def _out_hw(x, k, s, p):
        return conv2d_output_size(x.shape[1], k, s, p), conv2d_output_size(x.shape[2], k, s, p)

    @staticmethod
    def forward(attrs, x, w):
        s, p = attrs["stride"], attrs["padding"]
        _Conv2d._check(x, w, s, p)
        k, o = w.shape[0], w.shape[3]
        ho, wo = _Conv2d._out_hw(x, k, s, p)
        cols = _im2col(x, k, s, p)
        y = cols @ w.reshape(-1, o)
        return y.reshape(x.shape[0], ho, wo, o), cols

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        x, w = vals
        dx, dw = dvals
        s, p = attrs["stride"], attrs["padding"]
        k, o = w.shape[0], w.shape[3]
        ho, wo = _Conv2d._out_hw(x, k, s, p)
        out = None
        if dx is not None:
            out = _im2col(dx, k, s, p) @ w.reshape(-1, o)
        if dw is not None:
            out = _addopt(out, cache @ dw.reshape(-1, o))
        return out.reshape(x.shape[0], ho, wo, o)

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        x, w = vals
        s, p = attrs["stride"], attrs["padding"]
        k, o = w.shape[0], w.shape[3]
        wmat = w.reshape(-1, o)
        gmat = g.reshape(-1, o)
        gdmat = None if gdot is None else gdot.reshape(-1, o)
        dx, dw = dvals if dvals is not None else (None, None)
        res = []
        if needs[0]:
            gx = _col2im(gmat @ wmat.T, x.shape, k, s, p)
            gxd = None
            if gdmat is not None:
                gdcols = gdmat @ wmat.T
                if dw is not None:
                    gdcols = gdcols + gmat @ dw.reshape(-1, o).T
                gxd = _col2im(gdcols, x.shape, k, s, p)
            res.append((gx, gxd))
        else:
            res.append((None, None))
        if needs[1]:
            gw = (cache.T @ gmat).reshape(w.shape)
            gwd = None
            if gdmat is not None:
                gwd = cache.T @ gdmat
                if dx is not None:
                    gwd = gwd + _im2col(dx, k, s, p).T @ gmat
                gwd = gwd.reshape(w.shape)
            res.append((gw, gwd))
        else:
            res.append((None, None))
        return res


class _LeakyRelu:
    name = "leaky_relu"

    @staticmethod
    def forward(attrs, x):
        # slope at exactly 0 is the positive-side slope
        s = np.where(x >= 0, 1.0, attrs["slope"])
        return x * s, s

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else cache * dvals[0]

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        return [(cache * g, None if gdot is None else cache * gdot)]


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes):
    """Broadcast a reduced array back over ``axes`` of ``shape``."""
    keep = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(np.reshape(g, keep), shape)


class _Sum:
    name = "sum"

    @staticmethod
    def forward(attrs, x):
        axes = _norm_axis(attrs["axis"], x.ndim)
        return np.asarray(x.sum(axis=axes)), axes

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else np.asarray(dvals[0].sum(axis=cache))

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        shape = vals[0].shape
        gx = np.array(_expand(g, shape, cache))
        gxd = None if gdot is None else np.array(_expand(gdot, shape, cache))
        return [(gx, gxd)]


class _Mean:
    name = "mean"

    @staticmethod
    def forward(attrs, x):
        axes = _norm_axis(attrs["axis"], x.ndim)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        return np.asarray(x.sum(axis=axes) / count), (axes, count)

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        axes, count = cache
        return None if dvals[0] is None else np.asarray(dvals[0].sum(axis=axes) / count)

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        axes, count = cache
        shape = vals[0].shape
        gx = np.array(_expand(g, shape, axes)) / count
        gxd = None if gdot is None else np.array(_expand(gdot, shape, axes)) / count
        return [(gx, gxd)]


class _Reshape:
    name = "reshape"

    @staticmethod
    def forward(attrs, x):
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} to {attrs['shape']}") from None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else dvals[0].reshape(attrs["shape"])

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        shape = vals[0].shape
        return [(g.reshape(shape), None if gdot is None else gdot.reshape(shape))]


class _Square:
    name = "square"

    @staticmethod
    def forward(attrs, x):
        return x * x, None

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else 2.0 * vals[0] * dvals[0]

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        x = vals[0]
        gxd = None
        if gdot is not None:
            gxd = 2.0 * x * gdot
            if dvals[0] is not None:
                gxd = gxd + 2.0 * dvals[0] * g
        return [(2.0 * x * g, gxd)]


class _L2Norm:
    name = "l2_norm"

    @staticmethod
    def forward(attrs, x):
        axes = _norm_axis(attrs["axis"], x.ndim)
        n = np.sqrt((x * x).sum(axis=axes, keepdims=True))
        # subgradient at 0 is taken as the zero vector
        safe = np.where(n > 0, n, 1.0)
        u = np.where(n > 0, x / safe, 0.0)
        out = np.asarray(np.squeeze(n, axis=axes))
        return out, (axes, n, safe, u)

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        axes, n, safe, u = cache
        if dvals[0] is None:
            return None
        return np.asarray((u * dvals[0]).sum(axis=axes))

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        axes, n, safe, u = cache
        shape = vals[0].shape
        gexp = _expand(g, shape, axes)
        gx = gexp * u
        gxd = None
        if gdot is not None:
            gxd = _expand(gdot, shape, axes) * u
            if dvals[0] is not None:
                dx = dvals[0]
                du = np.where(n > 0, (dx - u * (u * dx).sum(axis=axes, keepdims=True)) / safe, 0.0)
                gxd = gxd + gexp * du
        return [(gx, gxd)]


class _PositivePart:
    name = "positive_part"

    @staticmethod
    def forward(attrs, x):
        mask = (x > 0).astype(np.float64)
        return x * mask, mask

    @staticmethod
    def tangent(attrs, cache, vals, dvals):
        return None if dvals[0] is None else cache * dvals[0]

    @staticmethod
    def backward(attrs, cache, vals, g, gdot, dvals, needs):
        return [(cache * g, None if gdot is None else cache * gdot)]


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Tensor:
    """A node of a :class:`Graph`: a float64 array plus its provenance."""

    __slots__ = ("graph", "id", "value", "op", "inputs", "attrs", "cache", "tangent", "name", "requires_grad")

    def __init__(self, graph, node_id, value, op=None, inputs=(), attrs=None, cache=None, name=None, requires_grad=False):
        self.graph = graph
        self.id = node_id
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.cache = cache
        self.tangent = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        kind = self.op.name if self.op else ("leaf" if self.requires_grad else "constant")
        return f"Tensor(#{self.id} {kind} shape={self.shape})"

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self._wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __rmatmul__(self, other):
        return matmul(self._wrap(other), self)


class Graph:
    """A tape of :class:`Tensor` nodes in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._leaves: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Add a differentiable input.  Names must be unique within a graph."""
        arr = np.array(value, dtype=np.float64)
        if name is None:
            name = f"leaf{len(self.nodes)}"
        if name in self._leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"leaf {name!r} holds non-finite values")
        t = Tensor(self, len(self.nodes), arr, name=name, requires_grad=True)
        self.nodes.append(t)
        self._leaves[name] = t
        return t

    def constant(self, value) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        t = Tensor(self, len(self.nodes), arr)
        self.nodes.append(t)
        return t

    def release(self) -> None:
        """Drop the tape.  Nodes point back at their graph, so without this
        the cycle keeps every cached array alive until a full GC pass."""
        for node in self.nodes:
            node.cache = None
            node.tangent = None
        self.nodes = []
        self._leaves = {}

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def _record(self, op, inputs: Sequence[Tensor], **attrs) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{op.name}: operand {t!r} belongs to another graph")
        node_id = len(self.nodes)
        try:
            value, cache = op.forward(attrs, *(t.value for t in inputs))
        except ShapeError as exc:
            raise ShapeError(f"node #{node_id} ({op.name}): {exc}") from None
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"node #{node_id} ({op.name}) produced non-finite values")
        t = Tensor(
            self,
            node_id,
            value,
            op=op,
            inputs=[i.id for i in inputs],
            attrs=attrs,
            cache=cache,
            requires_grad=any(i.requires_grad for i in inputs),
        )
        self.nodes.append(t)
        return t

    def eval(self, root: Tensor, leaves: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Replay the tape (optionally with new leaf values) and return ``root``'s value."""
        if leaves:
            for name, v in leaves.items():
                node = self._leaves[name]
                v = np.array(v, dtype=np.float64)
                if v.shape != node.shape:
                    raise ShapeError(f"leaf {name!r}: expected shape {node.shape}, got {v.shape}")
                node.value = v
        for node in self.nodes[: root.id + 1]:
            if node.op is None:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            try:
                node.value, node.cache = node.op.forward(node.attrs, *vals)
            except ShapeError as exc:
                raise ShapeError(f"node #{node.id} ({node.op.name}): {exc}") from None
            node.value = np.asarray(node.value, dtype=np.float64)
            node.tangent = None
        return root.value

    def jvp(self, tangents: Mapping[str | Tensor, np.ndarray]) -> None:
        """Forward-mode sweep: attach tangents to every node.

        Leaves missing from ``tangents`` get a zero tangent.
        """
        for node in self.nodes:
            node.tangent = None
        for key, dv in tangents.items():
            node = key if isinstance(key, Tensor) else self._leaves[key]
            dv = np.array(dv, dtype=np.float64)
            if dv.shape != node.shape:
                raise ShapeError(f"tangent for {node!r} has shape {dv.shape}")
            node.tangent = dv
        for node in self.nodes:
            if node.op is None:
                continue
            ins = [self.nodes[i] for i in node.inputs]
            dvals = [i.tangent for i in ins]
            if all(d is None for d in dvals):
                continue
            node.tangent = node.op.tangent(node.attrs, node.cache, [i.value for i in ins], dvals)

    def _backward(self, root: Tensor, with_tangents: bool):
        if root.value.size != 1:
            raise NonScalarError(f"gradient requires a scalar root, got shape {root.shape}")
        adj: dict[int, np.ndarray] = {root.id: np.ones(root.shape)}
        adj_dot: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: root.id + 1]):
            if node.op is None:
                continue
            g = adj.pop(node.id, None)
            if g is None:
                continue
            ins = [self.nodes[i] for i in node.inputs]
            needs = [i.requires_grad for i in ins]
            gdot = None
            dvals = None
            if with_tangents:
                gdot = adj_dot.pop(node.id, None)
                dvals = [i.tangent for i in ins]
                if gdot is None:
                    gdot = np.zeros(node.shape)
            res = node.op.backward(node.attrs, node.cache, [i.value for i in ins], g, gdot, dvals, needs)
            for inp, need, (gx, gxd) in zip(ins, needs, res):
                if not need or gx is None:
                    continue
                if inp.id in adj:
                    adj[inp.id] = adj[inp.id] + gx
                else:
                    adj[inp.id] = gx
                if with_tangents and gxd is not None:
                    adj_dot[inp.id] = adj_dot[inp.id] + gxd if inp.id in adj_dot else gxd
        return adj, adj_dot

    def _collect(self, store, wrt):
        out = {}
        for t in wrt:
            node = t if isinstance(t, Tensor) else self._leaves[t]
            if node.op is not None or not node.requires_grad:
                raise ValueError(f"{node!r} is not a leaf")
            v = store.get(node.id)
            out[node.name] = np.zeros(node.shape) if v is None else np.asarray(v).reshape(node.shape)
        return out

    def grad(self, root: Tensor, wrt: Iterable[str | Tensor]) -> dict[str, np.ndarray]:
        """Exact reverse-mode gradient of a scalar ``root``."""
        adj, _ = self._backward(root, False)
        return self._collect(adj, wrt)

    def grad_and_tangent(self, root: Tensor, wrt: Iterable[str | Tensor]):
        """Gradients plus their directional derivatives along the tangents set by :meth:`jvp`."""
        wrt = list(wrt)
        adj, adj_dot = self._backward(root, True)
        return self._collect(adj, wrt), self._collect(adj_dot, wrt)


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------


def _graph_of(*ts):
    for t in ts:
        if isinstance(t, Tensor):
            return t.graph
    raise TypeError("at least one operand must be a Tensor")


def _lift(g, t):
    return t if isinstance(t, Tensor) else g.constant(t)


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    return g._record(_Add, [_lift(g, a), _lift(g, b)])


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    return g._record(_Sub, [_lift(g, a), _lift(g, b)])


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    return g._record(_Mul, [_lift(g, a), _lift(g, b)])


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph._record(_Scale, [a], c=float(c))


def matmul(a, b) -> Tensor:
    g = _graph_of(a, b)
    return g._record(_MatMul, [_lift(g, a), _lift(g, b)])


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,H,W,C) with kernel ``w`` (k,k,C,O), zero padded."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    g = _graph_of(x, w)
    return g._record(_Conv2d, [_lift(g, x), _lift(g, w)], stride=int(stride), padding=int(padding))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    return x.graph._record(_LeakyRelu, [x], slope=float(slope))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return x.graph._record(_Sum, [x], axis=axis)


def mean(x: Tensor, axis=None) -> Tensor:
    return x.graph._record(_Mean, [x], axis=axis)


def reshape(x: Tensor, shape) -> Tensor:
    return x.graph._record(_Reshape, [x], shape=tuple(shape))


def square(x: Tensor) -> Tensor:
    return x.graph._record(_Square, [x])


def l2_norm(x: Tensor, axis=None) -> Tensor:
    return x.graph._record(_L2Norm, [x], axis=axis)


def positive_part(x: Tensor) -> Tensor:
    return x.graph._record(_PositivePart, [x])


def grad(root: Tensor, wrt: Iterable[str | Tensor]) -> dict[str, np.ndarray]:
    return root.graph.grad(root, wrt)


def grad_of_grad_penalty(
    build: Callable[[Tensor, dict[str, Tensor]], Tensor],
    x: np.ndarray,
    params: Mapping[str, np.ndarray],
    mu: float = 1.0,
):
    """Value and parameter gradient of the one-sided gradient penalty.

    ``build(x, params)`` must return one output per row of the batch ``x``.
    The penalty is ``mu * mean_i (||grad_x psi(x_i)|| - 1)_+^2``.

    Returns ``(penalty, grads, input_grad_norms)``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    xt = g.leaf(x, "__x__")
    pt = {k: g.leaf(v, k) for k, v in params.items()}
    out = build(xt, pt)
    if out.shape != (x.shape[0],):
        raise ShapeError(f"critic must return one value per sample, got {out.shape} for batch {x.shape[0]}")
    root = reduce_sum(out)
    gx = g.grad(root, [xt])["__x__"]
    m = x.shape[0]
    flat = gx.reshape(m, -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    excess = np.maximum(norms - 1.0, 0.0)
    penalty = mu * float(np.mean(excess**2))
    coef = np.where(norms > 0, 2.0 * mu / m * excess / np.where(norms > 0, norms, 1.0), 0.0)
    direction = (flat * coef[:, None]).reshape(x.shape)
    if not np.any(direction):
        g.release()
        return penalty, {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}, norms
    g.jvp({xt: direction})
    _, dgrads = g.grad_and_tangent(root, list(pt))
    g.release()
    return penalty, dgrads, norms
