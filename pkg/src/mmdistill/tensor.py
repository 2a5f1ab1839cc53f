"""Float64 tensors with reverse-mode autodiff that can differentiate its own gradients.

Every primitive records a :class:`Node` whose vector-Jacobian product is itself
written in terms of primitives. Running :func:`backward` with
``create_graph=True`` therefore yields gradients that are graph-linked tensors,
which is what gradient matching needs (a loss on ``dL/dtheta`` differentiated
with respect to input pixels).

Broadcasting is deliberately narrow: equal shapes, scalars, and
keepdims-style operands (same rank, every extent equal or 1) or a trailing
1-D bias. Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "ShapeError", "tensor", "no_grad", "enable_grad", "is_grad_enabled", "backward", "SGD",
    "add", "sub", "mul", "div", "div_scalar", "neg", "pow_scalar", "exp", "matmul", "transpose", "reshape",
    "flatten", "sum", "mean", "broadcast_to", "relu", "mask_mul", "conv2d", "avgpool2d",
    "linear", "softmax", "softmax_cross_entropy", "l2_norm", "cosine_similarity", "concat",
    "group_norm", "pair_sqdist_sum", "row_cosine_distance",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def enable_grad():
    """Re-enable graph recording inside a ``no_grad`` block."""
    return _grad_mode(True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __pow__(self, p: float) -> "Tensor":
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad, name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    if getattr(_state, "enabled", True) and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or math.prod(a) == 1 and len(a) <= len(b):
        return b
    if len(b) == 0 or math.prod(b) == 1 and len(b) <= len(a):
        return a
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
        return a
    if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g, needs: (sum_to(g, sa) if needs[0] else None,
                                   sum_to(g, sb) if needs[1] else None))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g, needs: (sum_to(g, sa) if needs[0] else None,
                                   sum_to(neg(g), sb) if needs[1] else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g, needs: (sum_to(mul(g, b), sa) if needs[0] else None,
                                   sum_to(mul(g, a), sb) if needs[1] else None))


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return div_scalar(a, b)
    return mul(a, pow_scalar(_as_tensor(b), -1.0))


def div_scalar(a, s: float) -> Tensor:
    """True division by a constant (not multiplication by its reciprocal)."""
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data / s, "div_scalar", (a,), lambda g, needs: (div_scalar(g, s),))


def pow_scalar(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    if p == 1.0:
        return a

    def vjp(g, needs):
        return (mul(g, mul(p, pow_scalar(a, p - 1.0))),)

    return _make(a.data ** p, "pow", (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_holder = []

    def vjp(g, needs):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), "exp", (a,), vjp)
    out_holder.append(out)
    return out


def mask_mul(x, mask) -> Tensor:
    """Multiply by a constant mask (e.g. relu gate or a binary foreground mask).

    ``mask`` is a plain array broadcastable to ``x`` under the keepdims rule;
    it never receives a gradient.
    """
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == x.ndim - 1 and x.ndim == 4:
        m = m[:, None]
    shape = _check_broadcast("mask_mul", x.shape, m.shape)
    if shape != x.shape:
        raise ShapeError(f"mask_mul: mask shape {m.shape} cannot be applied to {x.shape}")
    return _make(x.data * m, "mask_mul", (x,), lambda g, needs: (mask_mul(g, m),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    gate = (x.data > 0).astype(np.float64)
    return _make(np.where(gate > 0, x.data, 0.0), "relu", (x,), lambda g, needs: (mask_mul(g, gate),))


# ---------------------------------------------------------------------------
# shape / reduction primitives
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _make(data, "reshape", (a,), lambda g, needs: (reshape(g, src),))


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), "transpose", (a,), lambda g, needs: (transpose(g),))


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return mul(sum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    _check_broadcast("broadcast_to", src, shape)
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast_to", (a,),
                 lambda g, needs: (sum_to(g, src),))


def _slice_axis1(a: Tensor, start: int, stop: int) -> Tensor:
    full = a.shape[1]

    def vjp(g, needs):
        return (_embed_axis1(g, start, full),)

    return _make(np.ascontiguousarray(a.data[:, start:stop]), "slice", (a,), vjp)


def _embed_axis1(a: Tensor, start: int, full: int) -> Tensor:
    stop = start + a.shape[1]
    data = np.zeros((a.shape[0], full) + a.shape[2:])
    data[:, start:stop] = a.data
    return _make(data, "embed", (a,), lambda g, needs: (_slice_axis1(g, start, stop),))


def concat(a, b) -> Tensor:
    """Concatenate two 2-D tensors along the feature axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[1]
    nt = na + b.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), "concat", (a, b),
                 lambda g, needs: (_slice_axis1(g, 0, na) if needs[0] else None,
                                   _slice_axis1(g, na, nt) if needs[1] else None))


# ---------------------------------------------------------------------------
# linear algebra / convolution primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g, needs: (matmul(g, transpose(b)) if needs[0] else None,
                                   matmul(transpose(a), g) if needs[1] else None))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xs, ws = x.shape, w.shape
    return _make(_kernels.conv2d(x.data, w.data, stride, padding), "conv2d", (x, w),
                 lambda g, needs: (_conv2d_grad_input(g, w, xs, stride, padding) if needs[0] else None,
                                   _conv2d_grad_weight(x, g, ws, stride, padding) if needs[1] else None))


def _conv2d_grad_input(g: Tensor, w: Tensor, x_shape, stride, padding) -> Tensor:
    # adjoint identities: <conv(x,w), g> is trilinear in (x, w, g)
    def vjp(gx, needs):
        return (conv2d(gx, w, stride, padding) if needs[0] else None,
                _conv2d_grad_weight(gx, g, w.shape, stride, padding) if needs[1] else None)

    data = _kernels.conv2d_grad_input(g.data, w.data, x_shape, stride, padding)
    return _make(data, "conv2d_grad_input", (g, w), vjp)


def _conv2d_grad_weight(x: Tensor, g: Tensor, w_shape, stride, padding) -> Tensor:
    def vjp(gw, needs):
        return (_conv2d_grad_input(g, gw, x.shape, stride, padding) if needs[0] else None,
                conv2d(x, gw, stride, padding) if needs[1] else None)

    data = _kernels.conv2d_grad_weight(x.data, g.data, w_shape, stride, padding)
    return _make(data, "conv2d_grad_weight", (x, g), vjp)


def avgpool2d(x) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avgpool2d: expected N×C×H×W with even H, W; got {x.shape}")
    return _make(_kernels.avgpool2(x.data), "avgpool2d", (x,), lambda g, needs: (_upsample2d(g),))


def _upsample2d(g: Tensor) -> Tensor:
    return _make(_kernels.upsample2(g.data), "upsample2d", (g,), lambda gg, needs: (avgpool2d(gg),))


def pair_sqdist_sum(a, b) -> Tensor:
    """Sum over all (row of ``a``, row of ``b``) pairs of squared Euclidean distance.

    The forward accumulates left to right in (i, j, k) order, so the value is
    reproducible by a plain triple loop.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pair_sqdist_sum: incompatible shapes {a.shape} and {b.shape}")
    na, nb = a.shape[0], b.shape[0]

    def vjp(g, needs):
        # d/da_i = 2 (nb a_i - sum_j b_j);  d/db_j = 2 (na b_j - sum_i a_i)
        two_g = mul(g, 2.0)
        ga = gb = None
        if needs[0]:
            ga = mul(sub(mul(a, float(nb)), sum(b, axis=0, keepdims=True)), two_g)
        if needs[1]:
            gb = mul(sub(mul(b, float(na)), sum(a, axis=0, keepdims=True)), two_g)
        return ga, gb

    return _make(np.asarray(_kernels.pair_sqdist_sum(a.data, b.data)), "pair_sqdist_sum", (a, b), vjp)


# ---------------------------------------------------------------------------
# losses and normalisation
# ---------------------------------------------------------------------------

def softmax(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    holder = []

    def vjp(g, needs):
        s = holder[0]
        return (mul(s, sub(g, sum(mul(g, s), axis=1, keepdims=True))),)

    out = _make(e / e.sum(axis=1, keepdims=True), "softmax", (x,), vjp)
    holder.append(out)
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    loss = np.mean(lse - z[np.arange(n), labels])
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0

    def vjp(g, needs):
        return (mul(sub(softmax(logits), onehot), mul(g, 1.0 / n)),)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), vjp)


def l2_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken to be zero."""
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = np.sqrt(np.sum(x.data * x.data, axis=axes, keepdims=True))
    zero = n == 0
    holder = []

    def vjp(g, needs):
        nk = reshape(holder[0], n.shape)
        safe = add(nk, zero.astype(np.float64))
        ratio = mask_mul(mul(x, pow_scalar(safe, -1.0)), np.broadcast_to(~zero, x.shape))
        return (mul(ratio, reshape(g, n.shape)),)

    out_data = n if keepdims else n.reshape(tuple(s for i, s in enumerate(n.shape) if i not in axes))
    out = _make(out_data, "l2_norm", (x,), vjp)
    holder.append(out)
    return out


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; slices where either norm is zero give 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    dot = sum(mul(a, b), axis=axis)
    na = l2_norm(a, axis=axis)
    nb = l2_norm(b, axis=axis)
    ok = (na.data > 0) & (nb.data > 0)
    denom = add(mul(na, nb), (~ok).astype(np.float64))
    return mask_mul(mul(dot, pow_scalar(denom, -1.0)), ok.astype(np.float64))


def row_cosine_distance(a, b, tol_a: float = 0.0, tol_b: float = 0.0) -> Tensor:
    """``sum_r (1 - cos(a_r, b_r))`` over rows of two 2-D tensors, as one fused node.

    Rows whose norm is ``<= tol`` on either side count as dead: they
    contribute 0 and pass no gradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"row_cosine_distance: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]
    nb = np.sqrt(np.einsum("ij,ij->i", b.data, b.data))[:, None]
    ok = ((na > tol_a) & (nb > tol_b)).astype(np.float64)
    inv = ok / np.where(ok > 0, na * nb, 1.0)
    cos = np.einsum("ij,ij->i", a.data, b.data)[:, None] * inv
    value = np.sum(ok - cos)

    def vjp(g, needs):
        if not is_grad_enabled():
            ga = (cos * a.data / np.where(ok > 0, na * na, 1.0) - b.data * inv) * g.data
            gb = (cos * b.data / np.where(ok > 0, nb * nb, 1.0) - a.data * inv) * g.data
            return Tensor(ga) if needs[0] else None, Tensor(gb) if needs[1] else None
        # differentiable form of the same expression
        na_t = l2_norm(a, axis=1, keepdims=True)
        nb_t = l2_norm(b, axis=1, keepdims=True)
        inv_t = mask_mul(pow_scalar(add(mul(na_t, nb_t), 1.0 - ok), -1.0), ok)
        cos_t = mul(sum(mul(a, b), axis=1, keepdims=True), inv_t)
        out = []
        for x, y, nx in ((a, b, na_t), (b, a, nb_t)):
            if not needs[len(out)]:
                out.append(None)
                continue
            inv_xx = mask_mul(pow_scalar(add(mul(nx, nx), 1.0 - ok), -1.0), ok)
            gx = sub(mul(mul(cos_t, inv_xx), x), mul(y, inv_t))
            out.append(mul(gx, g))
        return tuple(out)

    return _make(np.asarray(value), "row_cosine_distance", (a, b), vjp)


def _group_stats(x, groups, eps):
    n, c, h, w = x.shape
    xg = reshape(x, (n, groups, (c // groups) * h * w))
    xc = sub(xg, mean(xg, axis=2, keepdims=True))
    inv = pow_scalar(add(mean(mul(xc, xc), axis=2, keepdims=True), eps), -0.5)
    return xc, inv


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalisation with per-channel affine ``weight``/``bias``.

    Fused primitive. A first-order backward runs in plain numpy; under
    ``create_graph`` the same formula is assembled from primitives so the
    result stays differentiable.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    weight = None if weight is None else _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    for p in (weight, bias):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"group_norm: affine shape {p.shape} != ({c},)")
    gamma = np.ones(c) if weight is None else weight.data
    beta = np.zeros(c) if bias is None else bias.data
    y, xhat, inv = _kernels.group_norm_fwd(x.data, gamma, beta, groups, eps)
    inputs = tuple(t for t in (x, weight, bias) if t is not None)
    cshape = (1, c, 1, 1)

    def vjp(g, needs):
        needs = dict(zip([id(t) for t in inputs], needs))
        need_x = needs[id(x)]
        need_w = weight is not None and needs[id(weight)]
        need_b = bias is not None and needs[id(bias)]
        if not is_grad_enabled():
            dx, dgamma, dbeta = _kernels.group_norm_bwd(g.data, xhat, inv, gamma, groups)
            out = [Tensor(dx) if need_x else None]
            if weight is not None:
                out.append(Tensor(dgamma) if need_w else None)
            if bias is not None:
                out.append(Tensor(dbeta) if need_b else None)
            return tuple(out)
        xc_t, inv_t = _group_stats(x, groups, eps)
        xh_t = mul(xc_t, inv_t)
        out = []
        if need_x:
            gh = g if weight is None else mul(g, reshape(weight, cshape))
            gh = reshape(gh, (n, groups, -1))
            inner = sub(sub(gh, mean(gh, axis=2, keepdims=True)),
                        mul(xh_t, mean(mul(gh, xh_t), axis=2, keepdims=True)))
            out.append(reshape(mul(inv_t, inner), x.shape))
        else:
            out.append(None)
        if weight is not None:
            out.append(reshape(sum(mul(g, reshape(xh_t, x.shape)), axis=(0, 2, 3), keepdims=True), (c,))
                       if need_w else None)
        if bias is not None:
            out.append(reshape(sum(g, axis=(0, 2, 3), keepdims=True), (c,)) if need_b else None)
        return tuple(out)

    return _make(y, "group_norm", inputs, vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(target: Tensor, leaves, create_graph: bool = False):
    """Gradients of a scalar ``target`` with respect to ``leaves``.

    ``leaves`` is a sequence of tensors (a list of gradients is returned in the
    same order) or a name -> tensor mapping (a dict with the same keys is
    returned). Leaves the target does not depend on get zero gradients. With
    ``create_graph=True`` the returned gradients are themselves differentiable.
    """
    if isinstance(leaves, Mapping):
        keys = list(leaves.keys())
        grads = backward(target, [leaves[k] for k in keys], create_graph)
        return dict(zip(keys, grads))
    leaves = list(leaves)
    if target.size != 1:
        raise ValueError(f"backward: target must be a scalar, got shape {target.shape}")
    for leaf in leaves:
        if not isinstance(leaf, Tensor) or not leaf.is_leaf:
            raise ValueError("backward: every differentiation target must be a graph leaf")
        if not leaf.requires_grad:
            raise ValueError(
                f"backward: leaf {leaf.name or ''} has requires_grad=False and cannot be differentiated"
            )

    grads: dict[int, Tensor] = {}
    if target.requires_grad:
        order = _topo_order(target)
        # only walk nodes with a path to a requested leaf
        useful = {id(leaf) for leaf in leaves}
        for t in order:
            if t.node is not None and any(id(inp) in useful for inp in t.node.inputs):
                useful.add(id(t))
        grads[id(target)] = Tensor(np.ones(target.shape))
        with _grad_mode(create_graph):
            for t in reversed(order):
                g = grads.get(id(t))
                if g is None or t.node is None or id(t) not in useful:
                    continue
                needs = tuple(id(inp) in useful for inp in t.node.inputs)
                in_grads = t.node.vjp(g, needs)
                for inp, need, gi in zip(t.node.inputs, needs, in_grads):
                    if gi is None or not need:
                        continue
                    if gi.shape != inp.shape:
                        raise ShapeError(f"{t.node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
                if not create_graph and t is not target:
                    grads.pop(id(t), None)

    return [grads[id(leaf)] if id(leaf) in grads else Tensor(np.zeros(leaf.shape))
            for leaf in leaves]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class SGD:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``. Updates leaves in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"SGD: lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"SGD: momentum must lie in [0, 1), got {momentum}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, Tensor | np.ndarray]) -> None:
        arrays = {}
        for name, p in self.params.items():
            if name not in grads:
                raise KeyError(f"SGD: no gradient for parameter {name!r}")
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"SGD: gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"SGD: non-finite gradient for parameter {name!r}")
            arrays[name] = g
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += arrays[name]
            p.data = p.data - self.lr * v
