"""Differentiable ops over :class:`~crl_mmnar.kernel.tape.Tensor`.

Broadcasting is limited to what numpy does for ``add``/``sub``/``mul`` (used for
bias rows and constant masks); gradients are summed back to the input shape.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tape import ShapeError, Tensor, as_tensor, record

COSINE_EPS = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                             _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return record("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return record("exp", (a,), e, lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    d = a.data
    return record("log", (a,), np.log(d), lambda g: (g / d,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared weight: contract the flattened leading axes in one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record("matmul", (a, b), ad @ bd, vjp)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims), vjp)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis))
    ad = a.data

    def vjp(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, ad / safe, 0.0) * np.expand_dims(g, axis),)

    return record("l2_norm", (a,), n, vjp)


def normalize(a: Tensor, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    """``a / (||a|| + eps)`` along ``axis``."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    den = n + eps
    u = ad / den

    def vjp(g):
        # d(a/den) = g/den - a * <g, a> / (den^2 * n)
        dot = (g * ad).sum(axis=axis, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        corr = np.where(n > 0, ad * dot / (den * den * safe_n), 0.0)
        return (g / den - corr,)

    return record("normalize", (a,), u, vjp)


def cosine_sim(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Row-wise cosine similarity with ``1e-12`` added to each norm."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: incompatible shapes {a.shape} and {b.shape}")
    return sum(mul(normalize(a, axis), normalize(b, axis)), axis=axis)


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosine similarities between rows of ``a`` and rows of ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: incompatible shapes {a.shape} and {b.shape}")
    return matmul(normalize(a), transpose(normalize(b), (1, 0)))


# ---------------------------------------------------------------- softmax family

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get weight exactly 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a row has no unmasked positions")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", (a,), s, vjp)


def logsumexp_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    lse = np.expand_dims(logsumexp_array(x, axis), axis)
    out = x - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (a,), out, vjp)


# ---------------------------------------------------------------- shape ops

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", tensors, out, vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", tensors, out, vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``a[idx]`` along the first axis."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return record("take_rows", (a,), a.data[idx], vjp)


def scatter_rows(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place the rows of ``a`` at positions ``idx`` of an ``n``-row zero tensor.

    ``idx`` must not repeat.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != a.shape[0]:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for shape {a.shape}")
    out = np.zeros((n,) + a.shape[1:])
    out[idx] = a.data
    return record("scatter_rows", (a,), out, lambda g: (g[idx],))


def masked_mean_pool(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of a ``(B, M, d)`` tensor, counting only ``mask`` positions."""
    mask = np.asarray(mask, dtype=np.float64)
    if a.ndim != 3 or mask.shape != a.shape[:2]:
        raise ShapeError(f"masked_mean_pool: incompatible shapes {a.shape} and {mask.shape}")
    count = mask.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("masked_mean_pool: no observed modalities in a row")
    w = (mask / count[:, None])[:, :, None]
    out = (a.data * w).sum(axis=1)
    return record("masked_mean_pool", (a,), out, lambda g: (g[:, None, :] * w,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return a
    keep = rng.random(a.shape) >= rate
    return mul(a, Tensor(keep / (1.0 - rate)))


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (not reduced)."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    x = logits.data
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: incompatible shapes {x.shape} and {y.shape}")
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = sigmoid_array(x)
    return record("bce_with_logits", (logits,), loss, lambda g: (g * (s - y),))


def focal_bce_with_logits(logits: Tensor, targets, gamma: float) -> Tensor:
    """Elementwise focal loss ``(1 - p_t)^gamma * CE``; ``gamma=0`` is plain BCE."""
    if gamma == 0:
        return bce_with_logits(logits, targets)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    x = logits.data
    if y.shape != x.shape:
        raise ShapeError(f"focal_bce_with_logits: incompatible shapes {x.shape} and {y.shape}")
    ce = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = sigmoid_array(x)
    q = y * (1.0 - s) + (1.0 - y) * s  # 1 - p_t
    w = q ** gamma
    dq = np.where(q > 0, q, 1.0) ** (gamma - 1.0) * (q > 0)
    dp_t = (2.0 * y - 1.0) * s * (1.0 - s)

    def vjp(g):
        return (g * (w * (s - y) - gamma * dq * dp_t * ce),)

    return record("focal_bce_with_logits", (logits,), w * ce, vjp)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return record("mse", (a, b), np.array((diff * diff).mean()), vjp)
