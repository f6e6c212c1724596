"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. Ops are coarse (a whole
layer norm or attention softmax is one node) to keep graphs short.
"""

from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, parents=parents if rg else (), backward_fn=fn if rg else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def roll(a: Tensor, shifts, axes) -> Tensor:
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),))


def getitem(a: Tensor, idx) -> Tensor:
    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), fn)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [const(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def total(a: Tensor) -> Tensor:
    return _make(np.sum(a.data), (a,), lambda g: (np.full(a.shape, g),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an ``(N, H, W, C)`` map."""
    n, h, w, c = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    return _make(out, (a,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T + bias`` over the last axis of ``x``."""
    parents = (x, w) if bias is None else (x, w, bias)
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data if x.requires_grad else None, g2.T @ x2 if w.requires_grad else None]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, fn)


def lora_linear(
    x: Tensor,
    w: Tensor,
    a: Tensor,
    b: Tensor,
    bias: Tensor | None = None,
    scale: float = 1.0,
) -> Tensor:
    """Row-convention LoRA layer: ``x @ w.T + scale * (x @ a.T) @ b.T + bias``."""
    ax = x.data @ a.data.T
    out = x.data @ w.data.T + scale * (ax @ b.data.T)
    if bias is not None:
        out = out + bias.data
    parents = (x, w, a, b) if bias is None else (x, w, a, b, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        ax2 = ax.reshape(-1, ax.shape[-1])
        gb = g @ b.data  # (..., r)
        gx = g @ w.data + scale * (gb @ a.data) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        ga = scale * (gb.reshape(-1, gb.shape[-1]).T @ x2) if a.requires_grad else None
        gbb = scale * (g2.T @ ax2) if b.requires_grad else None
        grads = [gx, gw, ga, gbb]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        n = x.shape[-1]
        g2 = g.reshape(-1, n)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g2 * xhat.reshape(-1, n)).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), fn)


def gather_bias(table: Tensor, index: np.ndarray) -> Tensor:
    """Relative position bias ``(heads, T, T)`` gathered from a ``(E, heads)`` table."""
    out = table.data[index].transpose(2, 0, 1)

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g.transpose(1, 2, 0))
        return (gt,)

    return _make(out, (table,), fn)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_probs(q: np.ndarray, k: np.ndarray, bias: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic attention weights for ``(B, heads, T, dh)`` queries and keys.

    ``bias`` is ``(heads, T, T)``. ``mask`` is ``(nW, T, T)``; batch entry
    ``b`` uses ``mask[b % nW]``.
    """
    bsz, heads, t, dh = q.shape
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)) + bias[None]
    if mask is not None:
        nw = mask.shape[0]
        logits = logits.reshape(bsz // nw, nw, heads, t, t) + mask[None, :, None]
        logits = logits.reshape(bsz, heads, t, t)
    return softmax(logits)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(dh) + bias + mask) v``; shapes as in :func:`attention_probs`."""
    s = 1.0 / math.sqrt(q.shape[-1])
    p = attention_probs(q.data, k.data, bias.data, mask)
    out = p @ v.data

    def fn(g):
        gv = p.swapaxes(-1, -2) @ g
        gp = g @ v.data.swapaxes(-1, -2)
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gl @ k.data) * s if q.requires_grad else None
        gk = (gl.swapaxes(-1, -2) @ q.data) * s if k.requires_grad else None
        gbias = gl.sum(axis=0) if bias.requires_grad else None
        return gq, gk, gv, gbias

    return _make(out, (q, k, v, bias), fn)


def im2col3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: ``(N, H, W, C) -> (N, H, W, 9C)``.

    Neighbour order is row-major over offsets (dy, dx) in {-1, 0, 1}^2.
    """
    n, h, w, c = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [padded[:, dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)]
    out = np.concatenate(cols, axis=-1)

    def fn(g):
        gp = np.zeros_like(padded)
        i = 0
        for dy in range(3):
            for dx in range(3):
                gp[:, dy : dy + h, dx : dx + w, :] += g[..., i * c : (i + 1) * c]
                i += 1
        return (gp[:, 1 : h + 1, 1 : w + 1, :],)

    return _make(out, (x,), fn)


# ---------------------------------------------------------------------------
# Losses (all return scalar tensors)
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Weighted mean of per-row negative log-likelihood."""
    z = logits.data
    n = z.shape[0]
    weight = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64)
    denom = weight.sum()
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), target]
    loss = float((weight * nll).sum() / denom) if denom > 0 else 0.0

    def fn(g):
        p = softmax(z, axis=1)
        p[np.arange(n), target] -= 1.0
        scale_ = g * weight[:, None] / denom if denom > 0 else np.zeros_like(p)
        return (p * scale_,)

    return _make(np.array(loss), (logits,), fn)


def smooth_l1(pred: Tensor, target: np.ndarray, weight: np.ndarray, beta: float = 1.0) -> Tensor:
    """Sum of smooth-L1 over the last axis, weighted per row, divided by total weight."""
    diff = pred.data - target
    ad = np.abs(diff)
    per = np.where(ad < beta, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    denom = max(float(weight.sum()), 1.0)
    loss = float((per.sum(axis=-1) * weight).sum() / denom)

    def fn(g):
        d = np.where(ad < beta, diff / beta, np.sign(diff))
        return (g * d * weight[..., None] / denom,)

    return _make(np.array(loss), (pred,), fn)


def bce_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits."""
    z = logits.data
    loss = float(np.mean(np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))))
    n = z.size

    def fn(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (g * (sig - target) / n,)

    return _make(np.array(loss), (logits,), fn)
