"""Tiny reverse-mode automatic differentiation over numpy arrays.

Each :class:`Var` holds a value, an accumulated gradient and a closure that
pushes its gradient to its parents. ``backward`` runs the closures in reverse
topological order. Only the operations a conv -> relu -> pool -> linear chain
needs are provided.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents: Sequence["Var"] = (),
                 backward: Optional[Callable[[np.ndarray], None]] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


def backward(out: Var, seed: Optional[np.ndarray] = None) -> None:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for v in reversed(order):
        if v._backward is not None and v.grad is not None:
            v._backward(v.grad)


def relu(x: Var) -> Var:
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0.0), (x,))
    out._backward = lambda g: x.accumulate(g * mask)
    return out


def add_const(x: Var, c: np.ndarray) -> Var:
    out = Var(x.value + c, (x,))
    out._backward = lambda g: x.accumulate(g)
    return out


def channel_slice(x: Var, start: int, stop: int) -> Var:
    out = Var(x.value[:, start:stop], (x,))

    def bw(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        x.accumulate(full)
    out._backward = bw
    return out


def concat_channels(xs: Sequence[Var]) -> Var:
    if len(xs) == 1:
        return xs[0]
    sizes = np.cumsum([0] + [v.shape[1] for v in xs])
    out = Var(np.concatenate([v.value for v in xs], axis=1), xs)

    def bw(g):
        for v, a, b in zip(xs, sizes[:-1], sizes[1:]):
            v.accumulate(g[:, a:b])
    out._backward = bw
    return out


def conv2d(x: Var, w: Var, stride: int = 1, pad: int = 0, groups: int = 1,
           out_hw: Optional[tuple[int, int]] = None) -> Var:
    """Grouped 2-D convolution, NCHW input and OIHW weights (I = C/groups).

    ``out_hw`` keeps only the leading rows and columns of the output, which is
    how spatial bottlenecks are realised.
    """
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    G = groups
    ho_full = (h + 2 * pad - kh) // stride + 1
    wo_full = (wd + 2 * pad - kw) // stride + 1
    ho, wo = out_hw if out_hw is not None else (ho_full, wo_full)
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col per group: (G, n*ho*wo, cg*kh*kw) @ (G, cg*kh*kw, o/G)
    cols = win.reshape(n, G, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6).reshape(G, n * ho * wo, cg * kh * kw)
    wm = w.value.reshape(G, o // G, cg * kh * kw)
    y = (cols @ wm.transpose(0, 2, 1)).reshape(G, n, ho, wo, o // G).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    out = Var(y, (x, w))

    def bw(g):
        gm = g.reshape(n, G, o // G, ho, wo).transpose(1, 0, 3, 4, 2).reshape(G, n * ho * wo, o // G)
        w.accumulate((gm.transpose(0, 2, 1) @ cols).reshape(w.shape))
        dcols = (gm @ wm).reshape(G, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, c, ho, wo, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
        x.accumulate(dxp[:, :, pad:pad + h, pad:pad + wd])
    out._backward = bw
    return out


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    out = Var(x.value.mean(axis=(2, 3)), (x,))
    out._backward = lambda g: x.accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())
    return out


def linear(x: Var, w: Var, b: Var) -> Var:
    out = Var(x.value @ w.value.T + b.value, (x, w, b))

    def bw(g):
        x.accumulate(g @ w.value)
        w.accumulate(g.T @ x.value)
        b.accumulate(g.sum(axis=0))
    out._backward = bw
    return out


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    out = Var(-logp[np.arange(n), labels].mean(), (logits,))

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(g * p / n)
    out._backward = bw
    return out
