"""Straight-line numpy reference implementations, written loop-by-loop and
sharing no code with the package."""

from __future__ import annotations

import math

import numpy as np


def conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, dilation: int) -> np.ndarray:
    cin, t = x.shape
    cout, _, k = w.shape
    span = (k - 1) * dilation
    left = span // 2
    out = np.zeros((cout, t))
    for o in range(cout):
        for tt in range(t):
            acc = 0.0 if b is None else b[o]
            for i in range(cin):
                for j in range(k):
                    src = tt - left + j * dilation
                    if 0 <= src < t:
                        acc += w[o, i, j] * x[i, src]
            out[o, tt] = acc
    return out


def max_pool_same(x: np.ndarray, k: int) -> np.ndarray:
    c, t = x.shape
    left = (k - 1) // 2
    out = np.empty_like(x)
    for ch in range(c):
        for tt in range(t):
            best = -math.inf
            for j in range(k):
                src = tt - left + j
                if 0 <= src < t and x[ch, src] > best:
                    best = x[ch, src]
            out[ch, tt] = best
    return out


def sigmoid(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


def gate(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    z = x.sum(axis=1) / x.shape[1]
    hidden = np.maximum(w1 @ z, 0.0)
    return sigmoid(w2 @ hidden)


def se(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    s = gate(x, w1, w2)
    return x * s[:, None]


def mca(x: np.ndarray, block) -> np.ndarray:
    """Entry 1x1, three dilated branches, 1x1 + max-pool branch, concat, 4C gate."""
    e = conv_same(x, block.entry.weight.data, block.entry.bias.data, 1)
    parts = [conv_same(e, br.weight.data, br.bias.data, br.dilation) for br in block.branches]
    p = conv_same(x, block.pool_proj.weight.data, block.pool_proj.bias.data, 1)
    parts.append(max_pool_same(p, block.pool_size))
    cat = np.concatenate(parts, axis=0)
    return cat * gate(cat, block.w1.data, block.w2.data)[:, None]


def softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def single_softmax_attention(z: np.ndarray, wq, wk, wv, heads: int) -> np.ndarray:
    """Plain multi-head attention ``softmax(QK^T/sqrt(d)) V`` applied elementwise to ``z``."""
    n, c = z.shape
    d = c // heads
    q, k, v = z @ wq, z @ wk, z @ wv
    r = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        a = softmax_rows(q[:, sl] @ k[:, sl].T / math.sqrt(d))
        r[:, sl] = a @ v[:, sl]
    return r * z
