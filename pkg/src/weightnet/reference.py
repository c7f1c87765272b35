"""Slow, obviously-correct reference implementations.

These are the oracles the fast paths are checked against, both by the test
suite and by ``weightnet selftest``. They work on plain numpy arrays and use
explicit loops on purpose; keep them independent of ``tensor.py``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv2d(x: np.ndarray, w: np.ndarray, groups: int = 1, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Grouped cross-correlation written as the textbook seven-deep loop."""
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out_per_group = Co // groups
    out = np.zeros((B, Co, oh, ow), dtype=np.result_type(x, w))
    for b in range(B):
        for o in range(Co):
            g = o // out_per_group
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for c in range(Cg):
                        ci = g * Cg + c
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride + i - pad
                                s = xx * stride + j - pad
                                if 0 <= r < H and 0 <= s < W:
                                    acc += w[o, c, i, j] * x[b, ci, r, s]
                    out[b, o, y, xx] = acc
    return out


def conv_macs_by_counting(c_in: int, c_out: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    """Count multiply-accumulates by walking the naive loop's index space."""
    n = 0
    for _o in range(c_out):
        for _y in range(h_out):
            for _x in range(w_out):
                for _c in range(c_in):
                    for _i in range(kh):
                        n += kw
    return n


def block_diagonal(blocks: np.ndarray) -> np.ndarray:
    """Materialize (g, o/g, i/g) blocks as the dense (o, i) block-diagonal matrix."""
    g, ob, ib = blocks.shape
    dense = np.zeros((g * ob, g * ib), dtype=blocks.dtype)
    for k in range(g):
        dense[k * ob : (k + 1) * ob, k * ib : (k + 1) * ib] = blocks[k]
    return dense


def mixture_loop(experts: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """sum_i alpha[b, i] * experts[i], accumulated one expert at a time."""
    B, m = alpha.shape
    out = np.zeros((B,) + experts.shape[1:], dtype=np.result_type(experts, alpha))
    for b in range(B):
        for i in range(m):
            out[b] += alpha[b, i] * experts[i]
    return out


def per_sample_conv(kernels: np.ndarray, x: np.ndarray, stride: int, pad: int, conv=naive_conv2d) -> np.ndarray:
    return np.concatenate(
        [conv(x[b : b + 1], kernels[b], 1, stride, pad) for b in range(x.shape[0])], axis=0
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def numerical_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], eps: float = 1e-4) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            fp = f()
            flat[k] = old - eps
            fm = f()
            flat[k] = old
            gflat[k] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def cosine_matrix_loop(filters: np.ndarray) -> np.ndarray:
    n = filters.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dot = sum(float(a) * float(b) for a, b in zip(filters[i], filters[j]))
            ni = sum(float(a) ** 2 for a in filters[i]) ** 0.5
            nj = sum(float(b) ** 2 for b in filters[j]) ** 0.5
            if i == j:
                out[i, j] = 1.0
            elif ni == 0 or nj == 0:
                out[i, j] = 0.0
            else:
                out[i, j] = dot / (ni * nj)
    return out


def eig2x2_symmetric(a: float, b: float, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenpairs of [[a, b], [b, d]], largest eigenvalue first."""
    tr, det = a + d, a * d - b * b
    disc = np.sqrt(max(tr * tr / 4 - det, 0.0))
    vals = np.array([tr / 2 + disc, tr / 2 - disc])
    vecs = []
    for lam in vals:
        if abs(b) > 1e-15:
            v = np.array([lam - d, b])
        else:
            v = np.array([1.0, 0.0]) if abs(a - lam) <= abs(d - lam) else np.array([0.0, 1.0])
        vecs.append(v / np.linalg.norm(v))
    return vals, np.stack(vecs, axis=1)
