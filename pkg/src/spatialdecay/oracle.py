"""Naive reference implementations used only to verify the fast paths.

Everything here is a direct loop transcription of the defining formulas,
written against plain numpy arrays with no code shared with the library's
vectorized implementations. Forward only; deliberately slow.
"""
from __future__ import annotations

import math

import numpy as np


def log_sigmoid_scalar(x: float) -> float:
    """Stable scalar log(sigmoid(x))."""
    return min(x, 0.0) - math.log1p(math.exp(-abs(x)))


def manhattan(h: int, w: int) -> np.ndarray:
    """[L, L] Manhattan distances between flattened grid positions."""
    ll = h * w
    out = np.zeros((ll, ll), dtype=np.float64)
    for i in range(ll):
        for j in range(ll):
            hi, wi = divmod(i, w)
            hj, wj = divmod(j, w)
            out[i, j] = abs(hi - hj) + abs(wi - wj)
    return out


def fused_mask(gates: np.ndarray, h: int, w: int, alpha: float) -> np.ndarray:
    """[B, N, L, L] fused spatial decay mask from per-position gates [B, L, N]."""
    b, ll, n = gates.shape
    assert ll == h * w
    d = manhattan(h, w)
    out = np.zeros((b, n, ll, ll), dtype=np.float64)
    for bi in range(b):
        for ni in range(n):
            for i in range(ll):
                for j in range(ll):
                    v = 0.5 * (gates[bi, i, ni] + gates[bi, j, ni])
                    v = v * d[i, j]
                    v = v * alpha
                    out[bi, ni, i, j] = -abs(v)
    return out


def fixed_mask(h: int, w: int, lambdas: np.ndarray) -> np.ndarray:
    """[N, L, L] content-independent decay mask with per-head strengths."""
    d = manhattan(h, w)
    n = len(lambdas)
    ll = h * w
    out = np.zeros((n, ll, ll), dtype=np.float64)
    for ni in range(n):
        for i in range(ll):
            for j in range(ll):
                out[ni, i, j] = -(lambdas[ni] * d[i, j])
    return out


def seq_mask(gates: np.ndarray, direction: str) -> np.ndarray:
    """[B, N, L, L] sequence-order interval mask from gates [B, L, N].

    forward: sum of gates over k in [min(i,j), max(i,j)).
    bidirectional: average of the forward sum and the mirrored sum over
    k in (min(i,j), max(i,j)].
    """
    b, ll, n = gates.shape
    out = np.zeros((b, n, ll, ll), dtype=np.float64)
    for bi in range(b):
        for ni in range(n):
            for i in range(ll):
                for j in range(ll):
                    lo, hi = min(i, j), max(i, j)
                    fwd = 0.0
                    for k in range(lo, hi):
                        fwd += gates[bi, k, ni]
                    if direction == "forward":
                        out[bi, ni, i, j] = fwd
                    elif direction == "bidirectional":
                        rev = 0.0
                        for k in range(lo + 1, hi + 1):
                            rev += gates[bi, k, ni]
                        out[bi, ni, i, j] = (fwd + rev) * 0.5
                    else:
                        raise ValueError(f"bad direction {direction!r}")
    return out


def decomposed_masks(x: np.ndarray, w_g_h: np.ndarray,
                     w_g_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis interval masks from feature map x [B, H, W, D].

    Returns (mask_h [B, N, W, H, H], mask_w [B, N, H, W, W]): for each column
    (row), the sum over the index interval of absolute log-sigmoid gate
    values along that axis, negated.
    """
    b, h, w, _ = x.shape
    n = w_g_h.shape[1]
    f_h = np.matmul(x, w_g_h)
    f_w = np.matmul(x, w_g_w)
    mask_h = np.zeros((b, n, w, h, h), dtype=np.float64)
    mask_w = np.zeros((b, n, h, w, w), dtype=np.float64)
    for bi in range(b):
        for ni in range(n):
            for hi in range(h):
                for i in range(w):
                    for j in range(w):
                        total = 0.0
                        for k in range(min(i, j), max(i, j)):
                            total += abs(log_sigmoid_scalar(f_w[bi, hi, k, ni]))
                        mask_w[bi, ni, hi, i, j] = -total
            for wi in range(w):
                for i in range(h):
                    for j in range(h):
                        total = 0.0
                        for k in range(min(i, j), max(i, j)):
                            total += abs(log_sigmoid_scalar(f_h[bi, k, wi, ni]))
                        mask_h[bi, ni, wi, i, j] = -total
    return mask_h, mask_w


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              bias: np.ndarray | None) -> np.ndarray:
    """Masked softmax attention, one query row at a time.

    q, k, v: [B, N, L, dk]; bias: [B, N, L, L] additive or None.
    """
    b, n, ll, dk = q.shape
    inv = 1.0 / math.sqrt(dk)
    out = np.zeros_like(v)
    for bi in range(b):
        for ni in range(n):
            for i in range(ll):
                scores = []
                for j in range(ll):
                    s = 0.0
                    for t in range(dk):
                        s += q[bi, ni, i, t] * k[bi, ni, j, t]
                    s *= inv
                    if bias is not None:
                        s += bias[bi, ni, i, j]
                    scores.append(s)
                m = max(scores)
                e = [math.exp(s - m) for s in scores]
                z = sum(e)
                for t in range(dk):
                    acc = 0.0
                    for j in range(ll):
                        acc += (e[j] / z) * v[bi, ni, j, t]
                    out[bi, ni, i, t] = acc
    return out
