"""Spatial decay attention layer.

The layer computes, per head, softmax attention whose scores carry an
additive non-positive decay mask, adds a local positional term (3x3
depthwise convolution of the value projection over the spatial grid), and
multiplies the result by a low-rank sigmoid output gate:

    out = gate(x) * (attention(q~, k~, v) + conv3x3(v))

q~ and k~ are rotary-encoded along the two grid axes: the first half of
each head dim rotates with the row index, the second half with the column
index. The decomposed path runs attention along rows then columns with
per-axis masks and per-axis rotation, avoiding any L x L score matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .masks import ConfigError, DecayMask, Grid, decomposed_masks


@dataclass(frozen=True)
class RopeTables:
    """Precomputed rotary angle tables for a grid: cos/sin of shape [L, dk/2].

    Columns [0, dk/4) hold row-axis angles, [dk/4, dk/2) column-axis angles.
    """

    grid: Grid
    head_dim: int
    base: float
    cos: np.ndarray
    sin: np.ndarray

    @classmethod
    def build(cls, grid: Grid, head_dim: int, base: float = 10000.0,
              dtype=np.float64) -> "RopeTables":
        if head_dim % 4 != 0:
            raise ConfigError(f"rotary head dim must be divisible by 4, got {head_dim}")
        q = head_dim // 4
        # rotation frequencies over a dk/2-dim subspace per axis
        inv = base ** (-(np.arange(q) * 2.0 / (head_dim // 2)))
        rows, cols = grid.rows_cols()
        ang_h = rows[:, None].astype(np.float64) * inv[None, :]
        ang_w = cols[:, None].astype(np.float64) * inv[None, :]
        cos = np.concatenate([np.cos(ang_h), np.cos(ang_w)], axis=1).astype(dtype)
        sin = np.concatenate([np.sin(ang_h), np.sin(ang_w)], axis=1).astype(dtype)
        return cls(grid, head_dim, base, cos, sin)

    def grid_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin reshaped to [H, W, dk/2]."""
        h, w = self.grid.h, self.grid.w
        return (self.cos.reshape(h, w, -1), self.sin.reshape(h, w, -1))


def apply_rope(x: Tensor, tables: RopeTables, axes: str = "hw") -> Tensor:
    """Rotate head vectors [B, N, L, dk] by grid position.

    axes selects which half of the head dim rotates: "hw" (both), "h"
    (row half only), or "w" (column half only); the other half passes
    through unchanged.
    """
    if axes not in ("hw", "h", "w"):
        raise ConfigError(f"bad rope axes {axes!r}")
    dk = tables.head_dim
    if x.shape[-1] != dk:
        raise ShapeError(f"head dim {x.shape[-1]} does not match tables ({dk})")
    if x.shape[-2] != tables.grid.l:
        raise ShapeError(f"{x.shape[-2]} positions vs grid of {tables.grid.l}")
    m = dk // 2
    q = m // 2
    xh = ad.narrow(x, -1, 0, m)
    xw = ad.narrow(x, -1, m, m)
    if "h" in axes:
        xh = ad.rope_rotate(xh, tables.cos[:, :q], tables.sin[:, :q])
    if "w" in axes:
        xw = ad.rope_rotate(xw, tables.cos[:, q:], tables.sin[:, q:])
    return ad.concat([xh, xw], -1)


@dataclass(frozen=True)
class SDALayerParams:
    """All weights for one layer (attention sublayer + FFN + norms)."""

    n_heads: int
    w_q: Tensor          # [D, D]
    w_k: Tensor          # [D, D]
    w_v: Tensor          # [D, D]
    w_g: Tensor          # [D, N]   fused-mask gate projection
    w_g_h: Tensor        # [D, N]   row-axis gate projection
    w_g_w: Tensor        # [D, N]   column-axis gate projection
    w_u1: Tensor         # [D, r]   output gate, low rank
    w_u2: Tensor         # [r, D]
    lpe_kernel: Tensor   # [3, 3, D]
    ffn_w1: Tensor       # [D, 4D]
    ffn_b1: Tensor       # [4D]
    ffn_w2: Tensor       # [4D, D]
    ffn_b2: Tensor       # [D]
    norm1_scale: Tensor  # [D]
    norm1_shift: Tensor  # [D]
    norm2_scale: Tensor  # [D]
    norm2_shift: Tensor  # [D]

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape != (d, d) or self.w_k.shape != (d, d) or self.w_v.shape != (d, d):
            raise ShapeError("q/k/v projections must be square and equal-sized")
        if d % self.n_heads != 0:
            raise ConfigError(f"dim {d} not divisible by {self.n_heads} heads")
        for w in (self.w_g, self.w_g_h, self.w_g_w):
            if w.shape != (d, self.n_heads):
                raise ShapeError(f"gate projection must be [{d},{self.n_heads}], got {w.shape}")
        r = self.w_u1.shape[1]
        if self.w_u1.shape != (d, r) or self.w_u2.shape != (r, d):
            raise ShapeError("output gate factors must be [D,r] and [r,D]")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


def _bcast_vec(v: Tensor, ndim: int) -> Tensor:
    return ad.reshape(v, (1,) * (ndim - 1) + (v.shape[0],))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    return ad.layer_norm_op(x, scale, shift, eps)


def silu(x: Tensor) -> Tensor:
    return ad.silu(x)


def ffn_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer MLP with a smooth gate nonlinearity, any leading shape."""
    h = silu(ad.add(ad.matmul(x, w1), _bcast_vec(b1, x.ndim)))
    return ad.add(ad.matmul(h, w2), _bcast_vec(b2, x.ndim))


def _split_heads(x: Tensor, n: int) -> Tensor:
    # [B, L, D] -> [B, N, L, dk]
    b, ll, d = x.shape
    return ad.transpose(ad.reshape(x, (b, ll, n, d // n)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    # [B, N, L, dk] -> [B, L, D]
    b, n, ll, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, ll, n * dk))


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None,
                   weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q, k, v: [..., L, dk]; bias broadcastable to [..., L, L], or None.
    """
    dk = q.shape[-1]
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, perm)), 1.0 / math.sqrt(dk))
    if bias is not None:
        if np.any(bias.data > 0.0):
            raise ValueError("attention bias must be <= 0")
        scores = ad.add(scores, bias)
    w = ad.softmax_rows(scores)
    if weights_out is not None:
        weights_out.append(w)
    return ad.matmul(w, v)


def _gated_output(xf: Tensor, inner: Tensor, p: SDALayerParams) -> Tensor:
    u = ad.matmul(ad.sigmoid(ad.matmul(xf, p.w_u1)), p.w_u2)
    return ad.mul(u, inner)


def _lpe(vf: Tensor, p: SDALayerParams, grid: Grid) -> Tensor:
    b = vf.shape[0]
    v_sp = ad.reshape(vf, (b, grid.h, grid.w, p.dim))
    return ad.reshape(ad.depthwise_conv2d(v_sp, p.lpe_kernel), (b, grid.l, p.dim))


def sda_forward_full(x: Tensor, p: SDALayerParams, mask: DecayMask | None,
                     rope: RopeTables | None,
                     weights_out: list | None = None) -> Tensor:
    """Attention sublayer with a full [*, N, L, L] decay mask (or none).

    x: [B, H, W, D] normalized features. Returns [B, H, W, D].
    """
    if x.ndim != 4:
        raise ShapeError(f"expected x [B,H,W,D], got {x.shape}")
    b, h, w, d = x.shape
    grid = Grid(h, w)
    xf = ad.reshape(x, (b, grid.l, d))
    q = _split_heads(ad.matmul(xf, p.w_q), p.n_heads)
    k = _split_heads(ad.matmul(xf, p.w_k), p.n_heads)
    vf = ad.matmul(xf, p.w_v)
    v = _split_heads(vf, p.n_heads)
    if rope is not None:
        q = apply_rope(q, rope, "hw")
        k = apply_rope(k, rope, "hw")
    bias = None
    if mask is not None:
        if mask.bias.ndim != 4 or mask.bias.shape[-1] != grid.l:
            raise ShapeError(f"mask bias {mask.bias.shape} does not fit L={grid.l}")
        bias = mask.bias
    att = _merge_heads(attention_core(q, k, v, bias, weights_out))
    inner = ad.add(att, _lpe(vf, p, grid))
    return ad.reshape(_gated_output(xf, inner, p), (b, h, w, d))


def sda_forward_decomposed(x: Tensor, p: SDALayerParams,
                           rope: RopeTables | None,
                           weights_out: list | None = None) -> Tensor:
    """Attention sublayer factored into row-wise then column-wise passes.

    Builds per-axis interval masks from x, attends along the width axis,
    then along the height axis over that result. No L x L tensor is
    materialized; per-item mask storage is N(HW^2 + WH^2) instead of NL^2.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected x [B,H,W,D], got {x.shape}")
    b, h, w, d = x.shape
    grid = Grid(h, w)
    n, dk = p.n_heads, p.head_dim
    xf = ad.reshape(x, (b, grid.l, d))
    q = _split_heads(ad.matmul(xf, p.w_q), p.n_heads)
    k = _split_heads(ad.matmul(xf, p.w_k), p.n_heads)
    vf = ad.matmul(xf, p.w_v)
    v = _split_heads(vf, p.n_heads)
    mask_h, mask_w = decomposed_masks(x, p.w_g_h, p.w_g_w, grid)

    def to_grid(t: Tensor) -> Tensor:
        return ad.reshape(t, (b, n, h, w, dk))

    qw = to_grid(apply_rope(q, rope, "w") if rope is not None else q)
    kw = to_grid(apply_rope(k, rope, "w") if rope is not None else k)
    o_w = attention_core(qw, kw, to_grid(v), mask_w.bias, weights_out)

    swap = (0, 1, 3, 2, 4)
    qh = ad.transpose(to_grid(apply_rope(q, rope, "h") if rope is not None else q), swap)
    kh = ad.transpose(to_grid(apply_rope(k, rope, "h") if rope is not None else k), swap)
    o_h = attention_core(qh, kh, ad.transpose(o_w, swap), mask_h.bias, weights_out)

    att = _merge_heads(ad.reshape(ad.transpose(o_h, swap), (b, n, grid.l, dk)))
    inner = ad.add(att, _lpe(vf, p, grid))
    return ad.reshape(_gated_output(xf, inner, p), (b, h, w, d))
