"""Spatial decay masks: content-aware gating plus distance-based attenuation.

A decay mask is an additive, everywhere non-positive attention bias. The
fused 2D form combines per-position gates (log-sigmoid of a learned
projection, so always <= 0) with Manhattan distance on the feature grid;
decomposed and sequence-order variants build interval sums of gate values
along one axis at a time. All builders run on the tensor engine so masks
are differentiable wherever they depend on content.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

VARIANTS = ("none", "fixed", "cag", "1d", "bidir", "decomposed")

# (kind, axis length) appended by every mask builder; tests use this to
# assert which mask shapes a model actually materialized.
BUILD_LOG: list[tuple[str, int]] = []


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


def reset_build_log() -> None:
    BUILD_LOG.clear()


@dataclass(frozen=True)
class Grid:
    """A 2D feature grid of height h and width w, flattened row-major."""

    h: int
    w: int

    def __post_init__(self):
        if int(self.h) < 1 or int(self.w) < 1:
            raise ConfigError(f"grid dims must be >= 1, got {self.h}x{self.w}")

    @property
    def l(self) -> int:
        return self.h * self.w

    def flatten(self, i: int, j: int) -> int:
        if not (0 <= i < self.h and 0 <= j < self.w):
            raise ShapeError(f"position ({i},{j}) outside {self.h}x{self.w}")
        return i * self.w + j

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(self.l)
        return idx // self.w, idx % self.w


@dataclass(frozen=True)
class GateField:
    """Per-position, per-head gate values G = log(sigmoid(F)), so G <= 0."""

    values: Tensor  # [B, L, N]

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"gates must be [B,L,N], got {self.values.shape}")
        # any(> 0) rather than all(<= 0): non-finite values are the finite
        # check's concern, this invariant only rejects positive gates
        if np.any(self.values.data > 0.0):
            raise ValueError("gate values must be <= 0")


@dataclass(frozen=True)
class DecayMask:
    """Additive attention bias with all entries <= 0."""

    bias: Tensor
    alpha: float | None = None
    kind: str = "full"

    def __post_init__(self):
        if np.any(self.bias.data > 0.0):
            raise ValueError("decay mask entries must be <= 0")


def manhattan_matrix(grid: Grid, dtype=np.float64) -> np.ndarray:
    """[L, L] Manhattan distances between flattened grid positions."""
    rows, cols = grid.rows_cols()
    d = np.abs(rows[:, None] - rows[None, :]) + np.abs(cols[:, None] - cols[None, :])
    return d.astype(dtype)


def default_lambdas(n: int) -> np.ndarray:
    """Per-head decay strengths, log-spaced in [0.1, 1.0]."""
    if n < 1:
        raise ConfigError("need at least one head")
    return np.logspace(np.log10(0.1), np.log10(1.0), n)


def gate_logits(x: Tensor, w_g: Tensor) -> Tensor:
    """Project features [B, H, W, D] to per-head gate logits [B, H, W, N]."""
    if x.ndim != 4 or w_g.ndim != 2:
        raise ShapeError(f"expected x [B,H,W,D] and w_g [D,N], "
                         f"got {x.shape} and {w_g.shape}")
    return ad.matmul(x, w_g)


def gates_from_logits(f: Tensor) -> GateField:
    """Log-sigmoid squash of logits [B, H, W, N], flattened to [B, L, N]."""
    if f.ndim != 4:
        raise ShapeError(f"expected logits [B,H,W,N], got {f.shape}")
    b, h, w, n = f.shape
    g = ad.reshape(ad.log_sigmoid(f), (b, h * w, n))
    return GateField(g)


def fused_mask(gates: GateField, grid: Grid, alpha: float) -> DecayMask:
    """Fused 2D decay mask: -|((G_i + G_j) / 2) * d_manhattan(i, j) * alpha|.

    Returns bias [B, N, L, L]. The outer -|.| is redundant given G <= 0,
    d >= 0, alpha > 0, but is kept so the non-positivity invariant holds by
    construction rather than by argument.
    """
    if alpha <= 0.0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    g = gates.values
    b, ll, n = g.shape
    if ll != grid.l:
        raise ShapeError(f"gates cover {ll} positions, grid has {grid.l}")
    d = Tensor(manhattan_matrix(grid, dtype=g.dtype.type))
    gt = ad.transpose(g, (0, 2, 1))
    gi = ad.reshape(gt, (b, n, ll, 1))
    gj = ad.reshape(gt, (b, n, 1, ll))
    m = ad.scale(ad.add(gi, gj), 0.5)
    m = ad.mul(m, d)
    m = ad.scale(m, float(alpha))
    bias = ad.neg(ad.absolute(m))
    BUILD_LOG.append(("fused", ll))
    return DecayMask(bias, alpha=float(alpha), kind="full")


def fixed_spatial_mask(grid: Grid, lambdas: np.ndarray,
                       dtype=np.float64) -> DecayMask:
    """Content-independent mask -lambda_n * d_manhattan, bias [1, N, L, L]."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.ndim != 1:
        raise ShapeError(f"lambdas must be 1D, got shape {lambdas.shape}")
    if np.any(lambdas < 0.0):
        raise ConfigError("decay strengths must be >= 0")
    d = manhattan_matrix(grid)
    bias = -(lambdas[:, None, None] * d[None, :, :])
    BUILD_LOG.append(("fixed", grid.l))
    return DecayMask(Tensor(bias[None].astype(dtype)), alpha=None, kind="full")


def mask_1d(gates: Tensor, direction: str) -> DecayMask:
    """Sequence-order interval mask from gates [B, L, N], bias [B, N, L, L].

    forward sums gates over k in [min(i,j), max(i,j)); bidirectional averages
    that with the mirrored sum over (min(i,j), max(i,j)]. Positions are
    treated as a flat sequence; the 2D grid plays no role here.
    """
    if gates.ndim != 3:
        raise ShapeError(f"gates must be [B,L,N], got {gates.shape}")
    if np.any(gates.data > 0.0):
        raise ValueError("gate values must be <= 0")
    if direction not in ("forward", "bidirectional"):
        raise ConfigError(f"bad direction {direction!r}")
    low = ad.pair_interval_sum(gates, "low")
    if direction == "forward":
        bias = low
    else:
        high = ad.pair_interval_sum(gates, "high")
        bias = ad.scale(ad.add(low, high), 0.5)
    BUILD_LOG.append(("seq", gates.shape[1]))
    return DecayMask(bias, alpha=None, kind="full")


def decomposed_masks(x: Tensor, w_g_h: Tensor, w_g_w: Tensor,
                     grid: Grid) -> tuple[DecayMask, DecayMask]:
    """Per-axis interval masks from features x [B, H, W, D].

    Returns (mask_h, mask_w): mask_w has bias [B, N, H, W, W], a W x W mask
    per row built from that row's width-axis gates; mask_h has bias
    [B, N, W, H, H] per column. Entries are negated interval sums of
    |log(sigmoid(F))| so both are <= 0 with zero diagonals.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected x [B,H,W,D], got {x.shape}")
    b, h, w, _ = x.shape
    if (h, w) != (grid.h, grid.w):
        raise ShapeError(f"x grid {h}x{w} does not match {grid.h}x{grid.w}")
    n = w_g_w.shape[1]
    a_w = ad.absolute(ad.log_sigmoid(ad.matmul(x, w_g_w)))  # [B,H,W,N]
    sw = ad.pair_interval_sum(a_w, "low")                   # [B,H,N,W,W]
    mask_w = ad.transpose(ad.neg(sw), (0, 2, 1, 3, 4))      # [B,N,H,W,W]
    a_h = ad.absolute(ad.log_sigmoid(ad.matmul(x, w_g_h)))  # [B,H,W,N]
    a_h = ad.transpose(a_h, (0, 2, 1, 3))                   # [B,W,H,N]
    sh = ad.pair_interval_sum(a_h, "low")                   # [B,W,N,H,H]
    mask_h = ad.transpose(ad.neg(sh), (0, 2, 1, 3, 4))      # [B,N,W,H,H]
    BUILD_LOG.append(("decomposed_w", w))
    BUILD_LOG.append(("decomposed_h", h))
    return (DecayMask(mask_h, alpha=None, kind="axis_h"),
            DecayMask(mask_w, alpha=None, kind="axis_w"))


def mask_memory_footprint(variant: str, grid: Grid, n_heads: int) -> int:
    """Mask elements materialized per batch item: full L^2 vs per-axis sums."""
    if variant == "full":
        return n_heads * grid.l * grid.l
    if variant == "decomposed":
        return n_heads * (grid.h * grid.w * grid.w + grid.w * grid.h * grid.h)
    raise ConfigError(f"bad footprint variant {variant!r}")


# ---------------------------------------------------------------------------
# dump / parse

def format_mask_header(variant: str, grid: Grid, b: int, n: int,
                       alpha: float | None, extra: dict | None = None) -> str:
    a = "none" if alpha is None else repr(float(alpha))
    head = f"# variant={variant} B={b} N={n} H={grid.h} W={grid.w} alpha={a}"
    if extra:
        head += "".join(f" {k}={v}" for k, v in extra.items())
    return head


def save_mask_text(path, mat: np.ndarray, header: str) -> None:
    """One text matrix: header line then one %.17g row per line."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"need a 2D matrix, got shape {mat.shape}")
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in mat:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_mask_text(path) -> tuple[np.ndarray, dict]:
    """Inverse of save_mask_text: (matrix, header fields)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing header line")
    fields = {}
    for tok in lines[0][2:].split():
        key, _, val = tok.partition("=")
        fields[key] = val
    rows = [np.array([float(v) for v in ln.split()]) for ln in lines[1:] if ln]
    return np.vstack(rows), fields


def save_mask_pgm(path, mat: np.ndarray) -> None:
    """8-bit PGM render mapping [min, 0] to [0, 255] (0 decay = white)."""
    mat = np.asarray(mat, dtype=np.float64)
    lo = float(mat.min())
    if lo == 0.0:
        pix = np.full(mat.shape, 255, dtype=np.uint8)
    else:
        pix = np.round((mat - lo) / (0.0 - lo) * 255.0).astype(np.uint8)
    with open(path, "w") as fh:
        fh.write(f"P2\n{mat.shape[1]} {mat.shape[0]}\n255\n")
        for row in pix:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")
