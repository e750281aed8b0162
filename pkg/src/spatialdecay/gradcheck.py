"""Finite-difference gradient checking.

Central differences in float64 with a fixed step; errors are reported as
max relative error with the denominator floored so near-zero gradients
do not blow the ratio up.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_STEP = 1e-5
DEFAULT_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = DEFAULT_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den))


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                 step: float = DEFAULT_STEP,
                 entries: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar f at x (float64).

    `entries` restricts probing to those flat indices; unprobed entries
    are returned as zero, so compare only at `entries` when it is set.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.size, dtype=np.float64)
    idxs = range(x.size) if entries is None else entries
    for i in idxs:
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        g[i] = (float(f(xp)) - float(f(xm))) / (2.0 * step)
    return g.reshape(x.shape)


def check_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
               analytic: np.ndarray, step: float = DEFAULT_STEP,
               entries: Sequence[int] | None = None,
               floor: float = DEFAULT_FLOOR) -> float:
    """Max relative error between `analytic` and central differences of f at x."""
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != np.asarray(x).shape:
        raise ValueError("analytic gradient shape must match x")
    num = numeric_grad(f, x, step=step, entries=entries)
    if entries is None:
        return relative_error(analytic, num, floor=floor)
    idx = np.asarray(list(entries), dtype=np.intp)
    return relative_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx], floor=floor)


# ---------------------------------------------------------------------------
# check suites shared by the CLI and the acceptance tests

def run_op_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Full finite-difference check of every primitive op on small shapes."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    results = []

    def check(name, build, x):
        def f(xn):
            with ad.Tape():
                return ad.reduce_sum(build(ad.Tensor(xn))).item()

        xt = ad.Tensor(x)
        with ad.Tape() as tape:
            loss = ad.reduce_sum(build(xt))
        g = ad.backward(loss, tape)[xt]
        results.append((name, check_grad(f, x, g)))

    x34 = rng.normal(size=(3, 4))
    other = ad.Tensor(rng.normal(size=(3, 4)))
    row = ad.Tensor(rng.normal(size=(1, 4)))
    check("add", lambda t: ad.add(t, other), x34)
    check("add_broadcast", lambda t: ad.add(t, row), x34)
    check("sub", lambda t: ad.sub(other, t), x34)
    check("mul", lambda t: ad.mul(t, other), x34)
    check("scale", lambda t: ad.scale(t, -2.3), x34)
    check("add_scalar", lambda t: ad.add_scalar(t, 0.7), x34)
    check("neg", ad.neg, x34)
    check("abs", ad.absolute, rng.normal(size=(3, 4)) + 0.2)
    check("sigmoid", ad.sigmoid, x34)
    check("silu", ad.silu, x34)
    check("log_sigmoid", ad.log_sigmoid, x34)
    check("exp", ad.exp, x34)
    check("log", ad.log, rng.uniform(0.5, 2.0, size=(3, 4)))
    check("powc", lambda t: ad.powc(t, -0.5), rng.uniform(0.5, 2.0, size=(3, 4)))
    w = ad.Tensor(rng.normal(size=(4, 5)))
    check("matmul_lhs", lambda t: ad.matmul(t, w), rng.normal(size=(3, 4)))
    lhs = ad.Tensor(rng.normal(size=(2, 3, 4)))
    check("matmul_rhs", lambda t: ad.matmul(lhs, t), rng.normal(size=(4, 5)))
    sw = ad.Tensor(rng.normal(size=(3, 5)))
    check("softmax_rows", lambda t: ad.mul(ad.softmax_rows(t), sw),
          rng.normal(size=(3, 5)))
    wsum = ad.Tensor(rng.normal(size=(2, 1, 4)))
    check("reduce_sum_axis", lambda t: ad.mul(ad.reduce_sum(t, axis=1, keepdims=True),
                                              wsum), rng.normal(size=(2, 3, 4)))
    w43 = ad.Tensor(rng.normal(size=(4, 3)))
    check("reshape", lambda t: ad.mul(ad.reshape(t, (4, 3)), w43), x34)
    check("transpose", lambda t: ad.mul(ad.transpose(t, (1, 0)), w43), x34)
    check("narrow", lambda t: ad.narrow(t, 1, 1, 2), x34)
    w64 = ad.Tensor(rng.normal(size=(6, 4)))
    check("concat", lambda t: ad.mul(ad.concat([t, ad.mul(t, t)], 0), w64), x34)
    kern = ad.Tensor(rng.normal(size=(3, 3, 2)))
    check("depthwise_x", lambda t: ad.depthwise_conv2d(t, kern),
          rng.normal(size=(2, 4, 3, 2)))
    ximg = ad.Tensor(rng.normal(size=(2, 4, 3, 2)))
    check("depthwise_kernel", lambda t: ad.depthwise_conv2d(ximg, t),
          rng.normal(size=(3, 3, 2)))
    wlow = ad.Tensor(rng.normal(size=(2, 3, 5, 5)))
    check("pair_interval_low", lambda t: ad.mul(ad.pair_interval_sum(t, "low"), wlow),
          rng.normal(size=(2, 5, 3)))
    check("pair_interval_high", lambda t: ad.mul(ad.pair_interval_sum(t, "high"), wlow),
          rng.normal(size=(2, 5, 3)))
    cosr = np.cos(rng.normal(size=(5, 3)))
    sinr = np.sin(rng.normal(size=(5, 3)))
    wrot = ad.Tensor(rng.normal(size=(2, 5, 6)))
    check("rope_rotate", lambda t: ad.mul(ad.rope_rotate(t, cosr, sinr), wrot),
          rng.normal(size=(2, 5, 6)))
    gamma = ad.Tensor(rng.normal(size=(4,)))
    beta = ad.Tensor(rng.normal(size=(4,)))
    wln = ad.Tensor(rng.normal(size=(2, 3, 4)))
    check("layer_norm_x", lambda t: ad.mul(ad.layer_norm_op(t, gamma, beta), wln),
          rng.normal(size=(2, 3, 4)))
    xln = ad.Tensor(rng.normal(size=(2, 3, 4)))
    check("layer_norm_scale", lambda t: ad.mul(ad.layer_norm_op(xln, t, beta), wln),
          rng.normal(size=(4,)))
    check("layer_norm_shift", lambda t: ad.mul(ad.layer_norm_op(xln, gamma, t), wln),
          rng.normal(size=(4,)))
    return results


def random_layer_params(rng: np.random.Generator, d: int, n: int):
    """Small random weights for one layer, float64, for checking only."""
    from .autodiff import Tensor
    from .layer import SDALayerParams

    def t(shape, s=0.2):
        return Tensor(rng.normal(0.0, s, size=shape))

    return SDALayerParams(
        n_heads=n,
        w_q=t((d, d)), w_k=t((d, d)), w_v=t((d, d)),
        w_g=t((d, n), 0.5), w_g_h=t((d, n), 0.5), w_g_w=t((d, n), 0.5),
        w_u1=t((d, d // 4)), w_u2=t((d // 4, d)),
        lpe_kernel=t((3, 3, d)),
        ffn_w1=t((d, 4 * d)), ffn_b1=t((4 * d,), 0.05),
        ffn_w2=t((4 * d, d)), ffn_b2=t((d,), 0.05),
        norm1_scale=Tensor(1.0 + 0.1 * rng.normal(size=d)),
        norm1_shift=t((d,), 0.05),
        norm2_scale=Tensor(1.0 + 0.1 * rng.normal(size=d)),
        norm2_shift=t((d,), 0.05),
    )


def run_layer_check(seed: int = 0, variant: str = "cag",
                    decomposed_route: bool = False) -> dict[str, float]:
    """FD-check one full block (attention + LPE + gate + FFN + norms).

    D=8, two heads, 3x3 grid, rotary on, float64. Returns max relative
    error per parameter field plus the input under key "x".
    """
    import dataclasses as dc

    from . import autodiff as ad
    from .layer import RopeTables
    from .masks import Grid, default_lambdas
    from .model import block_forward

    rng = np.random.default_rng(seed)
    d, n = 8, 2
    grid = Grid(3, 3)
    params = random_layer_params(rng, d, n)
    rope = RopeTables.build(grid, d // n)
    lambdas = default_lambdas(n)
    x = rng.normal(size=(1, 3, 3, d))
    weight = ad.Tensor(rng.normal(size=(1, 3, 3, d)))

    def forward(p, xt):
        y = block_forward(xt, p, grid, variant, 0.1, rope, lambdas,
                          decomposed_route)
        return ad.reduce_sum(ad.mul(y, weight))

    xt = ad.Tensor(x)
    with ad.Tape() as tape:
        loss = forward(params, xt)
    grads = ad.backward(loss, tape)

    fields = [f.name for f in dc.fields(params) if f.name != "n_heads"]
    errs: dict[str, float] = {}
    for name in fields:
        base = getattr(params, name)

        def f(arr, _name=name):
            with ad.Tape():
                p2 = dc.replace(params, **{_name: ad.Tensor(arr)})
                return forward(p2, ad.Tensor(x)).item()

        analytic = grads.get(base)
        if analytic is None:
            analytic = np.zeros(base.shape)
        errs[name] = check_grad(f, base.data, analytic)

    def fx(arr):
        with ad.Tape():
            return forward(params, ad.Tensor(arr)).item()

    errs["x"] = check_grad(fx, x, grads[xt])
    return errs


def run_model_checks(seed: int = 0, variants: Sequence[str] | None = None,
                     step: float = 1e-5) -> list[tuple[str, float]]:
    """Directional-derivative check of the whole model, one per decay variant.

    A tiny two-stage hierarchical model (8x8 input) is built per variant;
    the analytic gradient is compared with a central difference along one
    random direction through all parameters jointly.
    """
    from . import autodiff as ad
    from .masks import VARIANTS
    from .model import ModelConfig, build_model, cross_entropy

    if variants is None:
        variants = VARIANTS
    data_rng = np.random.default_rng(seed)
    x = data_rng.normal(size=(3, 8, 8, 1))
    y = data_rng.integers(0, 3, size=3)
    results = []
    for variant in variants:
        config = ModelConfig(arch="hierarchical", depths=(1, 1), dims=(8, 16),
                             heads=(2, 2), patch_size=2, img_size=8,
                             in_channels=1, num_classes=3,
                             decay_variant=variant, alpha=0.1, dtype="f64")
        model = build_model(config, seed=seed)
        rng = np.random.default_rng(seed + 1)
        # jitter so no parameter sits at an exactly symmetric point
        for name, p in list(model.store.items()):
            model.store.replace(name, p.data + rng.normal(0.0, 0.02, p.shape))

        def loss_at(delta: float, direction: dict) -> float:
            saved = {k: v.data for k, v in model.store.items()}
            try:
                for k in saved:
                    model.store.replace(k, saved[k] + delta * direction[k])
                with ad.Tape():
                    return cross_entropy(model.forward(x), y).item()
            finally:
                for k in saved:
                    model.store.replace(k, saved[k])

        direction = {}
        sq = 0.0
        for name, p in model.store.items():
            u = rng.normal(size=p.shape)
            direction[name] = u
            sq += float(np.sum(u * u))
        norm = math.sqrt(sq)
        for name in direction:
            direction[name] /= norm

        with ad.Tape() as tape:
            loss = cross_entropy(model.forward(x), y)
        grads = ad.backward(loss, tape)
        analytic = 0.0
        for name, p in model.store.items():
            g = grads.get(p)
            if g is not None:
                analytic += float(np.sum(g * direction[name]))
        fd = (loss_at(step, direction) - loss_at(-step, direction)) / (2.0 * step)
        den = max(abs(analytic), abs(fd), DEFAULT_FLOOR)
        results.append((variant, abs(analytic - fd) / den))
    return results
