"""Model assembly and training: patch embedding, stages of pre-norm blocks
with spatial decay attention, mean-pooled classifier head, AdamW.

Two shapes are supported: a hierarchical model whose stages halve the grid
and widen the channel dim (2x2 space-to-depth + linear between stages), and
a plain isotropic stack at one resolution. Six decay variants plug into the
same parameter layout; variants that do not use a given gate projection
leave it with exactly-zero gradients.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layer import (RopeTables, SDALayerParams, ffn_forward, layer_norm,
                    sda_forward_decomposed, sda_forward_full)
from .masks import (VARIANTS, ConfigError, Grid, default_lambdas,
                    fixed_spatial_mask, fused_mask, gate_logits,
                    gates_from_logits, mask_1d)

CHECKPOINT_MAGIC = b"SPDECAY1"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message names the first offending op."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "hierarchical"
    depths: tuple = (2, 2, 2, 2)
    dims: tuple = (32, 64, 96, 128)
    heads: tuple = (2, 2, 4, 4)
    patch_size: int = 4
    img_size: int = 32
    in_channels: int = 1
    num_classes: int = 4
    decay_variant: str = "cag"
    alpha: float = 0.1
    use_rope: bool = True
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "heads", tuple(int(v) for v in self.heads))
        if self.arch not in ("hierarchical", "plain"):
            raise ConfigError(f"bad arch {self.arch!r}")
        if self.arch == "plain" and len(self.depths) != 1:
            raise ConfigError("plain arch takes exactly one stage")
        if not (len(self.depths) == len(self.dims) == len(self.heads)):
            raise ConfigError("depths, dims and heads must have equal length")
        if self.decay_variant not in VARIANTS:
            raise ConfigError(f"bad decay variant {self.decay_variant!r}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.dtype not in ("f64", "f32"):
            raise ConfigError(f"bad dtype {self.dtype!r}")
        if self.img_size % self.patch_size != 0:
            raise ConfigError(f"patch size {self.patch_size} does not divide "
                              f"image size {self.img_size}")
        base = self.img_size // self.patch_size
        if self.arch == "hierarchical":
            need = 2 ** (len(self.depths) - 1)
            if base % need != 0:
                raise ConfigError(f"base grid {base} not divisible by {need} "
                                  f"across {len(self.depths)} stages")
        for d, n in zip(self.dims, self.heads):
            if d % n != 0:
                raise ConfigError(f"dim {d} not divisible by {n} heads")
            if self.use_rope and (d // n) % 4 != 0:
                raise ConfigError(f"head dim {d // n} must be divisible by 4 "
                                  f"for rotary encoding")
            if d % 4 != 0:
                raise ConfigError(f"dim {d} must be divisible by 4 (gate rank D/4)")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_grid(self, s: int) -> Grid:
        base = self.img_size // self.patch_size
        if self.arch == "plain":
            return Grid(base, base)
        return Grid(base // 2 ** s, base // 2 ** s)


def nano_hierarchical(**over) -> ModelConfig:
    """Four-stage nano model on 32x32 inputs."""
    kw = dict(arch="hierarchical", depths=(2, 2, 2, 2), dims=(32, 64, 96, 128),
              heads=(2, 2, 4, 4), patch_size=4, img_size=32)
    kw.update(over)
    return ModelConfig(**kw)


def nano_plain(**over) -> ModelConfig:
    """Single-stage isotropic nano model on 32x32 inputs."""
    kw = dict(arch="plain", depths=(4,), dims=(64,), heads=(4,),
              patch_size=4, img_size=32)
    kw.update(over)
    return ModelConfig(**kw)


class ParamStore:
    """Named, ordered parameter tensors. Replacement keeps order and dtype."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(arr)
        self._params[name] = t
        return t

    def replace(self, name: str, arr: np.ndarray) -> Tensor:
        old = self._params[name]
        if old.shape != arr.shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {old.shape}")
        t = Tensor._wrap(np.ascontiguousarray(arr, dtype=old.dtype))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws outside 2 std rejected and redrawn."""
    arr = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(arr) > 2.0 * std
        count = int(bad.sum())
        if count == 0:
            return arr
        arr[bad] = rng.normal(0.0, std, size=count)


class Model:
    """A built model: config, parameters, per-stage buffers."""

    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config = config
        self.store = store
        self.stage_lambdas = [default_lambdas(n) for n in config.heads]
        self._rope_cache: dict = {}

    # -- parameter plumbing ------------------------------------------------

    def layer_params(self, stage: int, block: int) -> SDALayerParams:
        p = f"stage{stage}.block{block}"
        s = self.store
        return SDALayerParams(
            n_heads=self.config.heads[stage],
            w_q=s[f"{p}.attn.w_q"], w_k=s[f"{p}.attn.w_k"], w_v=s[f"{p}.attn.w_v"],
            w_g=s[f"{p}.attn.w_g"], w_g_h=s[f"{p}.attn.w_g_h"],
            w_g_w=s[f"{p}.attn.w_g_w"],
            w_u1=s[f"{p}.attn.w_u1"], w_u2=s[f"{p}.attn.w_u2"],
            lpe_kernel=s[f"{p}.attn.lpe"],
            ffn_w1=s[f"{p}.ffn.w1"], ffn_b1=s[f"{p}.ffn.b1"],
            ffn_w2=s[f"{p}.ffn.w2"], ffn_b2=s[f"{p}.ffn.b2"],
            norm1_scale=s[f"{p}.norm1.scale"], norm1_shift=s[f"{p}.norm1.shift"],
            norm2_scale=s[f"{p}.norm2.scale"], norm2_shift=s[f"{p}.norm2.shift"],
        )

    def rope_for(self, grid: Grid, head_dim: int) -> RopeTables | None:
        if not self.config.use_rope:
            return None
        key = (grid.h, grid.w, head_dim)
        if key not in self._rope_cache:
            self._rope_cache[key] = RopeTables.build(grid, head_dim,
                                                     dtype=self.config.np_dtype)
        return self._rope_cache[key]

    # -- forward -----------------------------------------------------------

    def forward(self, x, stage_shapes: list | None = None) -> Tensor:
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=cfg.np_dtype)
        if x.ndim != 4 or x.shape[1] != cfg.img_size or x.shape[2] != cfg.img_size \
                or x.shape[3] != cfg.in_channels:
            raise ShapeError(f"expected [B,{cfg.img_size},{cfg.img_size},"
                             f"{cfg.in_channels}], got {x.shape}")
        h = _space_to_depth(x, cfg.patch_size)
        h = _linear(h, self.store["patch_embed.w"], self.store["patch_embed.b"])
        for s in range(cfg.n_stages):
            if s > 0:
                h = _space_to_depth(h, 2)
                h = _linear(h, self.store[f"stage{s}.down.w"],
                            self.store[f"stage{s}.down.b"])
            grid = cfg.stage_grid(s)
            decomposed_route = (cfg.arch == "hierarchical" and s < 2)
            for i in range(cfg.depths[s]):
                h = block_forward(h, self.layer_params(s, i), grid,
                                  cfg.decay_variant, cfg.alpha,
                                  self.rope_for(grid, cfg.dims[s] // cfg.heads[s]),
                                  self.stage_lambdas[s], decomposed_route)
            if stage_shapes is not None:
                stage_shapes.append(h.shape)
        h = layer_norm(h, self.store["final_norm.scale"], self.store["final_norm.shift"])
        b = h.shape[0]
        flat = ad.reshape(h, (b, h.shape[1] * h.shape[2], h.shape[3]))
        pooled = ad.scale(ad.reduce_sum(flat, axis=1), 1.0 / flat.shape[1])
        return ad.add(ad.matmul(pooled, self.store["head.w"]),
                      ad.reshape(self.store["head.b"], (1, cfg.num_classes)))


def _space_to_depth(x: Tensor, p: int) -> Tensor:
    b, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"grid {h}x{w} not divisible by {p}")
    t = ad.reshape(x, (b, h // p, p, w // p, p, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (b, h // p, w // p, p * p * c))


def _linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w),
                  ad.reshape(bias, (1,) * (x.ndim - 1) + (bias.shape[0],)))


def attention_sublayer(h: Tensor, p: SDALayerParams, grid: Grid, variant: str,
                       alpha: float, rope: RopeTables | None,
                       lambdas: np.ndarray, decomposed_route: bool,
                       weights_out: list | None = None) -> Tensor:
    """Dispatch one decay variant over the normalized features h [B,H,W,D]."""
    if variant == "decomposed" or (variant == "cag" and decomposed_route):
        return sda_forward_decomposed(h, p, rope, weights_out)
    mask = None
    if variant == "fixed":
        mask = fixed_spatial_mask(grid, lambdas, dtype=h.dtype.type)
    elif variant == "cag":
        gates = gates_from_logits(gate_logits(h, p.w_g))
        mask = fused_mask(gates, grid, alpha)
    elif variant in ("1d", "bidir"):
        gates = gates_from_logits(gate_logits(h, p.w_g))
        mask = mask_1d(gates.values,
                       "forward" if variant == "1d" else "bidirectional")
    elif variant != "none":
        raise ConfigError(f"bad decay variant {variant!r}")
    return sda_forward_full(h, p, mask, rope, weights_out)


def block_forward(x: Tensor, p: SDALayerParams, grid: Grid, variant: str,
                  alpha: float, rope: RopeTables | None, lambdas: np.ndarray,
                  decomposed_route: bool = False) -> Tensor:
    """Pre-norm residual block: x + attn(norm(x)), then x + ffn(norm(x))."""
    a = attention_sublayer(layer_norm(x, p.norm1_scale, p.norm1_shift),
                           p, grid, variant, alpha, rope, lambdas,
                           decomposed_route)
    x = ad.add(x, a)
    f = ffn_forward(layer_norm(x, p.norm2_scale, p.norm2_shift),
                    p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2)
    return ad.add(x, f)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Initialize all parameters deterministically from the seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = config.np_dtype
    store = ParamStore()
    p2 = config.patch_size * config.patch_size * config.in_channels
    store.add("patch_embed.w", trunc_normal(rng, (p2, config.dims[0])).astype(dt))
    store.add("patch_embed.b", np.zeros(config.dims[0], dtype=dt))
    for s in range(config.n_stages):
        d, n = config.dims[s], config.heads[s]
        if s > 0:
            prev = config.dims[s - 1]
            store.add(f"stage{s}.down.w", trunc_normal(rng, (4 * prev, d)).astype(dt))
            store.add(f"stage{s}.down.b", np.zeros(d, dtype=dt))
        for i in range(config.depths[s]):
            prefix = f"stage{s}.block{i}"
            r = d // 4
            store.add(f"{prefix}.norm1.scale", np.ones(d, dtype=dt))
            store.add(f"{prefix}.norm1.shift", np.zeros(d, dtype=dt))
            store.add(f"{prefix}.attn.w_q", trunc_normal(rng, (d, d)).astype(dt))
            store.add(f"{prefix}.attn.w_k", trunc_normal(rng, (d, d)).astype(dt))
            store.add(f"{prefix}.attn.w_v", trunc_normal(rng, (d, d)).astype(dt))
            # full-path gate projection starts at zero: initial gates are
            # log(1/2) everywhere; the per-axis projections init like other
            # projections so axis gates start content-diverse (exactly
            # uniform gates sit on a gradient-cancellation point and the
            # decomposed route never leaves it)
            store.add(f"{prefix}.attn.w_g", np.zeros((d, n), dtype=dt))
            store.add(f"{prefix}.attn.w_g_h", trunc_normal(rng, (d, n)).astype(dt))
            store.add(f"{prefix}.attn.w_g_w", trunc_normal(rng, (d, n)).astype(dt))
            store.add(f"{prefix}.attn.w_u1", trunc_normal(rng, (d, r)).astype(dt))
            store.add(f"{prefix}.attn.w_u2", trunc_normal(rng, (r, d)).astype(dt))
            store.add(f"{prefix}.attn.lpe", trunc_normal(rng, (3, 3, d)).astype(dt))
            store.add(f"{prefix}.norm2.scale", np.ones(d, dtype=dt))
            store.add(f"{prefix}.norm2.shift", np.zeros(d, dtype=dt))
            store.add(f"{prefix}.ffn.w1", trunc_normal(rng, (d, 4 * d)).astype(dt))
            store.add(f"{prefix}.ffn.b1", np.zeros(4 * d, dtype=dt))
            store.add(f"{prefix}.ffn.w2", trunc_normal(rng, (4 * d, d)).astype(dt))
            store.add(f"{prefix}.ffn.b2", np.zeros(d, dtype=dt))
    store.add("final_norm.scale", np.ones(config.dims[-1], dtype=dt))
    store.add("final_norm.shift", np.zeros(config.dims[-1], dtype=dt))
    store.add("head.w", trunc_normal(rng, (config.dims[-1], config.num_classes)).astype(dt))
    store.add("head.b", np.zeros(config.num_classes, dtype=dt))
    return Model(config, store)


# ---------------------------------------------------------------------------
# loss, optimizer, training step

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels must be [{b}], got {labels.shape}")
    mx = np.max(logits.data, axis=-1, keepdims=True)
    z = ad.sub(logits, Tensor(mx))
    lse = ad.log(ad.reduce_sum(ad.exp(z), axis=-1, keepdims=True))
    logp = ad.sub(z, lse)
    onehot = np.zeros((b, c), dtype=logits.dtype.type)
    onehot[np.arange(b), labels] = 1.0
    return ad.neg(ad.scale(ad.reduce_sum(ad.mul(logp, Tensor(onehot))), 1.0 / b))


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, lr: float = 1e-3,
                  weight_decay: float = 0.05) -> "AdamWState":
        opt = cls(lr=lr, weight_decay=weight_decay)
        for name, p in store.items():
            opt.m[name] = np.zeros(p.shape, dtype=p.dtype)
            opt.v[name] = np.zeros(p.shape, dtype=p.dtype)
        return opt


def cosine_lr(base: float, step: int, total_steps: int,
              warmup: int = 0) -> float:
    """Cosine decay from base to 0 over total_steps (step counts from 0).

    With warmup > 0 the rate first ramps linearly to base over that many
    steps, then the cosine covers the remaining steps.
    """
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if total_steps <= warmup:
        return base
    frac = (min(max(step, warmup), total_steps) - warmup) / (total_steps - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(store: ParamStore, grads: dict, opt: AdamWState,
               lr_now: float | None = None) -> None:
    """Decoupled-weight-decay Adam; decay applies only to ndim >= 2 params."""
    lr = opt.lr if lr_now is None else lr_now
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new = p.data - lr * upd
        if p.ndim >= 2 and opt.weight_decay > 0.0:
            new = new - lr * opt.weight_decay * p.data
        store.replace(name, new.astype(p.dtype))


def train_step(model: Model, opt: AdamWState, x: np.ndarray, y: np.ndarray,
               lr_now: float | None = None) -> dict:
    """One forward/backward/update pass. Returns loss and batch accuracy."""
    with ad.Tape() as tape:
        logits = model.forward(x)
        loss = cross_entropy(logits, y)
    loss_val = loss.item()
    if not math.isfinite(loss_val):
        culprit = ad.first_nonfinite(tape) or "loss"
        raise TrainingDiverged(f"non-finite loss at step {opt.t + 1}; "
                               f"first non-finite op: {culprit}")
    grads_t = ad.backward(loss, tape)
    grads = {}
    for name, p in model.store.items():
        g = grads_t.get(p)
        if g is not None:
            grads[name] = g
    adamw_step(model.store, grads, opt, lr_now)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == np.asarray(y)))
    return {"loss": loss_val, "acc": acc}


def evaluate(model: Model, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> dict:
    """Accuracy and mean loss over a dataset, untaped."""
    n = len(x)
    correct = 0
    loss_sum = 0.0
    for lo in range(0, n, batch_size):
        xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
        logits = model.forward(xb)
        loss_sum += cross_entropy(logits, yb).item() * len(xb)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == yb))
    return {"acc": correct / n, "loss": loss_sum / n}


# ---------------------------------------------------------------------------
# checkpoints

def _dtype_tag(dt) -> str:
    return "f8" if np.dtype(dt) == np.float64 else "f4"


def save_checkpoint(path, model: Model, opt: AdamWState | None = None,
                    step: int = 0, extra: dict | None = None) -> None:
    """Bit-stable binary checkpoint: magic, JSON metadata, raw LE blobs."""
    names = model.store.names()
    meta = {
        "format": 1,
        "config": dataclasses.asdict(model.config),
        "step": int(step),
        "names": names,
        "shapes": {k: list(model.store[k].shape) for k in names},
        "dtype": _dtype_tag(model.config.np_dtype),
        "lambdas": [lam.tolist() for lam in model.stage_lambdas],
        "opt": None,
        "extra": extra or {},
    }
    if opt is not None:
        meta["opt"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                       "eps": opt.eps, "weight_decay": opt.weight_decay,
                       "t": opt.t}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    wire = "<f8" if meta["dtype"] == "f8" else "<f4"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(model.store[name].data.astype(wire).tobytes())
        if opt is not None:
            for name in names:
                fh.write(opt.m[name].astype(wire).tobytes())
            for name in names:
                fh.write(opt.v[name].astype(wire).tobytes())


def load_checkpoint(path) -> tuple[Model, AdamWState | None, dict]:
    """Rebuild a Model (and optimizer state, if saved) from a checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(blob_len).decode())
        config = ModelConfig(**meta["config"])
        model = build_model(config, seed=0)
        model.stage_lambdas = [np.asarray(lam) for lam in meta["lambdas"]]
        wire = "<f8" if meta["dtype"] == "f8" else "<f4"
        itemsize = np.dtype(wire).itemsize

        def read_arrays():
            out = {}
            for name in meta["names"]:
                shape = tuple(meta["shapes"][name])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * itemsize)
                out[name] = np.frombuffer(raw, dtype=wire).reshape(shape).copy()
            return out

        params = read_arrays()
        for name, arr in params.items():
            model.store.replace(name, arr)
        opt = None
        if meta["opt"] is not None:
            o = meta["opt"]
            opt = AdamWState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"],
                             eps=o["eps"], weight_decay=o["weight_decay"],
                             t=o["t"])
            opt.m = read_arrays()
            opt.v = read_arrays()
    return model, opt, meta
