"""Command-line harness: train, eval, gradcheck, bench, dump-mask, gen-data.

Every command is deterministic given (config, seed). Metric files contain no
wall-clock values so reruns are byte-identical; timings go to timing.txt.
Exit codes: 0 success, 1 failed threshold or diverged run, 2 usage or config
error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import gradcheck as gc
from . import masks
from . import model as md
from .autodiff import ShapeError, Tensor
from .layer import attention_core
from .masks import VARIANTS, ConfigError, Grid

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# test split gets an unrelated stream even when run seeds are consecutive
TEST_SEED_OFFSET = 1000003


# ---------------------------------------------------------------------------
# flat key=value config files

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(","))


CONFIG_SCHEMA = {
    "arch": str, "depths": _parse_ints, "dims": _parse_ints,
    "heads": _parse_ints, "patch_size": int, "img_size": int,
    "num_classes": int, "variant": str, "alpha": float,
    "use_rope": _parse_bool, "dtype": str,
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "warmup": int, "train_samples": int, "test_samples": int,
    "noise_std": float, "clutter": int, "eval_every": int, "seed": int,
}

DEFAULTS = {
    "arch": "hierarchical", "depths": (2, 2, 2, 2),
    "dims": (32, 64, 96, 128), "heads": (2, 2, 4, 4),
    "patch_size": 4, "img_size": 32, "num_classes": 4,
    "variant": "cag", "alpha": 0.1, "use_rope": True, "dtype": "f32",
    "epochs": 20, "batch_size": 50, "lr": 6e-3, "weight_decay": 0.05,
    "warmup": 100, "train_samples": 5000, "test_samples": 1000,
    "noise_std": 0.5, "clutter": 8, "eval_every": 1, "seed": 0,
}


def load_config_file(path) -> dict:
    """Flat key=value lines; '#' comments; unknown keys are hard errors."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not eq or not key:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {raw.rstrip()!r}")
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = CONFIG_SCHEMA[key](val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for "
                                  f"{key!r}: {exc}") from exc
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in ("seed", "variant", "alpha"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"bad variant {cfg['variant']!r}; "
                          f"choose from {', '.join(VARIANTS)}")
    return cfg


def model_config_from(cfg: dict) -> md.ModelConfig:
    return md.ModelConfig(
        arch=cfg["arch"], depths=cfg["depths"], dims=cfg["dims"],
        heads=cfg["heads"], patch_size=cfg["patch_size"],
        img_size=cfg["img_size"], num_classes=cfg["num_classes"],
        decay_variant=cfg["variant"], alpha=cfg["alpha"],
        use_rope=cfg["use_rope"], dtype=cfg["dtype"])


def task_spec_from(cfg: dict, seed: int) -> dat.TaskSpec:
    return dat.TaskSpec(img_size=cfg["img_size"], noise_std=cfg["noise_std"],
                        clutter=cfg["clutter"], seed=seed)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return list(obj)
    return obj


# ---------------------------------------------------------------------------
# train / eval

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    mc = model_config_from(cfg)
    out = args.out
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()

    if args.data:
        x_tr, y_tr, _ = dat.load_dataset(args.data, "train")
        x_te, y_te, _ = dat.load_dataset(args.data, "test")
    else:
        x_tr, y_tr = dat.generate(task_spec_from(cfg, cfg["seed"]),
                                  cfg["train_samples"])
        x_te, y_te = dat.generate(
            task_spec_from(cfg, cfg["seed"] + TEST_SEED_OFFSET),
            cfg["test_samples"])
    x_tr = x_tr.astype(mc.np_dtype)
    x_te = x_te.astype(mc.np_dtype)

    model = md.build_model(mc, cfg["seed"])
    opt = md.AdamWState.for_store(model.store, lr=cfg["lr"],
                                  weight_decay=cfg["weight_decay"])
    n = len(x_tr)
    bs = min(cfg["batch_size"], n)
    steps_per_epoch = (n + bs - 1) // bs
    total_steps = cfg["epochs"] * steps_per_epoch
    shuffle_rng = np.random.Generator(np.random.PCG64(cfg["seed"] + 97))

    last = {}
    step = 0
    metrics_path = os.path.join(out, "metrics.jsonl")
    try:
        with open(metrics_path, "w") as fh, ad.finite_checks(False):
            for epoch in range(cfg["epochs"]):
                perm = shuffle_rng.permutation(n)
                loss_sum = acc_sum = 0.0
                for lo in range(0, n, bs):
                    idx = perm[lo:lo + bs]
                    lr_now = md.cosine_lr(cfg["lr"], step, total_steps,
                                          cfg["warmup"])
                    rec = md.train_step(model, opt, x_tr[idx], y_tr[idx], lr_now)
                    loss_sum += rec["loss"] * len(idx)
                    acc_sum += rec["acc"] * len(idx)
                    step += 1
                record = {"epoch": epoch,
                          "lr": md.cosine_lr(cfg["lr"], step - 1, total_steps,
                                             cfg["warmup"]),
                          "train_loss": loss_sum / n, "train_acc": acc_sum / n}
                if (epoch + 1) % cfg["eval_every"] == 0 \
                        or epoch == cfg["epochs"] - 1:
                    ev = md.evaluate(model, x_te, y_te)
                    record["test_loss"] = ev["loss"]
                    record["test_acc"] = ev["acc"]
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                print(json.dumps(record, sort_keys=True))
                last = record
    except md.TrainingDiverged as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_FAIL

    summary = {"config": _json_ready(cfg), "final": last,
               "total_steps": total_steps,
               "param_count": model.store.total_params()}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    md.save_checkpoint(os.path.join(out, "checkpoint.bin"), model, opt,
                       step=total_steps, extra={"seed": cfg["seed"]})
    with open(os.path.join(out, "timing.txt"), "w") as fh:
        fh.write(f"wall_seconds={time.perf_counter() - t0:.3f}\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, _, meta = md.load_checkpoint(args.ckpt)
    if args.data:
        x, y, _ = dat.load_dataset(args.data, args.split)
    else:
        seed = cfg["seed"] + TEST_SEED_OFFSET
        x, y = dat.generate(task_spec_from(cfg, seed), cfg["test_samples"])
    x = x.astype(model.config.np_dtype)
    with ad.finite_checks(False):
        ev = md.evaluate(model, x, y)
    result = {"acc": ev["acc"], "loss": ev["loss"], "n": len(x),
              "ckpt_step": meta["step"]}
    print(json.dumps(result, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump(result, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

OP_TOL, LAYER_TOL, MODEL_TOL = 1e-6, 1e-4, 1e-3


def cmd_gradcheck(args) -> int:
    offenders = []
    if args.scope in ("op", "all"):
        results = gc.run_op_checks(args.seed)
        worst = max(err for _, err in results)
        print(f"op        worst {worst:.3e}  (tol {OP_TOL:.0e}, "
              f"{len(results)} cases)")
        offenders += [(f"op:{name}", err, OP_TOL)
                      for name, err in results if err > OP_TOL]
    if args.scope in ("layer", "all"):
        for label, route in (("full", False), ("decomposed", True)):
            errs = gc.run_layer_check(args.seed, decomposed_route=route)
            worst = max(errs.values())
            print(f"layer.{label:<10} worst {worst:.3e}  (tol {LAYER_TOL:.0e}, "
                  f"{len(errs)} params)")
            offenders += [(f"layer.{label}:{name}", err, LAYER_TOL)
                          for name, err in errs.items() if err > LAYER_TOL]
    if args.scope in ("model", "all"):
        results = gc.run_model_checks(args.seed)
        worst = max(err for _, err in results)
        print(f"model     worst {worst:.3e}  (tol {MODEL_TOL:.0e}, "
              f"{len(results)} variants)")
        offenders += [(f"model:{variant}", err, MODEL_TOL)
                      for variant, err in results if err > MODEL_TOL]
    if offenders:
        print("threshold breaches:", file=sys.stderr)
        for name, err, tol in offenders:
            print(f"  {name}: {err:.3e} > {tol:.0e}", file=sys.stderr)
        return EXIT_FAIL
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def _bench_inputs(rng, grid: Grid, n_heads: int, head_dim: int, dim: int):
    x = Tensor(rng.normal(0.0, 1.0, (1, grid.h, grid.w, dim)))
    qkv = [Tensor(rng.normal(0.0, 1.0, (1, n_heads, grid.l, head_dim)))
           for _ in range(3)]
    w_g = Tensor(rng.normal(0.0, 0.5, (dim, n_heads)))
    w_gh = Tensor(rng.normal(0.0, 0.5, (dim, n_heads)))
    w_gw = Tensor(rng.normal(0.0, 0.5, (dim, n_heads)))
    return x, qkv, w_g, w_gh, w_gw


def _time_full(x, qkv, w_g, grid, alpha=0.1) -> float:
    q, k, v = qkv
    t0 = time.perf_counter()
    gates = masks.gates_from_logits(masks.gate_logits(x, w_g))
    mask = masks.fused_mask(gates, grid, alpha)
    attention_core(q, k, v, mask.bias)
    return time.perf_counter() - t0


def _time_decomposed(x, qkv, w_gh, w_gw, grid) -> float:
    q, k, v = qkv
    b, n, _, dk = q.shape
    t0 = time.perf_counter()
    mask_h, mask_w = masks.decomposed_masks(x, w_gh, w_gw, grid)
    to_rows = (1, n, grid.h, grid.w, dk)
    qr = ad.reshape(q, to_rows)
    kr = ad.reshape(k, to_rows)
    vr = ad.reshape(v, to_rows)
    o_w = attention_core(qr, kr, vr, mask_w.bias)
    swap = (0, 1, 3, 2, 4)
    o = attention_core(ad.transpose(qr, swap), ad.transpose(kr, swap),
                       ad.transpose(o_w, swap), mask_h.bias)
    ad.transpose(o, swap)
    return time.perf_counter() - t0


def _bench_grid(grid: Grid, n_heads: int, head_dim: int, reps: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(0))
    dim = n_heads * head_dim
    x, qkv, w_g, w_gh, w_gw = _bench_inputs(rng, grid, n_heads, head_dim, dim)
    with ad.finite_checks(False):
        t_full = min(_time_full(x, qkv, w_g, grid) for _ in range(reps))
        t_dec = min(_time_decomposed(x, qkv, w_gh, w_gw, grid)
                    for _ in range(reps))
    full_e = masks.mask_memory_footprint("full", grid, 1)
    dec_e = masks.mask_memory_footprint("decomposed", grid, 1)
    return {"h": grid.h, "w": grid.w, "l": grid.l,
            "full_elems": full_e, "dec_elems": dec_e,
            "elem_ratio": full_e / dec_e,
            "t_full_s": t_full, "t_dec_s": t_dec,
            "time_ratio": t_full / t_dec,
            "savings": "yes" if dec_e < full_e else "no savings"}


BENCH_COLS = ("h", "w", "l", "full_elems", "dec_elems", "elem_ratio",
              "t_full_s", "t_dec_s", "time_ratio", "savings")


def _bench_table(rows: list) -> str:
    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)
    cells = [[fmt(r[c]) for c in BENCH_COLS] for r in rows]
    widths = [max(len(col), max(len(row[i]) for row in cells))
              for i, col in enumerate(BENCH_COLS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(BENCH_COLS, widths))]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_bench(args) -> int:
    sizes = _parse_ints(args.grids)
    if any(s < 1 for s in sizes):
        raise ConfigError(f"bad grid sizes {args.grids!r}")
    rows = [_bench_grid(Grid(s, s), args.heads, args.head_dim, args.reps)
            for s in sizes]
    # degenerate flat grid: with H=1 the per-axis masks cost W^2 + W,
    # which can never beat the full W^2
    rows.append(_bench_grid(Grid(1, max(sizes)), args.heads,
                            args.head_dim, args.reps))
    print(_bench_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w") as fh:
            fh.write(",".join(BENCH_COLS) + "\n")
            for r in rows:
                fh.write(",".join(str(r[c]) for c in BENCH_COLS) + "\n")
        with open(os.path.join(args.out, "bench.txt"), "w") as fh:
            fh.write(_bench_table(rows) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dump-mask

def _dump_features(args, grid: Grid, dim: int, rng) -> Tensor:
    if args.image:
        arr = np.load(args.image)
        if arr.ndim == 3 and arr.shape[-1] == 1:
            arr = arr[..., 0]
        if arr.shape != (grid.h, grid.w):
            raise ShapeError(f"image {arr.shape} does not match grid "
                             f"{grid.h}x{grid.w}")
        proj = rng.normal(0.0, 1.0, (1, dim))
        return Tensor(arr.reshape(1, grid.h, grid.w, 1) @ proj)
    return Tensor(rng.normal(0.0, 1.0, (1, grid.h, grid.w, dim)))


def _write_mask(path_stem: str, mat: np.ndarray, header: str,
                want_pgm: bool) -> list:
    txt = path_stem + ".txt"
    masks.save_mask_text(txt, mat, header)
    written = [txt]
    if want_pgm:
        pgm = path_stem + ".pgm"
        masks.save_mask_pgm(pgm, mat)
        written.append(pgm)
    return written


def cmd_dump_mask(args) -> int:
    hw = args.grid.lower().split("x")
    if len(hw) != 2:
        raise ConfigError(f"grid must look like 8x8, got {args.grid!r}")
    grid = Grid(int(hw[0]), int(hw[1]))
    variant = args.variant or "cag"
    alpha = args.alpha if args.alpha is not None else 0.1
    n, dim = args.heads, args.dim
    rng = np.random.Generator(np.random.PCG64(args.seed))
    x = _dump_features(args, grid, dim, rng)
    os.makedirs(args.out, exist_ok=True)
    written = []

    def full_bias() -> np.ndarray:
        if variant == "none":
            return np.zeros((1, n, grid.l, grid.l))
        if variant == "fixed":
            return masks.fixed_spatial_mask(grid, masks.default_lambdas(n)).bias.data
        gates = masks.gates_from_logits(
            masks.gate_logits(x, Tensor(rng.normal(0.0, 0.5, (dim, n)))))
        if variant == "cag":
            return masks.fused_mask(gates, grid, alpha).bias.data
        direction = "forward" if variant == "1d" else "bidirectional"
        return masks.mask_1d(gates.values, direction).bias.data

    if variant == "decomposed":
        w_gh = Tensor(rng.normal(0.0, 0.5, (dim, n)))
        w_gw = Tensor(rng.normal(0.0, 0.5, (dim, n)))
        mask_h, mask_w = masks.decomposed_masks(x, w_gh, w_gw, grid)
        for head in range(n):
            for w_idx in range(grid.w):  # mask_h: one H x H matrix per column
                header = masks.format_mask_header(
                    variant, grid, 0, head, alpha,
                    extra={"axis": "h", "row": w_idx})
                stem = os.path.join(args.out, f"mask_b0_n{head}_h_row{w_idx}")
                written += _write_mask(stem, mask_h.bias.data[0, head, w_idx],
                                       header, args.pgm)
            for h_idx in range(grid.h):  # mask_w: one W x W matrix per row
                header = masks.format_mask_header(
                    variant, grid, 0, head, alpha,
                    extra={"axis": "w", "row": h_idx})
                stem = os.path.join(args.out, f"mask_b0_n{head}_w_row{h_idx}")
                written += _write_mask(stem, mask_w.bias.data[0, head, h_idx],
                                       header, args.pgm)
    else:
        bias = full_bias()
        head_alpha = alpha if variant == "cag" else None
        for b in range(bias.shape[0]):
            for head in range(n):
                header = masks.format_mask_header(variant, grid, b, head,
                                                  head_alpha)
                stem = os.path.join(args.out, f"mask_b{b}_n{head}")
                written += _write_mask(stem, bias[b, head], header, args.pgm)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    spec = dat.TaskSpec(img_size=args.img_size, noise_std=args.noise_std,
                        clutter=args.clutter, seed=args.seed)
    x, y = dat.generate(spec, args.train)
    dat.save_dataset(args.out, "train", x, y, spec)
    test_spec = dat.TaskSpec(img_size=args.img_size, noise_std=args.noise_std,
                             clutter=args.clutter,
                             seed=args.seed + TEST_SEED_OFFSET)
    x, y = dat.generate(test_spec, args.test)
    dat.save_dataset(args.out, "test", x, y, test_spec)
    print(f"wrote {args.train} train / {args.test} test samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialdecay",
        description="Spatial decay attention harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--variant", choices=VARIANTS, default=None)
        p.add_argument("--alpha", type=float, default=None)

    p = sub.add_parser("train", help="train one variant on the synthetic task")
    common(p, out_default="out")
    p.add_argument("--data", help="dataset dir from gen-data (else synthetic)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", help="dataset dir from gen-data (else synthetic)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=("op", "layer", "model", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="full vs decomposed cost sweep")
    p.add_argument("--grids", default="8,16,32",
                   help="comma-separated square grid sides")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-mask", help="write per-head mask matrices")
    common(p, out_default="masks_out")
    p.add_argument("--grid", default="8x8", help="HxW")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dim", type=int, default=16,
                   help="feature dim for gate projections")
    p.add_argument("--image", help=".npy image matching the grid")
    p.add_argument("--pgm", action="store_true", help="also write heatmaps")
    p.set_defaults(func=cmd_dump_mask)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--img-size", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--clutter", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
