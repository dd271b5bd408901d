"""Command-line interface.

Every subcommand is batch-oriented and deterministic given the effective
configuration, which is echoed as JSON into the output directory whenever one
is written.  Exit codes: 0 success, 2 usage, 3 bad configuration, 4 numeric
failure, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from . import blocks
from .degrade import (DataError, DegradationSpec, composite, degrade,
                      gaussian_noise, haze, load_pairset, load_png,
                      make_pairs, rain, save_pairset, save_png)
from .metrics import count_flops, psnr, ssim
from .network import (CheckpointError, ConfigError, Model, ModelConfig, build,
                      count_params, forward, load, param_breakdown, save,
                      small_config, tiny_config)
from .tensor import GradTape, RngState, Tensor, backward, gradcheck_cases
from .train import (AdamState, NumericError, TrainConfig, adam_step,
                    cosine_lr, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: config file not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return data


def _model_config(args, file_cfg: dict) -> ModelConfig:
    preset = getattr(args, "preset", None)
    base = small_config() if preset == "small" else tiny_config()
    d = base.to_dict()
    d.update(file_cfg.get("model", {}))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    try:
        cfg = ModelConfig.from_dict(d)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from e
    return cfg


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = TrainConfig().to_dict()
    d.update(file_cfg.get("train", {}))
    for flag in ("steps", "batch_size", "crop", "lr", "eval_interval"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    d["betas"] = tuple(d["betas"])
    try:
        cfg = TrainConfig(**d)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e
    return cfg


def _degradation_spec(args, file_cfg: dict) -> DegradationSpec:
    if "degradation" in file_cfg:
        try:
            return DegradationSpec.from_dict(file_cfg["degradation"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid degradation config: {e}") from e
    seed = args.seed if args.seed is not None else 0
    kind = args.kind
    try:
        if kind == "gaussian":
            return gaussian_noise(args.sigma / 255.0, seed=seed)
        if kind == "haze":
            return haze(seed=seed)
        if kind == "rain":
            return rain(seed=seed)
        return composite([gaussian_noise(args.sigma / 255.0), haze()],
                         seed=seed)
    except ValueError as e:
        raise ConfigError(f"invalid degradation: {e}") from e


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_data(args) -> int:
    file_cfg = _read_config_file(args.config)
    spec = _degradation_spec(args, file_cfg)
    out = Path(args.out)
    for split, count in (("train", args.count), ("val", args.val_count)):
        ps = make_pairs(args.source, spec.reseeded(0 if split == "train"
                                                   else 424243),
                        count=count, crop=args.crop, split=split)
        save_pairset(ps, out)
    _echo_config(out, {"degradation": spec.to_dict(),
                       "count": args.count, "val_count": args.val_count,
                       "crop": args.crop, "source": str(args.source)})
    print(f"wrote {args.count}+{args.val_count} pairs under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _read_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    out = Path(args.out)

    if args.data is not None:
        train_set = load_pairset(args.data, "train")
        val_set = load_pairset(args.data, "val")
    else:
        spec = _degradation_spec(args, file_cfg)
        train_set = make_pairs("procedural", spec, args.count, train_cfg.crop)
        val_set = make_pairs("procedural", spec.reseeded(424243),
                             args.val_count, train_cfg.crop, split="val")

    m = build(model_cfg)
    _echo_config(out, {"model": model_cfg.to_dict(),
                       "train": train_cfg.to_dict(),
                       "data": str(args.data) if args.data else "procedural"})
    records = train(m, train_set, val_set, train_cfg, out)
    final_eval = [r for r in records if "psnr" in r][-1]
    print(f"finished {train_cfg.steps} steps: "
          f"val PSNR {final_eval['psnr']:.2f} dB, "
          f"SSIM {final_eval['ssim']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.anyir'}")
    return EXIT_OK


def pad_to_multiple_of_8(data: np.ndarray):
    """Reflect-pad H and W up to the next multiple of 8; returns pad sizes."""
    h, w = data.shape[2], data.shape[3]
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)),
                      mode="reflect")
    return data, ph, pw


def cmd_restore(args) -> int:
    m = load(args.model)
    img = load_png(args.input)
    padded, ph, pw = pad_to_multiple_of_8(img.data)
    pred = forward(m, Tensor(padded))
    h, w = img.shape[2], img.shape[3]
    restored = np.clip(pred.data[:, :, :h, :w], 0.0, 1.0)
    save_png(args.output, restored)
    print(f"restored {args.input} -> {args.output}"
          + (f" (padded by {ph},{pw})" if ph or pw else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    m = load(args.model)
    ps = load_pairset(args.data, args.split)
    rows = []
    for i, (clean, degraded) in enumerate(zip(ps.clean, ps.degraded)):
        padded, _, _ = pad_to_multiple_of_8(degraded)
        pred = forward(m, Tensor(padded))
        restored = np.clip(pred.data[:, :, :clean.shape[2], :clean.shape[3]],
                           0.0, 1.0)
        rows.append((i, psnr(degraded, clean, 1.0), psnr(restored, clean, 1.0),
                     ssim(degraded, clean, 1.0), ssim(restored, clean, 1.0)))
    print(f"{'pair':>4} {'psnr_in':>8} {'psnr_out':>9} "
          f"{'ssim_in':>8} {'ssim_out':>9}")
    for i, p_in, p_out, s_in, s_out in rows:
        print(f"{i:>4} {p_in:>8.2f} {p_out:>9.2f} {s_in:>8.4f} {s_out:>9.4f}")
    mean = [float(np.mean([r[k] for r in rows])) for k in range(1, 5)]
    print(f"{'mean':>4} {mean[0]:>8.2f} {mean[1]:>9.2f} "
          f"{mean[2]:>8.4f} {mean[3]:>9.4f}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args, _read_config_file(args.config))
    m = build(cfg)
    breakdown = param_breakdown(m)
    width = max(len(k) for k in breakdown)
    for k, v in breakdown.items():
        print(f"{k:<{width}}  {v:>12,}")
    total = count_params(m)
    print(f"{'total':<{width}}  {total:>12,}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.json").write_text(json.dumps(
            {"breakdown": breakdown, "total": total}, indent=2) + "\n")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _model_config(args, _read_config_file(args.config))
    try:
        report = count_flops(cfg, args.size, args.size)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.json").write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    tol = 1e-4
    worst_name, worst = None, 0.0
    failed = []
    for name, fn, inputs in gradcheck_cases(seed=args.seed or 0):
        err = T.grad_check(fn, inputs)
        status = "PASS" if err <= tol else "FAIL"
        print(f"{status}  {name:<28} rel err {err:.3e}")
        if err > worst:
            worst_name, worst = name, err
        if err > tol:
            failed.append(name)
    print(f"worst: {worst_name} at {worst:.3e} (tolerance {tol:.0e})")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _selftest_checks():
    """Cheap library-level invariants, one (name, bool) per check."""
    gen = np.random.default_rng(0)
    x = Tensor(gen.normal(0, 1, (2, 6, 8, 8)).astype(np.float32))

    att, gate = T.skip_split(x)
    yield ("skip_merge(skip_split) is the identity",
           np.array_equal(T.skip_merge(att, gate).data, x.data))
    yield ("pixel shuffle inverts unshuffle",
           np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(x)).data, x.data))

    re, im = T.rfft2(x)
    back = T.irfft2(re, im, 8, 8)
    yield ("fft round trip within 1e-5",
           float(np.abs(back.data - x.data).max()) <= 1e-5)
    spec = np.fft.fft2(x.data.astype(np.float64))
    energy = (np.abs(spec) ** 2).sum() / (8 * 8)
    yield ("Parseval energy match within 1e-4",
           abs(energy - (x.data.astype(np.float64) ** 2).sum())
           <= 1e-4 * energy)

    cfg = ModelConfig(embed_dim=4, blocks_per_level=(1, 1, 1, 1),
                      heads_per_level=(1, 1, 1, 1), gated_expansion=2,
                      refinement_blocks=1)
    m = build(cfg)
    img = Tensor(gen.random((1, 3, 16, 16)).astype(np.float32))
    yield ("zero output conv makes the network an identity",
           np.array_equal(forward(m, img).data, img.data))

    with GradTape() as tape:
        loss = T.sum_all(x)
    g = backward(loss, tape)[x]
    yield ("gradient of sum is all ones", np.array_equal(g, np.ones_like(g)))

    const = Tensor(np.full((1, 4, 4, 4), 3.0, dtype=np.float32))
    gain = Tensor(np.ones((4,), dtype=np.float32))
    yield ("layer norm of a constant is zero",
           float(np.abs(T.layer_norm(const, gain).data).max()) <= 1e-4)

    a = np.full((1, 3, 16, 16), 0.4, dtype=np.float32)
    yield ("PSNR anchor at 20 dB",
           abs(psnr(a, a + 0.1, 1.0) - 20.0) <= 0.01)
    rand = gen.random((1, 3, 16, 16))
    yield ("SSIM of identical images is 1", ssim(rand, rand, 1.0) == 1.0)

    yield ("cosine schedule endpoints",
           cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
           and abs(cosine_lr(10, 10, 1e-3, 1e-5) - 1e-5) < 1e-12)

    p = Tensor(gen.normal(0, 1, (3, 3)).astype(np.float32))
    before = p.data.copy()
    state = AdamState.create([("p", p)])
    adam_step([("p", p)], {"p": np.zeros_like(p.data)}, state, lr=1e-3)
    yield ("Adam with zero gradient is a no-op",
           np.array_equal(p.data, before))

    clean = Tensor(gen.random((1, 3, 16, 16)).astype(np.float32))
    yield ("haze with t=1 is the identity",
           np.array_equal(degrade(clean, haze(t=1.0)).data, clean.data))
    alone = degrade(clean, gaussian_noise(0.1, seed=3))
    chained = degrade(clean, composite([haze(t=1.0),
                                        gaussian_noise(0.1, seed=3)]))
    yield ("composite [haze(t=1), noise] equals noise alone",
           np.array_equal(chained.data, alone.data))


def cmd_selftest(args) -> int:
    ok = True
    for name, passed in _selftest_checks():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok = ok and passed
    print("selftest:", "all checks passed" if ok else "FAILURES above")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anyir",
        description="All-in-one image restoration: train, restore, verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        if preset:
            p.add_argument("--preset", choices=("tiny", "small"),
                           default="tiny", help="model preset")

    p = sub.add_parser("make-data", help="generate a degraded pair set")
    common(p, preset=False)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="procedural",
                   help="'procedural' or a directory of clean PNGs")
    p.add_argument("--kind", default="gaussian",
                   choices=("gaussian", "haze", "rain", "noise+haze"))
    p.add_argument("--sigma", type=float, default=25.0,
                   help="noise sigma on the 0-255 scale")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--crop", type=int, default=32)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="pair-set directory from make-data")
    p.add_argument("--kind", default="gaussian",
                   choices=("gaussian", "haze", "rain", "noise+haze"))
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--count", type=int, default=64,
                   help="procedural pair count when --data is absent")
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore one PNG image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM table over a pair set")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter count and breakdown")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("flops", help="MAC/FLOP accounting at a resolution")
    common(p)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="central-difference check of all ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the library invariant suite")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
