"""Toy-scale training: Adam on an L1 + spectral-difference objective.

Every stochastic choice (batch sampling, crop offsets, flips) draws from
named PCG64 streams derived from the config seed, and log records carry no
timestamps, so two runs over the same data produce byte-identical
checkpoints and byte-identical metric logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .degrade import PairSet
from .metrics import psnr, ssim
from .network import Model, forward, save
from .tensor import GradTape, RngState, ShapeError, Tensor, backward


class NumericError(RuntimeError):
    """Non-finite value where the numerics contract requires a finite one."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    crop: int = 32
    lr: float = 2e-4
    lr_min: float = 1e-6
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_fourier: float = 0.1
    eval_interval: int = 100
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop % 8 != 0 or self.crop < 8:
            raise ValueError(f"crop {self.crop} must be a positive multiple of 8")
        if not 0 < self.lr_min <= self.lr:
            raise ValueError(f"need 0 < lr_min <= lr, got {self.lr_min} vs {self.lr}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_fourier < 0:
            raise ValueError("weight_fourier must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch_size": self.batch_size,
                "crop": self.crop, "lr": self.lr, "lr_min": self.lr_min,
                "betas": list(self.betas), "eps": self.eps,
                "weight_fourier": self.weight_fourier,
                "eval_interval": self.eval_interval, "seed": self.seed}


# ---------------------------------------------------------------------------
# Losses and schedule
# ---------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return T.mean_abs_diff(pred, target)


def fourier_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean |spectrum difference| over all real and imaginary half-spectrum
    entries.  Real and imaginary parts have equal counts, so the joint mean
    is the plain average of the two per-part means."""
    re_p, im_p = T.rfft2(pred)
    re_t, im_t = T.rfft2(target)
    return T.scale(T.add(T.mean_abs_diff(re_p, re_t),
                         T.mean_abs_diff(im_p, im_t)), 0.5)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Half-cosine from lr0 at step 0 to lr_min at total_steps; clamped after."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    t = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def create(cls, params) -> "AdamState":
        m = {name: np.zeros_like(p.data) for name, p in params}
        v = {name: np.zeros_like(p.data) for name, p in params}
        return cls(m=m, v=v, t=0)


def adam_step(params, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.

    All gradients are checked before anything mutates: a single non-finite
    gradient rejects the whole step and names the offending parameter.
    """
    for name, _ in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = grads[name].astype(np.float32, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data[...] = p.data - update.astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(clean: np.ndarray, degraded: np.ndarray, gen, crop: int):
    """Same random crop and flips applied to both images of a pair."""
    if clean.shape != degraded.shape:
        raise ShapeError(f"pair shapes differ: {clean.shape} vs {degraded.shape}")
    h, w = clean.shape[2], clean.shape[3]
    if h < crop or w < crop:
        raise ShapeError(f"image {h}x{w} smaller than crop {crop}")
    oy = int(gen.integers(0, h - crop + 1))
    ox = int(gen.integers(0, w - crop + 1))
    c = clean[:, :, oy:oy + crop, ox:ox + crop]
    d = degraded[:, :, oy:oy + crop, ox:ox + crop]
    if gen.integers(0, 2):
        c, d = c[:, :, :, ::-1], d[:, :, :, ::-1]
    if gen.integers(0, 2):
        c, d = c[:, :, ::-1, :], d[:, :, ::-1, :]
    return np.ascontiguousarray(c), np.ascontiguousarray(d)


# ---------------------------------------------------------------------------
# Evaluation and the loop
# ---------------------------------------------------------------------------

def evaluate(m: Model, pairs: PairSet):
    """Mean restored-vs-clean PSNR and SSIM over a pair set; no autodiff."""
    psnrs, ssims = [], []
    for clean, degraded in zip(pairs.clean, pairs.degraded):
        pred = forward(m, Tensor(degraded))
        restored = np.clip(pred.data, 0.0, 1.0)
        psnrs.append(psnr(restored, clean, 1.0))
        ssims.append(ssim(restored, clean, 1.0))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def trainable_params(m: Model):
    params = list(m.named_params())
    if m.config.lambda_mode == "fixed":
        params = [(n, p) for n, p in params if not n.endswith(".lam")]
    return params


def train(m: Model, train_set: PairSet, val_set: PairSet, cfg: TrainConfig,
          out_dir) -> list:
    """Run the loop; returns the log records also written to metrics.jsonl.

    Per-step records are {step, lr, l1, fourier, total}; evaluation records
    are {step, psnr, ssim}.  The checkpoint is refreshed at every evaluation,
    so a later non-finite abort always leaves the last good weights on disk.
    """
    cfg.validate()
    if len(train_set) < 1 or len(val_set) < 1:
        raise ValueError("train and val sets must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.anyir"
    log_path = out / "metrics.jsonl"

    params = trainable_params(m)
    adam = AdamState.create(params)
    rng = RngState(cfg.seed)
    batch_gen = rng.generator("batch")
    aug_gen = rng.generator("augment")

    records = []
    save(m, ckpt_path, step=0, rng=rng)
    with open(log_path, "w") as log:
        def emit(record):
            records.append(record)
            log.write(json.dumps(record) + "\n")

        for step in range(1, cfg.steps + 1):
            lr = cosine_lr(step - 1, cfg.steps, cfg.lr, cfg.lr_min)
            idx = batch_gen.integers(0, len(train_set), size=cfg.batch_size)
            cs, ds = [], []
            for i in idx:
                c, d = augment(train_set.clean[i], train_set.degraded[i],
                               aug_gen, cfg.crop)
                cs.append(c)
                ds.append(d)
            target = Tensor(np.concatenate(cs, axis=0))
            inp = Tensor(np.concatenate(ds, axis=0))

            with GradTape() as tape:
                pred = forward(m, inp)
                l1 = l1_loss(pred, target)
                fl = fourier_loss(pred, target)
                total = T.add(l1, T.scale(fl, cfg.weight_fourier))
            total_val = float(total.data)
            if not math.isfinite(total_val):
                log.flush()
                raise NumericError(
                    f"non-finite loss at step {step}; last good checkpoint "
                    f"kept at {ckpt_path}")
            grads = backward(total, tape)
            gmap = {name: grads[p] for name, p in params}
            adam_step(params, gmap, adam, lr, cfg.betas, cfg.eps)
            emit({"step": step, "lr": lr, "l1": float(l1.data),
                  "fourier": float(fl.data), "total": total_val})

            if step % cfg.eval_interval == 0 or step == cfg.steps:
                val_psnr, val_ssim = evaluate(m, val_set)
                emit({"step": step, "psnr": val_psnr, "ssim": val_ssim})
                save(m, ckpt_path, step=step, rng=rng)
    return records
