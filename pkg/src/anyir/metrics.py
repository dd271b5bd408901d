"""Analytic cost accounting and image-quality metrics.

MAC counts are derived from the architecture arithmetic alone (no model is
executed).  Convention: one multiply-accumulate = 1 MAC; the FLOP total is
always reported alongside as 2x MACs since published totals rarely say which
convention they use.  Elementwise work (activations, norms, residual adds)
is excluded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import ModelConfig, build, count_params
from .tensor import ShapeError


@dataclass
class CostReport:
    """Per-stage MAC entries plus totals; entries sum exactly to the total."""

    entries: list  # of (stage, kind, macs)
    params: int
    height: int
    width: int

    @property
    def macs_total(self) -> int:
        return sum(m for _, _, m in self.entries)

    @property
    def flops_total(self) -> int:
        return 2 * self.macs_total

    def kind_subtotal(self, kind: str) -> int:
        return sum(m for _, k, m in self.entries if k == kind)

    def to_dict(self) -> dict:
        return {
            "input": {"height": self.height, "width": self.width},
            "params": self.params,
            "entries": [{"stage": s, "kind": k, "macs": m}
                        for s, k, m in self.entries],
            "subtotals": {k: self.kind_subtotal(k)
                          for k in ("conv", "attention", "fft")},
            "macs_total": self.macs_total,
            "flops_total": self.flops_total,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [(s, k, f"{m:,}") for s, k, m in self.entries]
        rows.append(("conv subtotal", "", f"{self.kind_subtotal('conv'):,}"))
        rows.append(("total", "MACs", f"{self.macs_total:,}"))
        rows.append(("total", "FLOPs=2*MACs", f"{self.flops_total:,}"))
        rows.append(("params", "", f"{self.params:,}"))
        rows.append(("input", "", f"{self.height}x{self.width}"))
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        w2 = max(len(r[2]) for r in rows)
        return "\n".join(f"{a:<{w0}}  {b:<{w1}}  {c:>{w2}}" for a, b, c in rows)


def _dab_macs(width: int, heads: int, p: int, cfg: ModelConfig):
    """(conv, attention, fft) MACs of one block of `width` on p pixels."""
    d = width // 2
    hidden = cfg.gated_expansion * d
    dh = d // heads
    conv = (3 * d * d * p + 3 * d * 9 * p + d * d * p        # q/k/v + merge-out
            + d * hidden * p + (hidden // 4) * 9 * p          # expand + depthwise
            + (hidden // 2) * d * p + d * d * p               # gate + proj
            + width * width * p                               # fusion projection
            + 2 * cfg.ffn_expansion * width * width * p)      # ffn up + down
    att = heads * 2 * dh * dh * p
    fft = round(3 * d * 2.5 * p * math.log2(p))
    return conv, att, fft


def count_flops(config: ModelConfig, height: int, width: int) -> CostReport:
    """Analytic cost of one forward pass at the given input size."""
    config.validate()
    if height % 8 != 0 or width % 8 != 0 or height < 8 or width < 8:
        raise ShapeError(f"input size {height}x{width} must be a multiple of 8")
    c = config.embed_dim
    widths = [c, 2 * c, 4 * c, 8 * c]
    pixels = [height * width // (4 ** lvl) for lvl in range(4)]
    entries = []

    def add_stage(stage, width_, heads, blocks, p):
        conv = att = fft = 0
        for _ in range(blocks):
            dc, da, df = _dab_macs(width_, heads, p, config)
            conv += dc
            att += da
            fft += df
        entries.append((stage, "conv", conv))
        entries.append((stage, "attention", att))
        entries.append((stage, "fft", fft))

    entries.append(("patch_embed", "conv", 3 * c * 9 * pixels[0]))
    for lvl in range(3):
        add_stage(f"enc{lvl + 1}", widths[lvl], config.heads_per_level[lvl],
                  config.blocks_per_level[lvl], pixels[lvl])
        # unshuffle quadruples channels and quarters pixels before the adapter
        entries.append((f"down{lvl + 1}", "conv",
                        2 * widths[lvl] * 4 * widths[lvl] * pixels[lvl + 1]))
    add_stage("latent", widths[3], config.heads_per_level[3],
              config.blocks_per_level[3], pixels[3])

    for k, lvl in enumerate((3, 2, 1)):
        w_in = widths[lvl]
        entries.append((f"up{lvl}", "conv", 2 * w_in * w_in * pixels[lvl]))
        if lvl > 1:
            dec_width = widths[lvl - 1]
            entries.append((f"reduce{lvl}", "conv",
                            dec_width * 2 * dec_width * pixels[lvl - 1]))
        else:
            dec_width = 2 * c
        add_stage(f"dec{lvl}", dec_width, config.heads_per_level[lvl - 1],
                  config.blocks_per_level[lvl - 1], pixels[lvl - 1])

    add_stage("refine", 2 * c, config.heads_per_level[0],
              config.refinement_blocks, pixels[0])
    entries.append(("out_conv", "conv", 3 * 2 * c * 9 * pixels[0]))

    return CostReport(entries=entries, params=count_params(build(config)),
                      height=height, width=width)


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, data_range: float) -> float:
    """10*log10(range^2 / MSE) over all elements; +inf for identical inputs."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"shape mismatch: {av.shape} vs {bv.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_kernel():
    coords = np.arange(_SSIM_WIN) - _SSIM_WIN // 2
    g = np.exp(-(coords ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, data_range: float) -> float:
    """Single-scale SSIM, Gaussian 11x11 window, averaged over channels."""
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"shape mismatch: {av.shape} vs {bv.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    h, w = av.shape[-2], av.shape[-1]
    if h < _SSIM_WIN or w < _SSIM_WIN:
        raise ShapeError(f"image {h}x{w} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    kernel = _gaussian_kernel()
    flat_a = av.reshape(-1, h, w)
    flat_b = bv.reshape(-1, h, w)
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    vals = []
    for xa, xb in zip(flat_a, flat_b):
        wa = sliding_window_view(xa, (_SSIM_WIN, _SSIM_WIN))
        wb = sliding_window_view(xb, (_SSIM_WIN, _SSIM_WIN))
        mu_a = np.einsum("hwkl,kl->hw", wa, kernel, optimize=True)
        mu_b = np.einsum("hwkl,kl->hw", wb, kernel, optimize=True)
        e_aa = np.einsum("hwkl,kl->hw", wa * wa, kernel, optimize=True)
        e_bb = np.einsum("hwkl,kl->hw", wb * wb, kernel, optimize=True)
        e_ab = np.einsum("hwkl,kl->hw", wa * wb, kernel, optimize=True)
        var_a = e_aa - mu_a * mu_a
        var_b = e_bb - mu_b * mu_b
        cov = e_ab - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))
