"""Core feature blocks.

A block of width C splits its channels into two interleaved halves: one half
runs channel attention (tokens are channels, descriptors are flattened pixels)
and the other runs a gated local module whose temperature reacts to feature
statistics.  The halves are recombined twice, once in the spatial domain and
once in the frequency domain, blended by a scalar, projected, and passed
through a small FFN.  Every sub-op here is residual-friendly: zeroing the
final projection of any branch turns it into an exact passthrough.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_SPLIT_RATIO = (0.25, 0.25, 0.5)  # (alpha, beta, gamma) fractions of hidden


def kaiming_uniform(gen, shape, fan_in) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(gen.uniform(-bound, bound, size=shape).astype(np.float32))


def conv_weight(gen, cout, cin_g, kh, kw) -> Tensor:
    return kaiming_uniform(gen, (cout, cin_g, kh, kw), cin_g * kh * kw)


def _ones(n) -> Tensor:
    return Tensor(np.ones(n, dtype=np.float32))


def _scalar(v) -> Tensor:
    return Tensor(np.array([v], dtype=np.float32))


@dataclass
class AttentionParams:
    """Channel attention weights for one branch of width `channels`.

    Q, K, V are each produced by a pointwise conv followed by a depthwise
    3x3; `temp` holds one learnable logit scale per head.
    """

    heads: int
    q: Tensor
    q_dw: Tensor
    k: Tensor
    k_dw: Tensor
    v: Tensor
    v_dw: Tensor
    out: Tensor
    temp: Tensor

    @classmethod
    def create(cls, gen, channels: int, heads: int) -> "AttentionParams":
        if heads < 1 or channels % heads != 0:
            raise ShapeError(f"heads={heads} must divide channels={channels}")

        def point():
            return conv_weight(gen, channels, channels, 1, 1)

        def depth():
            return conv_weight(gen, channels, 1, 3, 3)

        return cls(heads=heads,
                   q=point(), q_dw=depth(),
                   k=point(), k_dw=depth(),
                   v=point(), v_dw=depth(),
                   out=point(),
                   temp=_ones(heads))

    def named(self, prefix: str):
        for n in ("q", "q_dw", "k", "k_dw", "v", "v_dw", "out", "temp"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class GatedDAParams:
    """Weights of the gated local module on `channels` inputs.

    `expand` maps to hidden = r * channels, split as (gamma, beta, alpha);
    the gating product needs len(gamma) == len(beta) + len(alpha), which
    constrains the gamma fraction to 1/2.
    """

    norm_gain: Tensor
    expand: Tensor
    depth: Tensor
    gate: Tensor
    proj: Tensor
    tau: Tensor
    sizes: tuple  # (gamma, beta, alpha) channel counts

    @classmethod
    def create(cls, gen, channels: int, expansion: int,
               split_ratio=DEFAULT_SPLIT_RATIO) -> "GatedDAParams":
        hidden = expansion * channels
        fa, fb, fg = split_ratio
        if abs(fa + fb + fg - 1.0) > 1e-9:
            raise ShapeError(f"split fractions {split_ratio} must sum to 1")
        sa, sb, sg = (round(hidden * f) for f in (fa, fb, fg))
        if min(sa, sb, sg) < 1 or sa + sb + sg != hidden:
            raise ShapeError(
                f"split {split_ratio} of hidden={hidden} gives non-positive "
                f"or non-integral part sizes ({sg}, {sb}, {sa})")
        if sg != sa + sb:
            raise ShapeError(
                f"gating needs the gamma part ({sg}) to equal beta+alpha ({sb + sa})")
        return cls(norm_gain=_ones(channels),
                   expand=conv_weight(gen, hidden, channels, 1, 1),
                   depth=conv_weight(gen, sa, 1, 3, 3),
                   gate=conv_weight(gen, channels, sg, 1, 1),
                   proj=conv_weight(gen, channels, channels, 1, 1),
                   tau=_scalar(1.0),
                   sizes=(sg, sb, sa))

    def named(self, prefix: str):
        for n in ("norm_gain", "expand", "depth", "gate", "proj", "tau"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class FusionParams:
    """Blend weight between the spatial and frequency recombinations."""

    lam: Tensor
    weight: Tensor
    lambda_mode: str  # "learnable" or "fixed"

    @classmethod
    def create(cls, gen, channels: int, lambda_mode: str = "learnable",
               lambda_init: float = 0.5) -> "FusionParams":
        if lambda_mode not in ("learnable", "fixed"):
            raise ValueError(f"unknown lambda_mode {lambda_mode!r}")
        return cls(lam=_scalar(lambda_init),
                   weight=conv_weight(gen, channels, channels, 1, 1),
                   lambda_mode=lambda_mode)

    def named(self, prefix: str):
        yield f"{prefix}.lam", self.lam
        yield f"{prefix}.weight", self.weight


@dataclass
class FFNParams:
    norm_gain: Tensor
    up: Tensor
    down: Tensor

    @classmethod
    def create(cls, gen, channels: int, expansion: int) -> "FFNParams":
        if expansion < 1:
            raise ValueError(f"ffn expansion must be >= 1, got {expansion}")
        mid = expansion * channels
        return cls(norm_gain=_ones(channels),
                   up=conv_weight(gen, mid, channels, 1, 1),
                   down=conv_weight(gen, channels, mid, 1, 1))

    def named(self, prefix: str):
        for n in ("norm_gain", "up", "down"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class DABParams:
    """One full block of width `channels` (even; each branch gets half)."""

    pre_norm_gain: Tensor
    attention: AttentionParams
    gated: GatedDAParams
    fusion: FusionParams
    ffn: FFNParams

    @classmethod
    def create(cls, gen, channels: int, heads: int, ffn_expansion: int,
               gated_expansion: int, lambda_mode: str = "learnable",
               split_ratio=DEFAULT_SPLIT_RATIO) -> "DABParams":
        if channels % 2 != 0:
            raise ShapeError(f"block width must be even, got {channels}")
        half = channels // 2
        return cls(pre_norm_gain=_ones(channels),
                   attention=AttentionParams.create(gen, half, heads),
                   gated=GatedDAParams.create(gen, half, gated_expansion, split_ratio),
                   fusion=FusionParams.create(gen, channels, lambda_mode),
                   ffn=FFNParams.create(gen, channels, ffn_expansion))

    def named(self, prefix: str):
        yield f"{prefix}.pre_norm_gain", self.pre_norm_gain
        yield from self.attention.named(f"{prefix}.att")
        yield from self.gated.named(f"{prefix}.gate")
        yield from self.fusion.named(f"{prefix}.fuse")
        yield from self.ffn.named(f"{prefix}.ffn")


# ---------------------------------------------------------------------------
# Forward functions
# ---------------------------------------------------------------------------

def channel_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Transposed attention: a (C/h x C/h) map per head over pixel descriptors."""
    n, c, h, w = x.shape
    if c % p.heads != 0:
        raise ShapeError(f"heads={p.heads} must divide channels={c}")
    q = T.conv2d(T.conv2d(x, p.q), p.q_dw, groups=c)
    k = T.conv2d(T.conv2d(x, p.k), p.k_dw, groups=c)
    v = T.conv2d(T.conv2d(x, p.v), p.v_dw, groups=c)
    dh = c // p.heads
    hw = h * w
    qm = T.l2_normalize(T.reshape(q, (n, p.heads, dh, hw)), axis=-1)
    km = T.l2_normalize(T.reshape(k, (n, p.heads, dh, hw)), axis=-1)
    vm = T.reshape(v, (n, p.heads, dh, hw))
    logits = T.mul(T.matmul(qm, T.transpose_last2(km)),
                   T.reshape(p.temp, (1, p.heads, 1, 1)))
    attn = T.softmax(logits, axis=-1)
    merged = T.reshape(T.matmul(attn, vm), (n, c, h, w))
    return T.conv2d(merged, p.out)


def gated_da(x: Tensor, p: GatedDAParams) -> Tensor:
    """Gated local module with statistics-modulated temperature."""
    n = x.shape[0]
    xn = T.layer_norm(x, p.norm_gain)
    mu, sd = T.channel_stats(xn)
    # one scalar per sample so the factor broadcasts over any part width
    delta = T.sigmoid(T.mean_axes(T.add(mu, sd), (1,), keepdims=True))
    factor = T.reshape(T.add_const(T.mul(p.tau, delta), 1.0), (n, 1, 1, 1))
    expanded = T.conv2d(xn, p.expand)
    gamma, beta, alpha = T.split(expanded, p.sizes, axis=1)
    alpha_p = T.mul(T.conv2d(alpha, p.depth, groups=p.sizes[2]), factor)
    gated = T.conv2d(T.mul(T.gelu(gamma), T.concat([beta, alpha_p], axis=1)), p.gate)
    return T.conv2d(T.add(gated, x), p.proj)


def spatial_fusion(f_att: Tensor, f_gate: Tensor) -> Tensor:
    """Cross-enhance the two halves and stack them back to full width."""
    if f_att.shape != f_gate.shape:
        raise ShapeError(f"branch shapes differ: {f_att.shape} vs {f_gate.shape}")
    f_ag = T.add(f_att, T.sigmoid(f_gate))
    f_ga = T.add(f_gate, T.sigmoid(f_att))
    return T.concat([f_ag, f_ga], axis=1)


def frequency_fusion(f_att: Tensor, f_gate: Tensor) -> Tensor:
    """Sum the half-spectra, invert, and repeat channels to full width."""
    if f_att.shape != f_gate.shape:
        raise ShapeError(f"branch shapes differ: {f_att.shape} vs {f_gate.shape}")
    h, w = f_att.shape[2], f_att.shape[3]
    re_a, im_a = T.rfft2(f_att)
    re_g, im_g = T.rfft2(f_gate)
    freq = T.irfft2(T.add(re_a, re_g), T.add(im_a, im_g), h, w)
    return T.concat([freq, freq], axis=1)


def sf_fuse(f_att: Tensor, f_gate: Tensor, f_in: Tensor, p: FusionParams) -> Tensor:
    """lam-weighted blend of both recombinations, projected, plus F_in."""
    fs = spatial_fusion(f_att, f_gate)
    ff = frequency_fusion(f_att, f_gate)
    blend = T.add(T.mul(fs, p.lam), T.mul(ff, T.rsub_const(1.0, p.lam)))
    return T.add(T.conv2d(blend, p.weight), f_in)


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    z = T.conv2d(T.gelu(T.conv2d(T.layer_norm(x, p.norm_gain), p.up)), p.down)
    return T.add(z, x)


def dab_forward(f_in: Tensor, p: DABParams) -> Tensor:
    xn = T.layer_norm(f_in, p.pre_norm_gain)
    a, g = T.skip_split(xn)
    f_att = channel_attention(a, p.attention)
    f_gate = gated_da(g, p.gated)
    fused = sf_fuse(f_att, f_gate, f_in, p.fusion)
    return ffn(fused, p.ffn)
