"""Dense rank-4 tensors and a taped reverse-mode differentiation engine.

Everything the network needs runs through the operations in this module:
convolution, activations, normalization, channel statistics, real 2-D FFT,
pixel shuffle/unshuffle, the interleaved channel split, and a handful of
elementwise/reduction primitives.  Each differentiable operation records a
node on the active :class:`GradTape`; :func:`backward` replays the tape in
exact reverse execution order and accumulates gradients per tensor.

Model state is float32.  float64 is used only for verification: the
central-difference checker :func:`grad_check` promotes its inputs so the
finite-difference noise floor sits well below the pass tolerance.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class ShapeError(ValueError):
    """An operation rejected its inputs because the extents do not line up."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """A dense array of up to 4 extents with an optional gradient requirement.

    `data` is an ndarray in row-major order, float32 for model state.  A
    float64 array is kept as-is so verification code can run the same ops in
    extended precision.  Tensors are treated as immutable once produced by an
    op; only the optimizer mutates parameter arrays in place, after the tape
    that saw them has been consumed.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported rank 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_ACTIVE_TAPES: list["GradTape"] = []


class _Node:
    __slots__ = ("inputs", "outputs", "backfn")

    def __init__(self, inputs, outputs, backfn):
        self.inputs = inputs      # tuple of input Tensors, op order
        self.outputs = outputs    # tuple of output Tensors
        self.backfn = backfn      # list of output grads -> list of input grads


class GradTape:
    """Ordered record of the differentiable ops executed under this tape.

    Execution order is a topological order of the forward graph, so replaying
    the node list reversed satisfies the chain rule without an explicit sort.
    One training step records and consumes one tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def record(self, inputs, outputs, backfn):
        self.nodes.append(_Node(tuple(inputs), tuple(outputs), backfn))


def _emit(inputs, outputs, backfn):
    """Record a node on the innermost active tape; the tape is the opt-in."""
    if _ACTIVE_TAPES:
        for o in outputs:
            o.requires_grad = True
        _ACTIVE_TAPES[-1].record(inputs, outputs, backfn)
    return outputs[0] if len(outputs) == 1 else outputs


class Gradients:
    """Gradient map keyed by tensor identity.

    Lookups for tensors that never influenced the loss return exact zeros of
    the tensor's shape, so "unused input has zero gradient" holds by
    construction.
    """

    def __init__(self, store):
        self._store = store  # id(tensor) -> (tensor, ndarray)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        entry = self._store.get(id(t))
        if entry is None:
            return np.zeros_like(t.data)
        return entry[1]

    def get(self, t: Tensor) -> np.ndarray:
        return self[t]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Reverse-replay `tape` from scalar `loss`; returns per-tensor gradients."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    store: dict[int, list] = {}
    store[id(loss)] = [loss, np.ones_like(loss.data)]
    for node in reversed(tape.nodes):
        if not any(id(o) in store for o in node.outputs):
            continue
        gouts = [store[id(o)][1] if id(o) in store else np.zeros_like(o.data)
                 for o in node.outputs]
        gins = node.backfn(gouts)
        for t, g in zip(node.inputs, gins):
            if g is None:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"adjoint produced shape {g.shape} for input of shape {t.data.shape}")
            entry = store.get(id(t))
            if entry is None:
                # copy: adjoints may hand back views into buffers they reuse
                store[id(t)] = [t, np.array(g)]
            else:
                entry[1] += g
    return Gradients(store)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Root randomness: a 64-bit seed feeding numpy's PCG64 generator.

    Independent streams are derived per purpose through SeedSequence spawn
    keys, so init / augmentation / degradation randomness never interleave.
    Identical seed and call sequence give an identical value stream.
    """

    seed: int
    algorithm: str = "pcg64"

    def generator(self, *route) -> np.random.Generator:
        """Child generator for a purpose route, e.g. ("init",) or ("degrade", 7)."""
        key = tuple(_route_label(part) for part in route)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(seq))


def _route_label(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, the adjoint of numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def back(gouts):
        g = gouts[0]
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _emit((a, b), (out,), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def back(gouts):
        g = gouts[0]
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _emit((a, b), (out,), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def back(gouts):
        g = gouts[0]
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return _emit((a, b), (out,), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return _emit((x,), (out,), lambda gouts: [gouts[0] * c])


def add_const(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + float(c))
    return _emit((x,), (out,), lambda gouts: [gouts[0]])


def rsub_const(c: float, x: Tensor) -> Tensor:
    """c - x, used for (1 - lambda) style complements."""
    out = Tensor(float(c) - x.data)
    return _emit((x,), (out,), lambda gouts: [-gouts[0]])


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.data.reshape(shape))
    return _emit((x,), (out,), lambda gouts: [gouts[0].reshape(x.data.shape)])


def transpose_last2(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2).copy())
    return _emit((x,), (out,), lambda gouts: [np.swapaxes(gouts[0], -1, -2)])


def concat(parts, axis=1) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def back(gouts):
        return [np.ascontiguousarray(piece)
                for piece in np.split(gouts[0], np.cumsum(sizes)[:-1], axis=axis)]

    return _emit(tuple(parts), (out,), back)


def split(x: Tensor, sizes, axis=1):
    """Split along `axis` into len(sizes) tensors; sizes must sum to the extent."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(
            f"split sizes {sizes} do not sum to extent {x.data.shape[axis]} on axis {axis}")
    pieces = np.split(x.data, np.cumsum(sizes)[:-1], axis=axis)
    outs = tuple(Tensor(np.ascontiguousarray(p)) for p in pieces)

    def back(gouts):
        return [np.concatenate(gouts, axis=axis)]

    return _emit((x,), outs, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over identical leading extents."""
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def back(gouts):
        g = gouts[0]
        return [np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g)]

    return _emit((a, b), (out,), back)


def mean_axes(x: Tensor, axes, keepdims=False) -> Tensor:
    axes = tuple(int(a) for a in axes)
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))
    count = 1
    for a in axes:
        count *= x.data.shape[a]

    def back(gouts):
        g = gouts[0]
        if not keepdims:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, x.data.shape) / count]

    return _emit((x,), (out,), back)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    return _emit((x,), (out,), lambda gouts: [np.broadcast_to(gouts[0], x.data.shape).astype(x.data.dtype)])


def mean_abs_diff(a: Tensor, b: Tensor) -> Tensor:
    """Scalar mean |a - b|; the L1 building block for both losses."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray(np.abs(diff).mean(), dtype=a.data.dtype))
    n = diff.size

    def back(gouts):
        g = gouts[0] * np.sign(diff) / n
        return [g, -g]

    return _emit((a, b), (out,), back)


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact error-function GELU: y = x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor((x.data * cdf).astype(x.data.dtype))

    def back(gouts):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return [(gouts[0] * (cdf + x.data * pdf)).astype(x.data.dtype)]

    return _emit((x,), (out,), back)


def sigmoid(x: Tensor) -> Tensor:
    # computed from the negative side only, so exp never overflows
    y = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = Tensor(y.astype(x.data.dtype))

    def back(gouts):
        return [(gouts[0] * y * (1.0 - y)).astype(x.data.dtype)]

    return _emit((x,), (out,), back)


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(x.data.dtype))

    def back(gouts):
        g = gouts[0]
        inner = (g * y).sum(axis=axis, keepdims=True)
        return [(y * (g - inner)).astype(x.data.dtype)]

    return _emit((x,), (out,), back)


LAYER_NORM_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor) -> Tensor:
    """Bias-free channel LayerNorm.

    At every (n, h, w) location the channel vector is shifted to zero mean and
    scaled to unit variance (stabilized by 1e-6), then multiplied by the
    per-channel gain.  No additive bias anywhere.
    """
    if x.ndim != 4:
        raise ShapeError(f"layer_norm expects rank 4, got {x.ndim}")
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"gain shape {gain.shape} does not match channels {x.shape[1]}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    gcol = gain.data.reshape(1, -1, 1, 1)
    out = Tensor((xhat * gcol).astype(x.data.dtype))

    def back(gouts):
        g = gouts[0]
        ghat = g * gcol
        m1 = ghat.mean(axis=1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=1, keepdims=True)
        gx = ((ghat - m1 - xhat * m2) * inv).astype(x.data.dtype)
        ggain = (g * xhat).sum(axis=(0, 2, 3)).astype(gain.data.dtype)
        return [gx, ggain]

    return _emit((x, gain), (out,), back)


CHANNEL_STATS_DELTA = 1e-5


def spatial_mean(x: Tensor) -> Tensor:
    """Per-(n, c) mean over the spatial extent; shape [N, C]."""
    out = Tensor(x.data.mean(axis=(2, 3)))
    hw = x.shape[2] * x.shape[3]

    def back(gouts):
        return [np.broadcast_to(gouts[0][:, :, None, None], x.data.shape) / hw]

    return _emit((x,), (out,), back)


def spatial_std(x: Tensor) -> Tensor:
    """Per-(n, c) sqrt(spatial variance + delta); delta fixed at 1e-5."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3))
    sd = np.sqrt(var + CHANNEL_STATS_DELTA)
    out = Tensor(sd.astype(x.data.dtype))
    hw = x.shape[2] * x.shape[3]

    def back(gouts):
        # d var / d x_i = 2 (x_i - mu) / HW; the mu term cancels exactly
        g = gouts[0][:, :, None, None]
        return [(g * centered / (hw * sd[:, :, None, None])).astype(x.data.dtype)]

    return _emit((x,), (out,), back)


def channel_stats(x: Tensor):
    """(mu, sd) per (n, c) as Alg-style spatial statistics."""
    return spatial_mean(x), spatial_std(x)


def l2_normalize(x: Tensor, axis=-1, eps=1e-12) -> Tensor:
    """x / sqrt(sum(x^2, axis) + eps); the Q/K descriptor normalization."""
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    y = x.data * inv
    out = Tensor(y.astype(x.data.dtype))

    def back(gouts):
        g = gouts[0]
        inner = (g * y).sum(axis=axis, keepdims=True)
        return [((g - y * inner) * inv).astype(x.data.dtype)]

    return _emit((x,), (out,), back)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    """Standard cross-correlation with optional channel groups.

    `padding` defaults to (k - 1) / 2 so stride-1 convs preserve spatial size.
    Kernel extents 1 and 3 are the ones the architecture uses; the
    implementation is general over odd kernels.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got rank {weight.ndim}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g} input channels per group, input provides {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match out channels {cout}")
    if padding is None:
        padding = (kh - 1) // 2
    p, s = int(padding), int(stride)

    out_arr = _conv2d_raw(x.data, weight.data, p, s, groups)
    if bias is not None:
        out_arr = out_arr + bias.data.reshape(1, -1, 1, 1)
    out = Tensor(out_arr)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(gouts):
        g = gouts[0]
        gx = _conv2d_input_grad(g, weight.data, x.data.shape, p, s, groups)
        gw = _conv2d_weight_grad(g, x.data, weight.data.shape, p, s, groups)
        if bias is None:
            return [gx, gw]
        return [gx, gw, g.sum(axis=(0, 2, 3)).astype(bias.data.dtype)]

    return _emit(inputs, (out,), back)


def _conv2d_raw(x, w, p, s, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if kh == 1 and kw == 1 and s == 1 and groups == 1:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))
        return np.ascontiguousarray(np.moveaxis(out, 0, 1))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    if groups == cin and cin_g == 1 and cout == cin:
        out = np.einsum("nchwkl,ckl->nchw", win, w[:, 0], optimize=True)
        return np.ascontiguousarray(out)
    ho, wo = win.shape[2], win.shape[3]
    wing = win.reshape(n, groups, cin // groups, ho, wo, kh, kw)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    out = np.einsum("ngihwkl,goikl->ngohw", wing, wg, optimize=True)
    return np.ascontiguousarray(out.reshape(n, cout, ho, wo))


def _conv2d_weight_grad(g, x, wshape, p, s, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = wshape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    wing = win.reshape(n, groups, cin // groups, ho, wo, kh, kw)
    gg = g.reshape(n, groups, cout // groups, ho, wo)
    gw = np.einsum("ngohw,ngihwkl->goikl", gg, wing, optimize=True)
    return np.ascontiguousarray(gw.reshape(cout, cin_g, kh, kw))


def _conv2d_input_grad(g, w, xshape, p, s, groups):
    n, cin, h, wd = xshape
    cout, cin_g, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if s > 1:
        dil = np.zeros((n, cout, (ho - 1) * s + 1, (wo - 1) * s + 1), dtype=g.dtype)
        dil[:, :, ::s, ::s] = g
        g = dil
    # pad so a plain correlation with the flipped kernel yields the input grad
    ph, pw = kh - 1 - p, kw - 1 - p
    rem_h = (h + 2 * p - kh) % s
    rem_w = (wd + 2 * p - kw) % s
    g = np.pad(g, ((0, 0), (0, 0), (ph, ph + rem_h), (pw, pw + rem_w)))
    wt = w.reshape(groups, cout // groups, cin_g, kh, kw)
    wt = np.swapaxes(wt, 1, 2)[..., ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(cin, cout // groups, kh, kw))
    return _conv2d_raw(g, wt, 0, 1, groups)


# ---------------------------------------------------------------------------
# Pixel shuffle / unshuffle and the interleaved split
# ---------------------------------------------------------------------------

def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Lossless space-to-channel move: [N,C,H,W] -> [N,C*r*r,H/r,W/r]."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial extents ({h},{w}) not divisible by r={r}")
    out = Tensor(_unshuffle_raw(x.data, r))

    def back(gouts):
        return [_shuffle_raw(gouts[0], r)]

    return _emit((x,), (out,), back)


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Inverse rearrangement: [N,C,H,W] -> [N,C/(r*r),H*r,W*r]."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r*r={r * r}")
    out = Tensor(_shuffle_raw(x.data, r))

    def back(gouts):
        return [_unshuffle_raw(gouts[0], r)]

    return _emit((x,), (out,), back)


def _unshuffle_raw(a, r):
    n, c, h, w = a.shape
    a = a.reshape(n, c, h // r, r, w // r, r)
    a = a.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(a.reshape(n, c * r * r, h // r, w // r))


def _shuffle_raw(a, r):
    n, c, h, w = a.shape
    a = a.reshape(n, c // (r * r), r, r, h, w)
    a = a.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(a.reshape(n, c // (r * r), h * r, w * r))


def skip_split(x: Tensor):
    """Interleaved channel partition: 1-based odd channels, then even ones."""
    if x.shape[1] % 2:
        raise ShapeError(f"skip_split needs an even channel count, got {x.shape[1]}")
    f_att = _channel_stride(x, 0)
    f_gate = _channel_stride(x, 1)
    return f_att, f_gate


def _channel_stride(x: Tensor, offset: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data[:, offset::2]))

    def back(gouts):
        g = np.zeros_like(x.data)
        g[:, offset::2] = gouts[0]
        return [g]

    return _emit((x,), (out,), back)


def skip_merge(f_att: Tensor, f_gate: Tensor) -> Tensor:
    """Exact inverse of skip_split: re-interleave the two channel groups."""
    if f_att.shape != f_gate.shape:
        raise ShapeError(f"shape mismatch: {f_att.shape} vs {f_gate.shape}")
    n, c, h, w = f_att.shape
    merged = np.empty((n, 2 * c, h, w), dtype=f_att.data.dtype)
    merged[:, 0::2] = f_att.data
    merged[:, 1::2] = f_gate.data
    out = Tensor(merged)

    def back(gouts):
        return [np.ascontiguousarray(gouts[0][:, 0::2]),
                np.ascontiguousarray(gouts[0][:, 1::2])]

    return _emit((f_att, f_gate), (out,), back)


# ---------------------------------------------------------------------------
# Real 2-D FFT
# ---------------------------------------------------------------------------
#
# The transform is the unnormalized forward DFT restricted to the
# non-negative half of the last axis, computed by numpy's pocketfft, which
# handles general sizes (no power-of-two restriction).  The spectrum travels
# through the tape as a (real, imaginary) tensor pair so gradients flow
# through frequency-domain arithmetic.
#
# Adjoint notes.  rfft2 is linear, x -> S; with the real inner product on
# (Re S, Im S) its adjoint embeds the half-spectrum cotangent into the full
# grid (zeros elsewhere) and applies H*W*Re(ifft2(.)).  irfft2's adjoint is
# an rfft2 of the cotangent scaled by 1/(H*W), with interior columns counted
# twice because each contributes both itself and its conjugate mirror; the
# imaginary parts of the self-conjugate bins (k_w = 0, and k_w = W/2 for even
# W, intersected with k_h = 0 / H/2) are discarded by pocketfft's
# complex-to-real transform, so their cotangent is zero.  Both adjoints are
# validated by grad_check in the test suite.

def rfft2(x: Tensor):
    """Forward real FFT over (H, W); returns (real, imag) tensors [N,C,H,W/2+1]."""
    spec = np.fft.rfft2(x.data, axes=(-2, -1))
    re = Tensor(spec.real.astype(x.data.dtype))
    im = Tensor(spec.imag.astype(x.data.dtype))
    h, w = x.shape[-2], x.shape[-1]

    def back(gouts):
        gre, gim = gouts
        z = np.zeros(x.data.shape[:-1] + (w,), dtype=np.complex128)
        z[..., : w // 2 + 1] = gre + 1j * gim
        gx = (h * w) * np.fft.ifft2(z, axes=(-2, -1)).real
        return [gx.astype(x.data.dtype)]

    return _emit((x,), (re, im), back)


def irfft2(re: Tensor, im: Tensor, h: int, w: int) -> Tensor:
    """Inverse of rfft2 with 1/(H*W) normalization; output is [.., h, w] real."""
    if re.shape != im.shape:
        raise ShapeError(f"spectrum part shapes differ: {re.shape} vs {im.shape}")
    if re.shape[-1] != w // 2 + 1:
        raise ShapeError(
            f"spectrum last extent {re.shape[-1]} does not match W={w} (need {w // 2 + 1})")
    out = Tensor(np.fft.irfft2(re.data + 1j * im.data, s=(h, w), axes=(-2, -1))
                 .astype(re.data.dtype))

    def back(gouts):
        spec = np.fft.rfft2(gouts[0], axes=(-2, -1)) / (h * w)
        wh = w // 2 + 1
        colw = np.full(wh, 2.0)
        colw[0] = 1.0
        if w % 2 == 0:
            colw[-1] = 1.0
        gre = spec.real * colw
        gim = spec.imag * colw
        # self-conjugate bins carry no imaginary degree of freedom
        for kw in ([0, wh - 1] if w % 2 == 0 else [0]):
            gim[..., 0, kw] = 0.0
            if h % 2 == 0:
                gim[..., h // 2, kw] = 0.0
        return [gre.astype(re.data.dtype), gim.astype(im.data.dtype)]

    return _emit((re, im), (out,), back)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, h=1e-3, seed=0) -> float:
    """Worst-case deviation of taped gradients from central differences.

    `fn` maps Tensors to one Tensor.  Inputs are promoted to float64, the
    output is contracted with a fixed random projection to a scalar, and each
    input element is perturbed by +-h.  Returns
    max |analytic - numeric| / max(1, max |numeric|) over all inputs, an
    absolute-when-small, relative-when-large measure.
    """
    xs = [Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                 requires_grad=True) for t in inputs]
    rng = np.random.default_rng(seed)

    with GradTape() as tape:
        out = fn(*xs)
        proj = Tensor(rng.standard_normal(out.shape).astype(np.float64))
        loss = sum_all(mul(out, proj))
    grads = backward(loss, tape)

    def fval():
        return float(np.sum(fn(*xs).data * proj.data))

    worst = 0.0
    for x in xs:
        analytic = grads[x]
        numeric = np.zeros_like(x.data)
        flat_x = x.data.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + h
            fp = fval()
            flat_x[i] = orig - h
            fm = fval()
            flat_x[i] = orig
            flat_n[i] = (fp - fm) / (2.0 * h)
        ref = max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 0.0)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / ref)
    return worst


def gradcheck_cases(seed=0):
    """(name, fn, inputs) triples covering every registered differentiable op.

    Three shape variants per op; consumed by the test suite and the CLI
    `gradcheck` subcommand.
    """
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    cases = []

    def case(name, fn, *inputs):
        cases.append((name, fn, inputs))

    for shape in [(2, 3, 4, 4), (1, 5, 2, 3), (3, 1, 6, 2)]:
        a, b = t(*shape), t(*shape)
        case(f"add{shape}", add, a, b)
        case(f"sub{shape}", sub, a, b)
        case(f"mul{shape}", mul, a, b)
    case("mul_broadcast_chan", mul, t(2, 4, 3, 3), t(1, 4, 1, 1))
    case("mul_broadcast_batch", mul, t(3, 2, 2, 2), t(3, 1, 1, 1))
    case("mul_broadcast_scalar", mul, t(2, 3, 2, 2), t(1,))

    for shape in [(2, 3, 2, 2), (1, 4, 3, 3), (2, 2, 5, 1)]:
        case(f"scale{shape}", lambda x: scale(x, -1.7), t(*shape))
        case(f"add_const{shape}", lambda x: add_const(x, 0.3), t(*shape))
        case(f"rsub_const{shape}", lambda x: rsub_const(1.0, x), t(*shape))
        case(f"gelu{shape}", gelu, t(*shape))
        case(f"sigmoid{shape}", sigmoid, t(*shape))
        case(f"softmax{shape}", lambda x: softmax(x, axis=1), t(*shape))
        case(f"sum_all{shape}", lambda x: sum_all(x), t(*shape))
        case(f"mean_abs_diff{shape}", mean_abs_diff, t(*shape), t(*shape))
        case(f"spatial_mean{shape}", spatial_mean, t(*shape))
        case(f"spatial_std{shape}", spatial_std, t(*shape))

    for c in [2, 4, 6]:
        case(f"layer_norm_c{c}", layer_norm, t(2, c, 3, 3), t(c))
    for shape in [(2, 4, 2, 2), (1, 6, 3, 1), (2, 2, 4, 4)]:
        case(f"mean_axes{shape}", lambda x: mean_axes(x, (1,)), t(*shape))
        case(f"reshape{shape}", lambda x: reshape(x, (x.size,)), t(*shape))
        case(f"l2_normalize{shape}", lambda x: l2_normalize(x, axis=-1), t(*shape))
    for shape in [(2, 3, 4, 5), (1, 2, 3, 3), (2, 4, 2, 6)]:
        case(f"transpose_last2{shape}", transpose_last2, t(*shape))
    for shape in [(1, 2, 3, 4), (2, 3, 2, 2), (1, 4, 5, 1)]:
        case(f"concat{shape}", lambda p, q: concat([p, q], axis=1), t(*shape), t(*shape))
        case(f"concat_repeat{shape}", lambda p: concat([p, p], axis=1), t(*shape))
    for c, sizes in [(4, (2, 1, 1)), (6, (3, 2, 1)), (5, (1, 4))]:
        # scale each part differently before merging so every path is exercised
        def split_fn(x, sizes=sizes):
            parts = split(x, sizes, axis=1)
            return concat([scale(p, float(k + 1)) for k, p in enumerate(parts)], axis=1)
        case(f"split_c{c}", split_fn, t(2, c, 2, 2))
    for shape in [(2, 2, 3, 4), (1, 3, 2, 2), (2, 1, 4, 5)]:
        case(f"matmul{shape}", matmul, t(*shape), t(shape[0], shape[1], shape[3], shape[2]))

    conv_specs = [
        ("conv1x1", (2, 3, 4, 4), (5, 3, 1, 1), None, 1, 1),
        ("conv3x3", (1, 2, 5, 5), (4, 2, 3, 3), None, 1, 1),
        ("conv3x3_bias", (2, 3, 4, 4), (2, 3, 3, 3), (2,), 1, 1),
        ("conv_depthwise", (2, 4, 4, 4), (4, 1, 3, 3), None, 1, 4),
        ("conv_groups2", (1, 4, 3, 3), (6, 2, 3, 3), None, 1, 2),
        ("conv_stride2", (1, 3, 5, 5), (2, 3, 3, 3), None, 2, 1),
    ]
    for name, xs, ws, bs, s, g in conv_specs:
        args = [t(*xs), t(*ws)] + ([t(*bs)] if bs else [])
        if bs:
            case(name, lambda x, w, b, s=s, g=g: conv2d(x, w, b, stride=s, groups=g), *args)
        else:
            case(name, lambda x, w, s=s, g=g: conv2d(x, w, stride=s, groups=g), *args)

    for shape in [(1, 2, 4, 4), (2, 1, 6, 6), (1, 3, 2, 2)]:
        case(f"pixel_unshuffle{shape}", lambda x: pixel_unshuffle(x, 2), t(*shape))
    for shape in [(1, 8, 2, 2), (2, 4, 3, 3), (1, 12, 1, 2)]:
        case(f"pixel_shuffle{shape}", lambda x: pixel_shuffle(x, 2), t(*shape))
    for shape in [(1, 4, 2, 2), (2, 6, 3, 1), (1, 2, 4, 4)]:
        def split_merge(x):
            a, g = skip_split(x)
            return skip_merge(scale(a, 2.0), scale(g, 3.0))
        case(f"skip_split_merge{shape}", split_merge, t(*shape))
    for shape in [(1, 2, 2, 3), (2, 1, 3, 3), (1, 2, 4, 6)]:
        def skip_merge_fn(a, g):
            return skip_merge(a, g)
        case(f"skip_merge{shape}", skip_merge_fn, t(*shape), t(*shape))

    for shape in [(1, 2, 4, 4), (1, 1, 3, 5), (2, 2, 2, 6)]:
        def rfft_fn(x):
            re, im = rfft2(x)
            return concat([re, im], axis=1)
        case(f"rfft2{shape}", rfft_fn, t(*shape))
        h, w = shape[2], shape[3]
        wh = w // 2 + 1
        case(f"irfft2{shape}",
             lambda re, im, h=h, w=w: irfft2(re, im, h, w),
             t(shape[0], shape[1], h, wh), t(shape[0], shape[1], h, wh))

    return cases
