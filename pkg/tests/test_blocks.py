import math

import numpy as np
import pytest

from anyir import blocks as B
from anyir import tensor as T
from anyir.tensor import ShapeError, Tensor, grad_check

from oracles import (
    channel_attention_scalar,
    dft2_direct,
    gated_da_scalar,
    idft2_direct,
    sigmoid_scalar,
)
from support import rebuild, tensor_leaves


def rnd(*shape, seed=0, scale=1.0):
    g = np.random.default_rng(seed)
    return Tensor(g.standard_normal(shape).astype(np.float32) * scale)


def gen(seed):
    return np.random.default_rng(seed)


def identity_1x1(c):
    w = np.zeros((c, c, 1, 1), dtype=np.float32)
    for i in range(c):
        w[i, i] = 1.0
    return Tensor(w)


def identity_dw3(c):
    w = np.zeros((c, 1, 3, 3), dtype=np.float32)
    w[:, 0, 1, 1] = 1.0
    return Tensor(w)


def relerr(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


# ------------------------------------------------------------ channel attention


@pytest.mark.parametrize(
    "shape,heads,seed",
    [((1, 4, 3, 3), 2, 0), ((2, 4, 4, 4), 1, 1), ((1, 6, 5, 5), 3, 2)],
)
def test_attention_matches_per_head_oracle(shape, heads, seed):
    p = B.AttentionParams.create(gen(seed), shape[1], heads)
    p.temp = Tensor(np.linspace(0.5, 1.5, heads).astype(np.float32))
    x = rnd(*shape, seed=seed + 100)
    got = B.channel_attention(x, p).data
    want = channel_attention_scalar(
        x.data, p.q.data, p.q_dw.data, p.k.data, p.k_dw.data,
        p.v.data, p.v_dw.data, p.out.data, p.temp.data, heads)
    assert relerr(got, want) < 1e-5


def test_attention_uniform_when_queries_vanish():
    # zero queries make every attention row uniform, so each output channel
    # is the mean of the V channels; identity V and output paths expose it
    p = B.AttentionParams.create(gen(3), 2, 1)
    p.q = Tensor(np.zeros((2, 2, 1, 1), dtype=np.float32))
    p.v = identity_1x1(2)
    p.v_dw = identity_dw3(2)
    p.out = identity_1x1(2)
    x = rnd(1, 2, 4, 4, seed=5)
    got = B.channel_attention(x, p).data
    want = np.broadcast_to(x.data.mean(axis=1, keepdims=True), x.data.shape)
    assert np.max(np.abs(got - want)) < 1e-6


def test_attention_zero_values_give_zero_output():
    p = B.AttentionParams.create(gen(4), 4, 2)
    p.v = Tensor(np.zeros((4, 4, 1, 1), dtype=np.float32))
    p.out = identity_1x1(4)
    x = rnd(1, 4, 3, 3, seed=6)
    got = B.channel_attention(x, p).data
    assert np.max(np.abs(got)) == 0.0


def test_attention_rejects_nondivisible_heads():
    with pytest.raises(ShapeError):
        B.AttentionParams.create(gen(0), 6, 4)


# --------------------------------------------------------------- gated module


@pytest.mark.parametrize(
    "shape,r,seed",
    [((1, 4, 4, 4), 2, 0), ((2, 6, 5, 5), 2, 1), ((1, 4, 4, 4), 4, 2)],
)
def test_gated_da_matches_scalar_oracle(shape, r, seed):
    c = shape[1]
    p = B.GatedDAParams.create(gen(seed), c, r)
    p.tau = Tensor(np.array([0.7], dtype=np.float32))
    x = rnd(*shape, seed=seed + 50)
    got = B.gated_da(x, p).data
    want = gated_da_scalar(
        x.data, p.norm_gain.data.astype(np.float64), p.expand.data,
        p.depth.data, p.gate.data, p.proj.data, float(p.tau.data[0]), p.sizes)
    assert relerr(got, want) < 1e-5


def test_gated_da_zero_gate_identity():
    c = 4
    p = B.GatedDAParams.create(gen(7), c, 2)
    p.expand = Tensor(np.zeros_like(p.expand.data))
    p.proj = identity_1x1(c)
    x = rnd(2, c, 4, 4, seed=8)
    got = B.gated_da(x, p).data
    assert np.array_equal(got, x.data)


def test_gated_da_constant_input_temperature_factor():
    # a constant image normalizes to zero, so the modulation collapses to
    # sigmoid(sqrt(delta)) with delta = 1e-5
    x = Tensor(np.full((1, 4, 4, 4), 2.5, dtype=np.float32))
    xn = T.layer_norm(x, Tensor(np.ones(4, dtype=np.float32)))
    mu, sd = T.channel_stats(xn)
    delta = T.sigmoid(T.mean_axes(T.add(mu, sd), (1,)))
    want = sigmoid_scalar(math.sqrt(1e-5))
    assert abs(float(delta.data[0]) - want) < 1e-6


def test_gated_da_split_sizes_validated():
    with pytest.raises(ShapeError):
        B.GatedDAParams.create(gen(0), 4, 2, split_ratio=(0.5, 0.25, 0.25))
    with pytest.raises(ShapeError):
        B.GatedDAParams.create(gen(0), 3, 1)  # hidden=3 cannot split


# --------------------------------------------------------------------- fusion


def test_spatial_fusion_zero_inputs():
    z = Tensor(np.zeros((1, 2, 3, 3), dtype=np.float32))
    out = B.spatial_fusion(z, z).data
    assert out.shape == (1, 4, 3, 3)
    assert np.allclose(out, 0.5, atol=1e-7)


def test_spatial_fusion_swap_symmetry():
    a = rnd(1, 3, 4, 4, seed=9)
    b = rnd(1, 3, 4, 4, seed=10)
    ab = B.spatial_fusion(a, b).data
    ba = B.spatial_fusion(b, a).data
    assert np.array_equal(ab[:, :3], ba[:, 3:])
    assert np.array_equal(ab[:, 3:], ba[:, :3])


def test_spatial_fusion_formula():
    a = rnd(2, 2, 3, 3, seed=11)
    b = rnd(2, 2, 3, 3, seed=12)
    out = B.spatial_fusion(a, b).data.astype(np.float64)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v.astype(np.float64)))
    assert np.max(np.abs(out[:, :2] - (a.data + sig(b.data)))) < 1e-6
    assert np.max(np.abs(out[:, 2:] - (b.data + sig(a.data)))) < 1e-6


def test_frequency_fusion_is_sum_by_linearity():
    a = rnd(1, 2, 8, 8, seed=13)
    b = rnd(1, 2, 8, 8, seed=14)
    out = B.frequency_fusion(a, b).data
    want = a.data + b.data
    assert np.max(np.abs(out[:, :2] - want)) < 1e-5
    assert np.max(np.abs(out[:, 2:] - want)) < 1e-5


def test_frequency_fusion_zero_gate_passes_attention():
    a = rnd(1, 2, 4, 4, seed=15)
    z = Tensor(np.zeros_like(a.data))
    out = B.frequency_fusion(a, z).data
    assert np.max(np.abs(out[:, :2] - a.data)) < 1e-5


def test_frequency_fusion_matches_direct_dft_oracle():
    a = rnd(1, 2, 8, 8, seed=16)
    b = rnd(1, 2, 8, 8, seed=17)
    got = B.frequency_fusion(a, b).data
    spec = dft2_direct(a.data) + dft2_direct(b.data)
    want_half = idft2_direct(spec).real
    assert np.max(np.abs(got[:, :2] - want_half)) < 1e-4
    assert np.max(np.abs(got[:, 2:] - want_half)) < 1e-4


def test_sf_fuse_lambda_extremes():
    c = 4
    a = rnd(1, 2, 4, 4, seed=18)
    b = rnd(1, 2, 4, 4, seed=19)
    f_in = rnd(1, c, 4, 4, seed=20)
    p = B.FusionParams.create(gen(21), c)

    p.lam = Tensor(np.array([1.0], dtype=np.float32))
    got = B.sf_fuse(a, b, f_in, p).data
    want = T.add(T.conv2d(B.spatial_fusion(a, b), p.weight), f_in).data
    assert np.array_equal(got, want)

    p.lam = Tensor(np.array([0.0], dtype=np.float32))
    got = B.sf_fuse(a, b, f_in, p).data
    want = T.add(T.conv2d(B.frequency_fusion(a, b), p.weight), f_in).data
    assert np.array_equal(got, want)


def test_sf_fuse_zero_projection_is_passthrough():
    c = 4
    a = rnd(1, 2, 4, 4, seed=22)
    b = rnd(1, 2, 4, 4, seed=23)
    f_in = rnd(1, c, 4, 4, seed=24)
    p = B.FusionParams.create(gen(25), c)
    p.weight = Tensor(np.zeros((c, c, 1, 1), dtype=np.float32))
    got = B.sf_fuse(a, b, f_in, p).data
    assert np.array_equal(got, f_in.data)


def test_fusion_lambda_mode_validated():
    with pytest.raises(ValueError):
        B.FusionParams.create(gen(0), 4, lambda_mode="annealed")


# ------------------------------------------------------------------------ ffn


def test_ffn_zero_down_projection_is_passthrough():
    p = B.FFNParams.create(gen(26), 4, 2)
    p.down = Tensor(np.zeros_like(p.down.data))
    x = rnd(2, 4, 3, 3, seed=27)
    assert np.array_equal(B.ffn(x, p).data, x.data)


def test_ffn_zero_input_zero_output():
    p = B.FFNParams.create(gen(28), 4, 2)
    x = Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32))
    assert np.max(np.abs(B.ffn(x, p).data)) == 0.0


def test_ffn_is_documented_composition():
    p = B.FFNParams.create(gen(29), 4, 2)
    x = rnd(1, 4, 3, 3, seed=30)
    got = B.ffn(x, p).data
    want = T.add(
        T.conv2d(T.gelu(T.conv2d(T.layer_norm(x, p.norm_gain), p.up)), p.down), x
    ).data
    assert np.array_equal(got, want)


# ------------------------------------------------------------------ full block


def make_dab(seed, channels=4, heads=1, r=2):
    return B.DABParams.create(gen(seed), channels, heads,
                              ffn_expansion=2, gated_expansion=r)


def test_dab_all_zero_convs_is_passthrough():
    p = make_dab(31)
    for _, t in p.named("dab"):
        if t.data.ndim == 4:
            t.data[...] = 0.0
    x = rnd(2, 4, 4, 4, seed=32)
    assert np.array_equal(B.dab_forward(x, p).data, x.data)


@pytest.mark.parametrize("shape", [(1, 4, 4, 4), (2, 4, 8, 8), (1, 8, 6, 6)])
def test_dab_preserves_shape(shape):
    heads = 2 if shape[1] >= 8 else 1
    p = make_dab(33, channels=shape[1], heads=heads)
    x = rnd(*shape, seed=34)
    assert B.dab_forward(x, p).data.shape == shape


def test_dab_equals_composition_of_subops():
    p = make_dab(35)
    x = rnd(1, 4, 4, 4, seed=36)
    xn = T.layer_norm(x, p.pre_norm_gain)
    a, g = T.skip_split(xn)
    want = B.ffn(
        B.sf_fuse(B.channel_attention(a, p.attention),
                  B.gated_da(g, p.gated), x, p.fusion),
        p.ffn,
    ).data
    assert np.array_equal(B.dab_forward(x, p).data, want)


def test_dab_gradient_all_parameter_groups():
    p = make_dab(37)
    x = rnd(1, 4, 4, 4, seed=38)
    leaves = list(tensor_leaves(p))

    def fn(xt, *pts):
        return B.dab_forward(xt, rebuild(p, list(pts)))

    err = grad_check(fn, [x] + leaves)
    assert err <= 1e-4, f"worst deviation {err:.3e}"


def test_dab_output_finite_for_bounded_inputs():
    p = make_dab(39)
    g = np.random.default_rng(40)
    x = Tensor(g.uniform(-10.0, 10.0, size=(1, 4, 6, 6)).astype(np.float32))
    assert np.all(np.isfinite(B.dab_forward(x, p).data))


def test_dab_named_tensors_unique_and_complete():
    p = make_dab(41)
    names = [n for n, _ in p.named("blk")]
    assert len(names) == len(set(names))
    assert len(names) == len(list(tensor_leaves(p)))
    assert all(n.startswith("blk.") for n in names)
