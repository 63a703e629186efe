import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atmnet import engine as E
from atmnet.atm import (
    AtmParams, OffsetField, atm_flops, atm_forward, fuse, init_atm_params,
    predict_offsets, recompose_h, recompose_w,
)
from atmnet.engine import Array
from atmnet.errors import ArgumentError
from atmnet.layers import Linear

from oracles import atm_loop, fuse_token, matvec


def make_params(rng, C, G, dtype=np.float64, scale=1.0, offset_scale=1.0):
    named = init_atm_params(rng, C, G, dtype=dtype)
    for k, v in named.items():
        v.data[...] = rng.normal(scale=scale, size=v.shape)
        if k.startswith("offset"):
            v.data *= offset_scale
    return named, AtmParams.from_named(named, "", G)


def as_numpy(named):
    return {k: v.data for k, v in named.items()}


def identity_params(C, G, dtype=np.float64):
    named = {k: Array(np.zeros(v.shape, dtype)) for k, v in
             init_atm_params(np.random.default_rng(0), C, G, dtype=dtype).items()}
    for br in ("fc_w", "fc_h", "fc_i"):
        named[br + ".weight"].data[...] = np.eye(C)
    return AtmParams.from_named(named, "", G)


# ------------------------------------------------------------ predict_offsets


def test_zero_predictor_gives_zero_offsets():
    x = Array(np.random.default_rng(0).normal(size=(2, 3, 4, 8)))
    fc = Linear(Array(np.zeros((8, 4))), Array(np.zeros(4)))
    off = predict_offsets(x, fc, "width")
    assert not off.values.data.any()
    assert off.group_size == 2


def test_xt_stage1_offset_count():
    rng = np.random.default_rng(1)
    x = Array(rng.normal(size=(1, 2, 2, 64)).astype(np.float32))
    named = init_atm_params(rng, 64, 32)
    off = predict_offsets(x, AtmParams.from_named(named, "", 32).offset_w, "width")
    assert off.values.shape == (1, 2, 2, 32)


def test_predict_matches_per_token_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 8))
    w, b = rng.normal(size=(8, 4)), rng.normal(size=4)
    off = predict_offsets(Array(x), Linear(Array(w), Array(b)), "height").values.data
    for idx in np.ndindex(2, 3, 4):
        np.testing.assert_allclose(off[idx], matvec(x[idx], w, b), atol=1e-12)


# ------------------------------------------------------------ recompose


def test_recompose_zero_is_identity():
    x = np.random.default_rng(3).normal(size=(2, 4, 5, 6)).astype(np.float32)
    zeros = Array(np.zeros((2, 4, 5, 3), np.float32))
    assert np.array_equal(recompose_w(Array(x), OffsetField(zeros, "width", 2)).data, x)
    assert np.array_equal(recompose_h(Array(x), OffsetField(zeros, "height", 2)).data, x)


def test_recompose_channels_draw_from_different_columns():
    # W=4, C=2, group_size=1, offsets (+1, -1) at j=2 -> (x[., 3, 0], x[., 1, 1])
    x = np.random.default_rng(4).normal(size=(1, 1, 4, 2))
    off = np.zeros((1, 1, 4, 2))
    off[0, 0, 2] = [1.0, -1.0]
    y = recompose_w(Array(x), OffsetField(Array(off), "width", 1)).data
    assert y[0, 0, 2, 0] == x[0, 0, 3, 0]
    assert y[0, 0, 2, 1] == x[0, 0, 1, 1]


def test_recompose_beyond_width_clamps():
    x = np.random.default_rng(5).normal(size=(1, 2, 4, 2))
    off = np.full((1, 2, 4, 1), 100.0)
    y = recompose_w(Array(x), OffsetField(Array(off), "width", 2)).data
    np.testing.assert_array_equal(y, np.repeat(x[:, :, 3:4], 4, axis=2))
    y = recompose_w(Array(x), OffsetField(Array(-off), "width", 2)).data
    np.testing.assert_array_equal(y, np.repeat(x[:, :, 0:1], 4, axis=2))


def test_recompose_axis_mismatch():
    x = Array(np.zeros((1, 2, 2, 2)))
    off = OffsetField(Array(np.zeros((1, 2, 2, 1))), "height", 2)
    with pytest.raises(ArgumentError):
        recompose_w(x, off)


def test_recompose_h_is_transposed_recompose_w():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, 4, 6))
    d = rng.normal(scale=3, size=(2, 5, 4, 3))
    yh = recompose_h(Array(x), OffsetField(Array(d), "height", 2)).data
    xt, dt = x.transpose(0, 2, 1, 3), d.transpose(0, 2, 1, 3)
    yw = recompose_w(Array(xt), OffsetField(Array(dt), "width", 2)).data
    np.testing.assert_allclose(yh, yw.transpose(0, 2, 1, 3), atol=1e-15)


def test_recompose_h_single_row():
    x = np.random.default_rng(7).normal(size=(1, 1, 5, 4))
    d = np.random.default_rng(8).normal(scale=5, size=(1, 1, 5, 2))
    y = recompose_h(Array(x), OffsetField(Array(d), "height", 2)).data
    np.testing.assert_array_equal(y, x)


# ------------------------------------------------------------ fuse


def test_fuse_identical_branches_is_convex_identity():
    rng = np.random.default_rng(9)
    named, p = make_params(rng, 6, 3)
    p.fc_h = p.fc_i = p.fc_w
    v = Array(rng.normal(size=(2, 3, 3, 6)))
    out = fuse(v, v, v, p).data
    np.testing.assert_allclose(out, p.fc_w(v).data, atol=1e-12)


def test_fuse_zero_gates_is_mean():
    rng = np.random.default_rng(10)
    named, p = make_params(rng, 5, 5)
    for g in (p.gate_w, p.gate_h, p.gate_i):
        g.data[...] = 0.0
    xs = [Array(rng.normal(size=(1, 2, 3, 5))) for _ in range(3)]
    out, alphas, hats = fuse(*xs, p, return_gates=True)
    np.testing.assert_allclose(alphas.data, 1 / 3)
    np.testing.assert_allclose(out.data, sum(h.data for h in hats) / 3, atol=1e-12)


def test_fuse_matches_per_token_oracle():
    rng = np.random.default_rng(11)
    for trial in range(5):
        named, p = make_params(rng, 4, 2)
        xs = [rng.normal(size=(1, 2, 2, 4)) for _ in range(3)]
        out = fuse(*map(Array, xs), p).data
        for idx in np.ndindex(1, 2, 2):
            ref, _, _ = fuse_token(xs[0][idx], xs[1][idx], xs[2][idx], as_numpy(named))
            np.testing.assert_allclose(out[idx], ref, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000), C=st.integers(1, 8))
def test_fuse_convex_hull_property(seed, C):
    rng = np.random.default_rng(seed)
    named, p = make_params(rng, C, 1, scale=2.0)
    xs = [Array(rng.normal(size=(2, 2, 3, C))) for _ in range(3)]
    out, alphas, hats = fuse(*xs, p, return_gates=True)
    a = alphas.data.reshape(2, 2, 3, 3, C)
    np.testing.assert_allclose(a.sum(axis=3), 1.0, atol=1e-6)
    stack = np.stack([h.data for h in hats])
    assert np.all(out.data >= stack.min(0) - 1e-9)
    assert np.all(out.data <= stack.max(0) + 1e-9)


# ------------------------------------------------------------ atm_forward


def test_degenerate_atm_is_identity():
    x = np.random.default_rng(12).normal(size=(2, 3, 4, 8))
    out, _ = atm_forward(Array(x), identity_params(8, 4))
    np.testing.assert_allclose(out.data, x, atol=1e-12)


@pytest.mark.parametrize("shape", [(1, 1, 1, 4), (2, 5, 3, 8), (3, 7, 7, 16)])
def test_atm_preserves_shape(shape):
    rng = np.random.default_rng(13)
    _, p = make_params(rng, shape[-1], 2, dtype=np.float32, scale=0.3)
    out, (ow, oh) = atm_forward(Array(rng.normal(size=shape).astype(np.float32)), p)
    assert out.shape == shape
    assert ow.values.shape == oh.values.shape == shape[:3] + (2,)


def test_atm_reuses_cached_offsets():
    rng = np.random.default_rng(14)
    _, p = make_params(rng, 8, 4)
    x = Array(rng.normal(size=(1, 4, 4, 8)))
    out1, offs = atm_forward(x, p)
    p2 = AtmParams(**{**p.__dict__, "offset_w": None, "offset_h": None})
    out2, offs2 = atm_forward(x, p2, cached=offs)
    assert offs2[0] is offs[0]
    np.testing.assert_array_equal(out1.data, out2.data)
    with pytest.raises(ArgumentError):
        atm_forward(x, p2)


def test_atm_cached_group_mismatch():
    rng = np.random.default_rng(15)
    _, p = make_params(rng, 8, 4)
    x = Array(rng.normal(size=(1, 4, 4, 8)))
    bad = (OffsetField(Array(np.zeros((1, 4, 4, 2))), "width", 4),
           OffsetField(Array(np.zeros((1, 4, 4, 2))), "height", 4))
    with pytest.raises(ArgumentError):
        atm_forward(x, p, cached=bad)


def test_atm_matches_loop_oracle():
    rng = np.random.default_rng(16)
    for trial in range(10):
        H, W = rng.integers(1, 7, size=2)
        G = int(rng.choice([1, 2, 4]))
        C = G * int(rng.integers(1, 8 // G + 1))
        named, p = make_params(rng, C, G, scale=0.7, offset_scale=3.0)
        x = rng.normal(size=(2, H, W, C))
        out, _ = atm_forward(Array(x), p)
        ref, _, _ = atm_loop(x, as_numpy(named))
        np.testing.assert_allclose(out.data, ref, atol=1e-6)


def test_atm_gradcheck():
    from atmnet.gradcheck import atm_check
    assert atm_check(seed=0) < 1e-4


def test_atm_offset_grads_nonzero():
    rng = np.random.default_rng(17)
    named, p = make_params(rng, 8, 4, scale=0.5, offset_scale=0.0)
    for k in ("offset_w.bias", "offset_h.bias"):
        named[k].data[...] = 0.37
    for v in named.values():
        v.requires_grad = True
    x = Array(rng.normal(size=(1, 5, 6, 8)))
    with E.Tape() as tape:
        out, _ = atm_forward(x, p)
        loss = E.sum(E.mul(out, Array(rng.normal(size=out.shape))))
    tape.backward(loss)
    assert np.abs(named["offset_w.weight"].grad).sum() > 0
    assert np.abs(named["offset_h.bias"].grad).sum() > 0


# ------------------------------------------------------------ flops


def test_flops_linear_in_area():
    assert atm_flops(2 * 7, 9, 64, 32) == 2 * atm_flops(7, 9, 64, 32)
    per_token = {atm_flops(h, w, 32, 8) / (h * w) for h in (1, 3, 14) for w in (2, 5, 56)}
    assert len(per_token) == 1


def test_flops_stage3_xt_closed_form():
    # 196 tokens * (6*320^2 + 2*320*80 + 18*320), evaluated by hand:
    # 6*102400 = 614400; 2*25600 = 51200; 18*320 = 5760; sum = 671360
    assert atm_flops(14, 14, 320, 80) == 196 * 671360 == 131_586_560


def test_flops_without_offset_prediction():
    assert atm_flops(4, 4, 16, 4) - atm_flops(4, 4, 16, 4, predict_offsets=False) == 16 * 2 * 16 * 4
