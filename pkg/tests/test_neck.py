import numpy as np
import pytest

from atmnet.engine import Array
from atmnet.errors import ArgumentError
from atmnet.neck import FeaturePyramid, build_fpn, fpn_flops, fpn_forward, fpn_param_shapes

IN_CH = (64, 128, 320, 512)


def pyramid(rng, base=56, batch=1, channels=IN_CH, dtype=np.float32):
    return FeaturePyramid([Array(rng.normal(size=(batch, base >> i, base >> i, c)).astype(dtype))
                           for i, c in enumerate(channels)])


@pytest.mark.parametrize("mode", ["plain", "atm"])
def test_shape_contract(mode):
    p = pyramid(np.random.default_rng(0))
    out = fpn_forward(p, build_fpn(IN_CH, 256, mode), mode)
    assert [x.shape for x in out.levels] == [(1, 56, 56, 256), (1, 28, 28, 256),
                                            (1, 14, 14, 256), (1, 7, 7, 256)]


def test_plain_zero_topdown_is_lateral():
    rng = np.random.default_rng(1)
    p = pyramid(rng, base=16, channels=(8, 16, 24, 32))
    fpn = build_fpn((8, 16, 24, 32), 16, "plain")
    for i in range(3):
        fpn.params[f"topdown{i}.scale"].data[...] = 0.0
    for i in range(4):
        k = np.zeros((3, 3, 16, 16), np.float32)
        k[1, 1] = np.eye(16)
        fpn.params[f"output{i}.weight"].data[...] = k
    out = fpn_forward(p, fpn)
    for i, x in enumerate(p.levels):
        lat = x.data @ fpn.params[f"lateral{i}.weight"].data + fpn.params[f"lateral{i}.bias"].data
        np.testing.assert_allclose(out.levels[i].data, lat, rtol=1e-5, atol=1e-5)


def _degenerate_atm(fpn):
    for k, v in fpn.params.items():
        if ".atm." in k:
            v.data[...] = 0.0
            if ".atm.fc_" in k and k.endswith("weight"):
                v.data[...] = np.eye(v.shape[0])


def test_degenerate_atm_equals_plain_merge():
    rng = np.random.default_rng(2)
    p = pyramid(rng, base=16, channels=(8, 16, 24, 32))
    atm = build_fpn((8, 16, 24, 32), 16, "atm", seed=3)
    plain = build_fpn((8, 16, 24, 32), 16, "plain", seed=3)
    _degenerate_atm(atm)
    for k, v in plain.params.items():
        if k.startswith("output") and k.endswith("weight"):
            v.data[...] = 0.0
            v.data[1, 1] = np.eye(16)
        elif k in atm.params:
            v.data[...] = atm.params[k].data
    a, b = fpn_forward(p, atm), fpn_forward(p, plain)
    for x, y in zip(a.levels, b.levels):
        np.testing.assert_allclose(x.data, y.data, atol=1e-5)


def test_shared_names_between_modes():
    a, b = fpn_param_shapes(IN_CH, 256, "plain"), fpn_param_shapes(IN_CH, 256, "atm")
    shared = {k for k in a if not k.startswith("output")}
    assert shared == {k for k in b if not k.startswith("output")}
    assert all(a[k] == b[k] for k in shared)
    assert b["output0.atm.offset_w.weight"] == (256, 32)


def test_bad_pyramids():
    rng = np.random.default_rng(4)
    fpn = build_fpn((8, 16, 24, 32), 16, "plain")
    p = pyramid(rng, base=16, channels=(8, 16, 24, 32))
    with pytest.raises(ArgumentError):
        fpn_forward(FeaturePyramid(p.levels[:3]), fpn)
    bad = list(p.levels)
    bad[1] = Array(np.zeros((1, 7, 8, 16), np.float32))
    with pytest.raises(ArgumentError):
        fpn_forward(FeaturePyramid(bad), fpn)
    with pytest.raises(ArgumentError):
        fpn_forward(FeaturePyramid(p.levels, (4, 8, 12, 32)), fpn)
    with pytest.raises(ArgumentError):
        fpn_forward(p, fpn, "atm")


def test_atm_neck_flops_linear_in_area():
    ext = [(56, 56), (28, 28), (14, 14), (7, 7)]
    ext2 = [(2 * h, w) for h, w in ext]
    assert fpn_flops(ext2, IN_CH) == 2 * fpn_flops(ext, IN_CH)
