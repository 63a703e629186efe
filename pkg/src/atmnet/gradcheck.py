"""Finite-difference gradient suite (64-bit) over every primitive and a micro model.

Used by the test-suite and by ``atmnet gradcheck``.
"""
from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import check_grad

H = 1e-5


def _leaf(rng, shape, scale=1.0, dtype=np.float64):
    return E.Array(rng.normal(scale=scale, size=shape).astype(dtype), requires_grad=True)


def _weights(rng, shape):
    # a fixed random projection turns any output into a scalar loss with
    # nontrivial upstream gradients
    return E.Array(rng.normal(size=shape))


def _random_feature_shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(2, 7)), int(rng.integers(2, 8)), 8)


def primitive_checks(seed: int = 0, h: float = H) -> dict[str, float]:
    """Max relative error per primitive on random shapes up to 2x6x7x8."""
    rng = np.random.default_rng(seed)
    shape = _random_feature_shape(rng)
    B, Hh, W, C = shape
    out: dict[str, float] = {}

    def proj_loss(y, r):
        return E.sum(E.mul(y, r))

    x = _leaf(rng, shape)
    w = _leaf(rng, (C, 5))
    b = _leaf(rng, (5,))
    r = _weights(rng, (B, Hh, W, 5))
    out["affine"] = check_grad(lambda: proj_loss(E.affine(x, w, b), r), [x, w, b], h)

    x = _leaf(rng, shape)
    g = _leaf(rng, (C,))
    bt = _leaf(rng, (C,))
    r = _weights(rng, shape)
    out["layer_norm"] = check_grad(lambda: proj_loss(E.layer_norm(x, g, bt, 1e-6), r), [x, g, bt], h)

    x = _leaf(rng, (B, Hh, W, 3 * C))
    r = _weights(rng, x.shape)
    out["softmax_groups"] = check_grad(lambda: proj_loss(E.softmax_groups(x, 3), r), [x], h)

    for axis in ("width", "height"):
        for G in (1, 2, 4, 8):
            x = _leaf(rng, shape)
            ext = W if axis == "width" else Hh
            o = E.Array(rng.uniform(-ext, ext, size=(B, Hh, W, G)), requires_grad=True)
            r = _weights(rng, shape)
            out[f"gather_interp_1d[{axis},G={G}]"] = check_grad(
                lambda: proj_loss(E.gather_interp_1d(x, o, axis), r), [x, o], h)

    x = _leaf(rng, shape)
    k = _leaf(rng, (3, 3, C))
    r = _weights(rng, shape)
    out["depthwise_conv2d"] = check_grad(lambda: proj_loss(E.depthwise_conv2d(x, k), r), [x, k], h)

    for (kk, s, p) in ((3, 2, 1), (3, 1, 1), (1, 1, 0)):
        x = _leaf(rng, shape)
        k = _leaf(rng, (kk, kk, C, 4))
        bb = _leaf(rng, (4,))
        Ho = E.conv_output_extent(Hh, kk, s, p)
        Wo = E.conv_output_extent(W, kk, s, p)
        r = _weights(rng, (B, Ho, Wo, 4))
        out[f"conv2d[k={kk},s={s}]"] = check_grad(
            lambda: proj_loss(E.conv2d(x, k, bb, s, p), r), [x, k, bb], h)

    a, c = _leaf(rng, shape), _leaf(rng, shape)
    r = _weights(rng, shape)
    out["add"] = check_grad(lambda: proj_loss(E.add(a, c), r), [a, c], h)
    out["mul"] = check_grad(lambda: proj_loss(E.mul(a, c), r), [a, c], h)
    out["scale"] = check_grad(lambda: proj_loss(E.scale(a, -1.7), r), [a], h)
    out["gelu"] = check_grad(lambda: proj_loss(E.gelu(a), r), [a], h)

    x = _leaf(rng, shape)
    rp = _weights(rng, (B, C))
    out["global_avg_pool"] = check_grad(lambda: proj_loss(E.global_avg_pool(x), rp), [x], h)
    r2 = _weights(rng, (B, 2 * Hh, 2 * W, C))
    out["upsample_nearest2x"] = check_grad(lambda: proj_loss(E.upsample_nearest2x(x), r2), [x], h)

    r3 = _weights(rng, (B, Hh, W, 3 * C))
    out["concat/slice"] = check_grad(
        lambda: proj_loss(E.concat([E.slice_last(a, 0, C), c, a], axis=-1), r3), [a, c], h)
    out["transpose"] = check_grad(lambda: proj_loss(E.swap_hw(E.swap_hw(a)), r), [a], h)

    logits = _leaf(rng, (4, 7))
    labels = rng.integers(0, 7, size=4)
    out["cross_entropy"] = check_grad(lambda: E.cross_entropy(logits, labels, 0.1), [logits], h)
    return out


def atm_check(seed: int = 0, shape=(2, 5, 6, 8), groups: int = 4, h: float = H) -> float:
    """Gradient of a random projection of one ATM module w.r.t. input and all weights."""
    from .atm import AtmParams, atm_forward, init_atm_params

    rng = np.random.default_rng(seed)
    C = shape[-1]
    named = init_atm_params(rng, C, groups, dtype=np.float64)
    for v in named.values():
        v.data[...] = rng.normal(scale=0.5, size=v.shape)
    # offsets of a few tokens, comfortably away from integer positions
    named["offset_w.bias"].data[...] = rng.uniform(0.2, 0.8, size=groups) * 2
    named["offset_h.bias"].data[...] = -rng.uniform(0.2, 0.8, size=groups)
    params = AtmParams.from_named(named, "", groups)
    x = _leaf(rng, shape)
    r = _weights(rng, shape)

    def loss():
        out, _ = atm_forward(x, params)
        return E.sum(E.mul(out, r))

    return check_grad(loss, [x, *named.values()], h, max_coords=40, seed=seed)


def block_model_check(seed: int = 0, h: float = H) -> float:
    """End-to-end check on a 1-block micro model (patch embed, PEG, block, head, loss)."""
    from .backbone import build_variant, forward
    from .config import make_variant

    cfg = make_variant("grad", (8, 8, 8, 8), (2, 2, 2, 2), (1, 1, 1, 1), (4, 4, 4, 4), 1, num_classes=3)
    model = build_variant(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if "offset" in name and name.endswith("bias"):
            p.data[...] = rng.uniform(0.2, 0.8, size=p.shape)
        elif "peg" in name:
            p.data[...] = rng.normal(scale=0.2, size=p.shape)
    images = rng.normal(size=(2, 3, 32, 32))
    labels = rng.integers(0, 3, size=2)
    x = E.Array(images, requires_grad=True)

    def loss():
        return E.cross_entropy(forward(model, x), labels, 0.1)

    return check_grad(loss, [x, *model.params.values()], h, max_coords=12, seed=seed)


def run_suite(seed: int = 0) -> dict[str, float]:
    results = dict(primitive_checks(seed))
    results["atm_forward"] = atm_check(seed)
    results["micro_model[1 block]"] = block_model_check(seed)
    return results
