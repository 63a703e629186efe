"""Active Token Mixer.

Each token predicts, per channel group, a continuous displacement along the
width axis and another along the height axis. Channels are recomposed from
the displaced positions, and the two recomposed tokens plus the untouched
token are embedded and fused with per-channel softmax gates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Array
from .errors import ArgumentError, DimensionError
from .layers import Linear, init_param

AXES = ("width", "height")


@dataclass
class OffsetField:
    """Displacements in token units, ``values`` shaped (B, H, W, G)."""

    values: Array
    axis: str
    group_size: int

    def __post_init__(self):
        if self.axis not in AXES:
            raise ArgumentError(f"offset axis must be one of {AXES}, got {self.axis!r}")

    @property
    def groups(self) -> int:
        return self.values.shape[-1]


@dataclass
class AtmParams:
    """Weights of one ATM module.

    ``offset_w``/``offset_h`` are ``None`` for modules that reuse offsets
    predicted by an earlier block. Gate matrices are stored input-major
    (C_in, C_out) like every other weight, without bias.
    """

    channels: int
    groups: int
    fc_w: Linear
    fc_h: Linear
    fc_i: Linear
    gate_w: Array
    gate_h: Array
    gate_i: Array
    offset_w: Linear | None = None
    offset_h: Linear | None = None

    @property
    def predicts_offsets(self) -> bool:
        return self.offset_w is not None

    @classmethod
    def from_named(cls, params: dict[str, Array], prefix: str, groups: int) -> "AtmParams":
        """Assemble from a flat ``name -> Array`` mapping (``prefix`` ends with '.')."""
        def lin(name, bias=True):
            return Linear(params[prefix + name + ".weight"],
                          params[prefix + name + ".bias"] if bias else None)

        has_off = prefix + "offset_w.weight" in params
        return cls(
            channels=params[prefix + "fc_i.weight"].shape[0],
            groups=groups,
            fc_w=lin("fc_w"), fc_h=lin("fc_h"), fc_i=lin("fc_i"),
            gate_w=params[prefix + "gate_w"],
            gate_h=params[prefix + "gate_h"],
            gate_i=params[prefix + "gate_i"],
            offset_w=lin("offset_w") if has_off else None,
            offset_h=lin("offset_h") if has_off else None,
        )


def atm_param_shapes(channels: int, groups: int, predict_offsets: bool = True) -> dict[str, tuple]:
    """Relative parameter names and shapes of one ATM module."""
    C, G = channels, groups
    shapes = {}
    if predict_offsets:
        for br in ("offset_w", "offset_h"):
            shapes[br + ".weight"] = (C, G)
            shapes[br + ".bias"] = (G,)
    for br in ("fc_w", "fc_h", "fc_i"):
        shapes[br + ".weight"] = (C, C)
        shapes[br + ".bias"] = (C,)
    for g in ("gate_w", "gate_h", "gate_i"):
        shapes[g] = (C, C)
    return shapes


def predict_offsets(x: Array, fc: Linear, axis: str) -> OffsetField:
    """Shared per-token affine map C -> G; raw, unclamped displacements."""
    C = x.shape[-1]
    if fc.weight.shape[0] != C:
        raise DimensionError(f"offset predictor expects {fc.weight.shape[0]} channels, input has {C}")
    G = fc.weight.shape[1]
    if C % G:
        raise ArgumentError(f"{G} offset groups do not divide {C} channels")
    return OffsetField(fc(x), axis, C // G)


def _recompose(x: Array, off: OffsetField, axis: str) -> Array:
    if off.axis != axis:
        raise ArgumentError(f"expected {axis} offsets, got {off.axis}")
    if off.group_size * off.groups != x.shape[-1]:
        raise ArgumentError(
            f"offsets cover {off.group_size}x{off.groups} channels, features have {x.shape[-1]}")
    return E.gather_interp_1d(x, off.values, axis, off.group_size)


def recompose_w(x: Array, off: OffsetField) -> Array:
    return _recompose(x, off, "width")


def recompose_h(x: Array, off: OffsetField) -> Array:
    return _recompose(x, off, "height")


def fuse(x_w: Array, x_h: Array, x_i: Array, params: AtmParams, return_gates: bool = False):
    """Embed the three branches and mix them with per-channel softmax gates.

    Returns the fused features, plus ``(alphas, (hat_w, hat_h, hat_i))``
    when ``return_gates`` is set; ``alphas`` is (..., 3C) laid out as
    [alpha_w | alpha_h | alpha_i].
    """
    if not (x_w.shape == x_h.shape == x_i.shape):
        raise DimensionError(f"fuse: branch shapes differ {x_w.shape}, {x_h.shape}, {x_i.shape}")
    C = params.channels
    hat_w, hat_h, hat_i = params.fc_w(x_w), params.fc_h(x_h), params.fc_i(x_i)
    total = E.add(E.add(hat_w, hat_h), hat_i)
    logits = E.concat([E.affine(total, params.gate_w), E.affine(total, params.gate_h),
                       E.affine(total, params.gate_i)], axis=-1)
    alphas = E.softmax_groups(logits, 3)
    out = E.mul(E.slice_last(alphas, 0, C), hat_w)
    out = E.add(out, E.mul(E.slice_last(alphas, C, 2 * C), hat_h))
    out = E.add(out, E.mul(E.slice_last(alphas, 2 * C, 3 * C), hat_i))
    if return_gates:
        return out, alphas, (hat_w, hat_h, hat_i)
    return out


def atm_forward(x: Array, params: AtmParams,
                cached: tuple[OffsetField, OffsetField] | None = None):
    """One ATM module. Returns ``(output, (offsets_w, offsets_h))``.

    With ``cached`` the given offsets are reused verbatim; otherwise they are
    predicted from ``x`` and returned so later blocks can share them.
    """
    if x.ndim != 4 or x.shape[-1] != params.channels:
        raise DimensionError(f"atm_forward: expected (B,H,W,{params.channels}), got {x.shape}")
    if cached is None:
        if not params.predicts_offsets:
            raise ArgumentError("ATM module has no offset predictor and no cached offsets were given")
        off_w = predict_offsets(x, params.offset_w, "width")
        off_h = predict_offsets(x, params.offset_h, "height")
    else:
        off_w, off_h = cached
        for off, axis in ((off_w, "width"), (off_h, "height")):
            if off.axis != axis or off.groups != params.groups:
                raise ArgumentError(
                    f"cached {off.axis} offsets with G={off.groups} do not match "
                    f"expected {axis} offsets with G={params.groups}")
            if off.values.shape[:3] != x.shape[:3]:
                raise ArgumentError(f"cached offsets {off.values.shape} do not match input {x.shape}")
    out = fuse(recompose_w(x, off_w), recompose_h(x, off_h), x, params)
    return out, (off_w, off_h)


# Per-token cost terms (multiply-accumulates). Elementwise work is counted
# one MAC per arithmetic step.
def atm_flop_terms(C: int, G: int, predict_offsets: bool = True) -> dict[str, int]:
    """Per-token MAC count of one ATM module, term by term."""
    return {
        "offset_fc": 2 * C * G if predict_offsets else 0,  # two C->G predictors
        "interp": 2 * 2 * C,          # two branches, two-tap lerp per channel
        "branch_fc": 3 * C * C,       # FC^W, FC^H, FC^I
        "branch_sum": 2 * C,          # hat_w + hat_h + hat_i
        "gate_fc": 3 * C * C,         # three C x C gate matrices
        "softmax": 3 * 3 * C,         # exp, sum, divide over 3 entries per channel
        "weighted_sum": 3 * C,        # sum_b alpha_b * hat_b
    }


def atm_flops(H: int, W: int, C: int, G: int, predict_offsets: bool = True) -> int:
    """MACs of one ATM module on an H x W map: H*W*(6C^2 + 2CG + 18C)."""
    if min(H, W, C, G) < 1:
        raise ArgumentError("atm_flops: extents must be positive")
    return H * W * sum(atm_flop_terms(C, G, predict_offsets).values())


def init_atm_params(rng: np.random.Generator, channels: int, groups: int,
                    predict_offsets: bool = True, dtype=np.float32) -> dict[str, Array]:
    """Fan-in uniform weights, zero biases (offsets start at zero)."""
    out = {}
    for name, shape in atm_param_shapes(channels, groups, predict_offsets).items():
        out[name] = init_param(rng, name, shape, dtype)
    return out
