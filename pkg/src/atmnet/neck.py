"""FPN neck with an optional ATM replacement for the per-level output convs.

Both modes share the lateral 1x1 projections and the top-down pathway
(nearest 2x upsampling, scaled by a learnable per-level weight that starts
at 1, then added). They differ only in the per-level output transform: a
3x3 conv (``plain``) or one ATM module (``atm``, G = out_channels // 8,
offsets never shared across levels).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .atm import AtmParams, atm_flops, atm_forward, atm_param_shapes
from .engine import Array
from .errors import ArgumentError
from .layers import init_param

MODES = ("plain", "atm")
LEVEL_STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    levels: list[Array]
    strides: tuple[int, ...] = LEVEL_STRIDES

    def validate(self) -> "FeaturePyramid":
        if len(self.levels) != 4 or len(self.strides) != 4:
            raise ArgumentError(f"pyramid needs 4 levels, got {len(self.levels)}")
        for a, b in zip(self.levels, self.levels[1:]):
            if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0]:
                raise ArgumentError("pyramid levels must be (B, H, W, C) maps with a shared batch")
            if a.shape[1] != 2 * b.shape[1] or a.shape[2] != 2 * b.shape[2]:
                raise ArgumentError(
                    f"adjacent levels must differ by exactly 2x: {a.shape[1:3]} vs {b.shape[1:3]}")
        for s, t in zip(self.strides, self.strides[1:]):
            if t != 2 * s:
                raise ArgumentError(f"stride chain must double per level, got {self.strides}")
        return self

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(x.shape[-1] for x in self.levels)


def fpn_param_shapes(in_channels, out_channels: int = 256, mode: str = "atm") -> dict[str, tuple]:
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    if out_channels % 8:
        raise ArgumentError("out_channels must be divisible by 8")
    shapes = {}
    for i, c in enumerate(in_channels):
        shapes[f"lateral{i}.weight"] = (c, out_channels)
        shapes[f"lateral{i}.bias"] = (out_channels,)
    for i in range(len(in_channels) - 1):
        shapes[f"topdown{i}.scale"] = (1,)
    for i in range(len(in_channels)):
        if mode == "plain":
            shapes[f"output{i}.weight"] = (3, 3, out_channels, out_channels)
            shapes[f"output{i}.bias"] = (out_channels,)
        else:
            for k, v in atm_param_shapes(out_channels, out_channels // 8).items():
                shapes[f"output{i}.atm.{k}"] = v
    return shapes


@dataclass
class FpnParams:
    mode: str
    out_channels: int
    params: dict[str, Array]


def build_fpn(in_channels, out_channels: int = 256, mode: str = "atm", seed: int = 0,
              dtype=np.float32) -> FpnParams:
    rng = np.random.default_rng(seed)
    params = {k: init_param(rng, k, s, dtype) for k, s in fpn_param_shapes(in_channels, out_channels, mode).items()}
    return FpnParams(mode, out_channels, params)


def fpn_forward(pyramid: FeaturePyramid, fpn: FpnParams, mode: str | None = None) -> FeaturePyramid:
    mode = fpn.mode if mode is None else mode
    if mode != fpn.mode:
        raise ArgumentError(f"parameters were built for mode {fpn.mode!r}, not {mode!r}")
    pyramid.validate()
    P = fpn.params
    lat = [E.affine(x, P[f"lateral{i}.weight"], P[f"lateral{i}.bias"]) for i, x in enumerate(pyramid.levels)]
    merged = [None] * 4
    merged[3] = lat[3]
    for i in (2, 1, 0):
        up = E.upsample_nearest2x(merged[i + 1])
        merged[i] = E.add(lat[i], E.mul(up, P[f"topdown{i}.scale"]))
    outs = []
    for i, m in enumerate(merged):
        if mode == "plain":
            outs.append(E.conv2d(m, P[f"output{i}.weight"], P[f"output{i}.bias"], stride=1, padding=1))
        else:
            atm = AtmParams.from_named(P, f"output{i}.atm.", fpn.out_channels // 8)
            outs.append(atm_forward(m, atm)[0])
    return FeaturePyramid(outs, pyramid.strides)


def fpn_flops(level_extents, in_channels, out_channels: int = 256, mode: str = "atm") -> int:
    """MACs of the neck for given per-level (H, W) extents."""
    total = 0
    for (h, w), c in zip(level_extents, in_channels):
        total += h * w * c * out_channels
        if mode == "plain":
            total += h * w * 9 * out_channels * out_channels
        else:
            total += atm_flops(h, w, out_channels, out_channels // 8)
    return total
