"""ATM blocks, the four-stage ATMNet backbone and its cost accounting.

Stage i: overlapping patch embedding (conv + LN) -> PEG -> N_i ATM blocks.
The stem embedding uses k=7, s=4, p=3; later ones k=3, s=2, p=1. The head is
LN -> global average pool -> linear classifier.

Parameter names are hierarchical, e.g. ``stage3.block7.atm.fc_w.weight``
(stages and blocks numbered from 1). Only the first block of every
``refresh``-sized group owns offset predictors; the others reuse them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import engine as E
from .atm import AtmParams, atm_flop_terms, atm_forward, atm_param_shapes
from .config import VariantConfig, get_variant
from .engine import Array
from .errors import DimensionError, ResolutionError
from .layers import Linear, init_param

LN_EPS = 1e-6
STEM = (7, 4, 3)          # kernel, stride, padding
DOWNSAMPLE = (3, 2, 1)


def embed_geometry(stage: int) -> tuple[int, int, int]:
    return STEM if stage == 0 else DOWNSAMPLE


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def block_param_shapes(C: int, E_: int, G: int, predict_offsets: bool) -> dict[str, tuple]:
    shapes = {"norm1.gamma": (C,), "norm1.beta": (C,)}
    shapes.update({"atm." + k: v for k, v in atm_param_shapes(C, G, predict_offsets).items()})
    shapes.update({
        "norm2.gamma": (C,), "norm2.beta": (C,),
        "mlp.fc1.weight": (C, E_ * C), "mlp.fc1.bias": (E_ * C,),
        "mlp.fc2.weight": (E_ * C, C), "mlp.fc2.bias": (C,),
    })
    return shapes


def param_shapes(cfg: VariantConfig, in_channels: int = 3) -> dict[str, tuple]:
    """Ordered ``name -> shape`` for every learnable tensor of a variant."""
    shapes: dict[str, tuple] = {}
    c_prev = in_channels
    for i, st in enumerate(cfg.stages, 1):
        k, _, _ = embed_geometry(i - 1)
        p = f"stage{i}."
        shapes[p + "embed.weight"] = (k, k, c_prev, st.channels)
        shapes[p + "embed.bias"] = (st.channels,)
        shapes[p + "embed_norm.gamma"] = (st.channels,)
        shapes[p + "embed_norm.beta"] = (st.channels,)
        shapes[p + "peg.kernel"] = (3, 3, st.channels)
        for j in range(st.depth):
            refresh = j % st.refresh == 0
            for name, shape in block_param_shapes(st.channels, st.expansion, st.offsets, refresh).items():
                shapes[f"{p}block{j + 1}.{name}"] = shape
        c_prev = st.channels
    shapes["head.norm.gamma"] = (c_prev,)
    shapes["head.norm.beta"] = (c_prev,)
    shapes["head.fc.weight"] = (c_prev, cfg.num_classes)
    shapes["head.fc.bias"] = (cfg.num_classes,)
    return shapes


@dataclass
class Model:
    cfg: VariantConfig
    params: dict[str, Array]

    def named_parameters(self):
        return self.params.items()

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, {k: Array(v.data.astype(dtype), requires_grad=True)
                                for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def build_variant(cfg: VariantConfig | str, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise a model from its config and a seed."""
    if isinstance(cfg, str):
        cfg = get_variant(cfg)
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {name: init_param(rng, name, shape, dtype) for name, shape in param_shapes(cfg).items()}
    return Model(cfg, params)


def count_params(model: Model | VariantConfig | Mapping[str, Array]) -> int:
    """Learnable scalars; a bare config is counted from its shapes alone."""
    if isinstance(model, VariantConfig):
        return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(model).values()))
    params = model.params if isinstance(model, Model) else model
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    norm1: tuple[Array, Array]
    atm: AtmParams
    norm2: tuple[Array, Array]
    fc1: Linear
    fc2: Linear
    drop_prob: float = 0.0

    @classmethod
    def from_named(cls, params: Mapping[str, Array], prefix: str, groups: int,
                   drop_prob: float = 0.0) -> "BlockParams":
        return cls(
            norm1=(params[prefix + "norm1.gamma"], params[prefix + "norm1.beta"]),
            atm=AtmParams.from_named(params, prefix + "atm.", groups),
            norm2=(params[prefix + "norm2.gamma"], params[prefix + "norm2.beta"]),
            fc1=Linear(params[prefix + "mlp.fc1.weight"], params[prefix + "mlp.fc1.bias"]),
            fc2=Linear(params[prefix + "mlp.fc2.weight"], params[prefix + "mlp.fc2.bias"]),
            drop_prob=drop_prob,
        )


def drop_path(x: Array, prob: float, rng: np.random.Generator | None) -> Array:
    """Per-sample stochastic depth; identity when ``rng`` is None or prob == 0."""
    if rng is None or prob <= 0.0:
        return x
    keep = 1.0 - prob
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / x.dtype.type(keep)
    return E.mul(x, Array(mask.reshape((-1,) + (1,) * (x.ndim - 1))))


def atm_block(x: Array, params: BlockParams, cached_offsets=None, rng=None):
    """X^ = ATM(LN(X)) + X;  X' = MLP(LN(X^)) + X^.

    ``rng`` enables drop-path (training only). Returns ``(X', offsets)``
    where offsets are the freshly predicted pair or ``cached_offsets``.
    """
    if x.ndim != 4 or x.shape[-1] != params.atm.channels:
        raise DimensionError(f"atm_block: expected (B,H,W,{params.atm.channels}), got {x.shape}")
    y, offsets = atm_forward(E.layer_norm(x, *params.norm1, LN_EPS), params.atm, cached_offsets)
    x = E.add(x, drop_path(y, params.drop_prob, rng))
    h = E.gelu(params.fc1(E.layer_norm(x, *params.norm2, LN_EPS)))
    x = E.add(x, drop_path(params.fc2(h), params.drop_prob, rng))
    return x, offsets


def peg(x: Array, kernel: Array) -> Array:
    """Positional encoding generator: x + depthwise3x3(x) with zero padding."""
    return E.add(x, E.depthwise_conv2d(x, kernel))


def check_resolution(H: int, W: int) -> None:
    if H % 32 or W % 32 or H < 32 or W < 32:
        raise ResolutionError(f"input resolution {H}x{W} must be a positive multiple of 32 on both axes")


def drop_path_schedule(cfg: VariantConfig) -> list[float]:
    total = sum(cfg.depths)
    if total == 1:
        return [cfg.drop_path_rate]
    return [cfg.drop_path_rate * i / (total - 1) for i in range(total)]


OffsetHook = Callable[[int, int, object, object], None]


def to_channels_last(images) -> Array:
    images = images if isinstance(images, Array) else Array(np.asarray(images))
    if images.ndim != 4:
        raise DimensionError(f"expected images shaped (B, C, H, W), got {images.shape}")
    return E.transpose(images, (0, 2, 3, 1))


def forward_features(model: Model, images, training: bool = False,
                     rng: np.random.Generator | None = None,
                     on_offsets: OffsetHook | None = None) -> list[Array]:
    """Run the four stages; returns the per-stage (B, H_i, W_i, C_i) maps.

    ``on_offsets(stage, block, off_w, off_h)`` is called once per offset
    prediction (1-based stage/block numbers).
    """
    x = to_channels_last(images)
    if x.dtype != model.dtype:
        x = Array(x.data.astype(model.dtype))
    B, H, W, C = x.shape
    check_resolution(H, W)
    if C != model.params["stage1.embed.weight"].shape[2]:
        raise DimensionError(f"expected {model.params['stage1.embed.weight'].shape[2]} input channels, got {C}")
    P = model.params
    dpr = drop_path_schedule(model.cfg)
    drop_rng = rng if training else None
    feats = []
    depth_idx = 0
    for i, st in enumerate(model.cfg.stages, 1):
        k, s, pad = embed_geometry(i - 1)
        p = f"stage{i}."
        x = E.conv2d(x, P[p + "embed.weight"], P[p + "embed.bias"], stride=s, padding=pad)
        x = E.layer_norm(x, P[p + "embed_norm.gamma"], P[p + "embed_norm.beta"], LN_EPS)
        x = peg(x, P[p + "peg.kernel"])
        cached = None
        for j in range(st.depth):
            bp = BlockParams.from_named(P, f"{p}block{j + 1}.", st.offsets, dpr[depth_idx])
            depth_idx += 1
            refresh = j % st.refresh == 0
            x, offs = atm_block(x, bp, None if refresh else cached, drop_rng)
            if refresh:
                cached = offs
                if on_offsets is not None:
                    on_offsets(i, j + 1, *offs)
        feats.append(x)
    return feats


def head(model: Model, x: Array) -> Array:
    P = model.params
    x = E.layer_norm(x, P["head.norm.gamma"], P["head.norm.beta"], LN_EPS)
    return E.affine(E.global_avg_pool(x), P["head.fc.weight"], P["head.fc.bias"])


def forward(model: Model, images, training: bool = False, rng=None, on_offsets=None) -> Array:
    """Images (B, 3, H, W) -> logits (B, num_classes)."""
    feats = forward_features(model, images, training, rng, on_offsets)
    return head(model, feats[-1])


# ---------------------------------------------------------------------------
# FLOP accounting (multiply-accumulate convention)
# ---------------------------------------------------------------------------

# Secondary per-element costs, counted one MAC per arithmetic step.
LN_COST = 4          # per channel: centre, square, normalise, scale/shift
GELU_COST = 1        # per element
ADD_COST = 1         # per element of a residual add


def stage_extents(H: int, W: int) -> list[tuple[int, int]]:
    out = []
    for i in range(4):
        k, s, p = embed_geometry(i)
        H = E.conv_output_extent(H, k, s, p)
        W = E.conv_output_extent(W, k, s, p)
        out.append((H, W))
    return out


def flop_breakdown(model: Model | VariantConfig, H: int, W: int, in_channels: int = 3) -> dict[str, int]:
    """Per-category MAC counts for one image at H x W."""
    cfg = model.cfg if isinstance(model, Model) else model
    check_resolution(H, W)
    cost = dict.fromkeys(("embed", "peg", "atm", "mlp", "norm", "residual", "head"), 0)
    c_prev = in_channels
    for i, (st, (h, w)) in enumerate(zip(cfg.stages, stage_extents(H, W))):
        k, _, _ = embed_geometry(i)
        n = h * w
        C = st.channels
        cost["embed"] += n * k * k * c_prev * C
        cost["norm"] += n * LN_COST * C
        cost["peg"] += n * (9 * C + ADD_COST * C)
        for j in range(st.depth):
            refresh = j % st.refresh == 0
            cost["atm"] += n * sum(atm_flop_terms(C, st.offsets, refresh).values())
            cost["mlp"] += n * (2 * st.expansion * C * C + GELU_COST * st.expansion * C)
            cost["norm"] += n * 2 * LN_COST * C
            cost["residual"] += n * 2 * ADD_COST * C
        c_prev = C
        last = n
    cost["head"] = last * (LN_COST * c_prev + c_prev) + c_prev * cfg.num_classes
    return cost


def count_flops(model: Model | VariantConfig, H: int, W: int) -> int:
    return int(sum(flop_breakdown(model, H, W).values()))
