"""Architecture/training configuration and the ``key = value`` config grammar.

Config files are line oriented::

    # comment
    [model]
    variant = xT
    num_classes = 10

    [train]
    lr = 1e-3

Sections are ``[model]``, ``[train]`` and ``[data]``; unknown sections or keys
raise :class:`ConfigError` with the offending line number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

STAGE_STRIDES = (4, 2, 2, 2)


@dataclass(frozen=True)
class StageConfig:
    channels: int
    expansion: int
    depth: int
    offsets: int
    stride: int
    refresh: int

    def validate(self, where: str = "stage") -> None:
        if self.channels < 1 or self.offsets < 1 or self.channels % self.offsets:
            raise ConfigError(f"{where}: offsets ({self.offsets}) must divide channels ({self.channels})")
        if self.depth < 1:
            raise ConfigError(f"{where}: depth must be >= 1, got {self.depth}")
        if self.expansion < 1:
            raise ConfigError(f"{where}: expansion must be >= 1, got {self.expansion}")
        if self.stride not in (2, 4):
            raise ConfigError(f"{where}: stride must be 2 or 4, got {self.stride}")
        if self.refresh < 1:
            raise ConfigError(f"{where}: offset refresh period must be >= 1, got {self.refresh}")

    @property
    def offset_predictions(self) -> int:
        return math.ceil(self.depth / self.refresh)


@dataclass(frozen=True)
class VariantConfig:
    name: str
    stages: tuple[StageConfig, ...]
    num_classes: int = 1000
    drop_path_rate: float = 0.0

    def validate(self) -> "VariantConfig":
        if len(self.stages) != 4:
            raise ConfigError(f"{self.name}: expected 4 stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            st.validate(f"{self.name} stage {i}")
        strides = tuple(s.stride for s in self.stages)
        if strides != STAGE_STRIDES:
            raise ConfigError(f"{self.name}: stage strides must be {STAGE_STRIDES}, got {strides}")
        if self.num_classes < 1:
            raise ConfigError(f"{self.name}: num_classes must be >= 1")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"{self.name}: drop_path_rate must lie in [0, 1)")
        return self

    # column views, handy for tables and serialisation
    @property
    def channels(self):
        return tuple(s.channels for s in self.stages)

    @property
    def expansions(self):
        return tuple(s.expansion for s in self.stages)

    @property
    def depths(self):
        return tuple(s.depth for s in self.stages)

    @property
    def offsets(self):
        return tuple(s.offsets for s in self.stages)

    @property
    def refresh(self) -> int:
        return self.stages[0].refresh

    def to_items(self) -> dict[str, str]:
        def join(v):
            return ",".join(str(a) for a in v)

        return {
            "name": self.name,
            "channels": join(self.channels),
            "expansions": join(self.expansions),
            "depths": join(self.depths),
            "offsets": join(self.offsets),
            "refresh": str(self.refresh),
            "num_classes": str(self.num_classes),
            "drop_path_rate": repr(self.drop_path_rate),
        }

    def to_text(self) -> str:
        lines = ["[model]"] + [f"{k} = {v}" for k, v in self.to_items().items()]
        return "\n".join(lines) + "\n"


def make_variant(name, channels, expansions, depths, offsets, refresh,
                 num_classes=1000, drop_path_rate=0.0) -> VariantConfig:
    stages = tuple(StageConfig(c, e, d, o, s, refresh)
                   for c, e, d, o, s in zip(channels, expansions, depths, offsets, STAGE_STRIDES))
    if len({len(channels), len(expansions), len(depths), len(offsets)}) != 1:
        raise ConfigError(f"{name}: per-stage lists must have equal length")
    return VariantConfig(name, stages, num_classes, drop_path_rate).validate()


VARIANTS: dict[str, VariantConfig] = {
    "xT": make_variant("xT", (64, 128, 320, 512), (4, 4, 4, 4), (2, 2, 4, 2), (32, 32, 80, 64), 2,
                       drop_path_rate=0.1),
    "T": make_variant("T", (64, 128, 320, 512), (4, 4, 4, 4), (2, 3, 10, 3), (32, 32, 80, 64), 2,
                      drop_path_rate=0.1),
    "S": make_variant("S", (64, 128, 320, 512), (8, 8, 4, 8), (3, 4, 18, 4), (32, 32, 80, 64), 6,
                      drop_path_rate=0.2),
    "B": make_variant("B", (64, 128, 320, 512), (8, 8, 4, 8), (3, 8, 27, 8), (32, 32, 80, 64), 6,
                      drop_path_rate=0.3),
    "L": make_variant("L", (96, 192, 384, 768), (4, 4, 4, 4), (3, 4, 24, 4), (48, 48, 96, 96), 6,
                      drop_path_rate=0.3),
}

# Desk-scale model for gradient checks, oracles and the toy training runs.
MICRO = make_variant("micro", (8, 16, 24, 32), (2, 2, 2, 2), (1, 1, 2, 1), (4, 8, 12, 16), 2,
                     num_classes=2)


def get_variant(name: str, **overrides) -> VariantConfig:
    presets = {**VARIANTS, "micro": MICRO}
    if name not in presets:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(presets)}")
    cfg = presets[name]
    return replace(cfg, **overrides).validate() if overrides else cfg


@dataclass
class DataConfig:
    kind: str = "synthetic"          # synthetic | cifar
    task: str = "stripes"            # synthetic task name
    path: str = ""                   # CIFAR-style binary file
    num_samples: int = 256
    resolution: int = 32


@dataclass
class TrainConfig:
    variant: str = "micro"
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 25
    total_steps: int = 500
    batch_size: int = 16
    label_smoothing: float = 0.1
    hflip: bool = True
    freeze_offsets: bool = False
    seed: int = 0
    model: VariantConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.data.kind not in ("synthetic", "cifar"):
            raise ConfigError(f"data kind must be 'synthetic' or 'cifar', got {self.data.kind!r}")
        return self

    def model_config(self) -> VariantConfig:
        return self.model if self.model is not None else get_variant(self.variant)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_MODEL_KEYS = ("variant", "name", "channels", "expansions", "depths", "offsets",
               "refresh", "num_classes", "drop_path_rate")


def parse_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    """Split config text into ``{section: {key: (value, line)}}``."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in ("model", "train", "data"):
                raise ConfigError(f"unknown section [{current}]", lineno)
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if current is None:
            raise ConfigError("key outside of a section", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        sections[current][key] = (value, lineno)
    return sections


def _convert(value: str, typ, key: str, line: int):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if typ == "ints":
            return tuple(int(v) for v in value.split(","))
        return typ(value)
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for {key}", line) from None


def model_from_items(items: dict[str, tuple[str, int]]) -> VariantConfig:
    for key, (_, line) in items.items():
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown key {key!r} in [model]", line)
    base = items.get("variant")
    if base is not None:
        cfg = get_variant(base[0])
    else:
        needed = ("channels", "expansions", "depths", "offsets", "refresh")
        missing = [k for k in needed if k not in items]
        if missing:
            raise ConfigError(f"[model] needs 'variant' or all of {needed}; missing {missing}")
        cfg = None
    conv = {}
    for key, typ in (("name", str), ("channels", "ints"), ("expansions", "ints"), ("depths", "ints"),
                     ("offsets", "ints"), ("refresh", int), ("num_classes", int),
                     ("drop_path_rate", float)):
        if key in items:
            conv[key] = _convert(items[key][0], typ, key, items[key][1])
    merged = {
        "name": cfg.name if cfg else "custom",
        "channels": cfg.channels if cfg else None,
        "expansions": cfg.expansions if cfg else None,
        "depths": cfg.depths if cfg else None,
        "offsets": cfg.offsets if cfg else None,
        "refresh": cfg.refresh if cfg else None,
        "num_classes": cfg.num_classes if cfg else 1000,
        "drop_path_rate": cfg.drop_path_rate if cfg else 0.0,
    }
    merged.update(conv)
    line = min((ln for _, ln in items.values()), default=None)
    try:
        return make_variant(**merged)
    except ConfigError as exc:
        raise ConfigError(str(exc), line) from None


def variant_from_text(text: str) -> VariantConfig:
    sections = parse_sections(text)
    if "model" not in sections:
        raise ConfigError("missing [model] section")
    return model_from_items(sections["model"])


def _fill(obj, items, section):
    types = {f.name: f.type for f in fields(obj)}
    for key, (value, line) in items.items():
        if key not in types or key in ("model", "data"):
            raise ConfigError(f"unknown key {key!r} in [{section}]", line)
        default = getattr(obj, key)
        typ = type(default) if default is not None else str
        setattr(obj, key, _convert(value, typ, key, line))


def train_config_from_text(text: str) -> TrainConfig:
    sections = parse_sections(text)
    cfg = TrainConfig()
    _fill(cfg, sections.get("train", {}), "train")
    _fill(cfg.data, sections.get("data", {}), "data")
    if "model" in sections:
        model_items = sections["model"]
        cfg.model = model_from_items(model_items)
        cfg.variant = cfg.model.name
    try:
        return cfg.validate()
    except ConfigError as exc:
        # point at the last line that set one of the keys the message names
        named = [ln for sec in sections.values() for k, (_, ln) in sec.items() if k in str(exc)]
        raise ConfigError(str(exc), max(named, default=None)) from None


def load_train_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return train_config_from_text(fh.read())
