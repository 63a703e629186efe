"""AdamW, warmup+cosine schedule and the desk-scale training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from . import engine as E
from .backbone import Model, build_variant, forward
from .config import TrainConfig
from .data import Dataset, hflip, load_dataset
from .engine import Array, Tape
from .errors import NumericError, OptimizerStateError
from .layers import no_weight_decay


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def adamw_step(params: Mapping[str, Array], state: OptimState, lr: float | None = None,
               skip: Iterable[str] = ()) -> OptimState:
    """One in-place AdamW update with decoupled weight decay.

    Decayed parameters are first shrunk by ``1 - lr * wd``, then moved by the
    bias-corrected Adam direction. Names in ``skip`` are left untouched.
    """
    lr = state.lr if lr is None else lr
    skip = set(skip)
    missing = [n for n, p in params.items() if n not in skip and p.grad is None]
    if missing:
        raise OptimizerStateError(f"no gradient for {missing[0]!r} ({len(missing)} missing); run backward first")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name in skip:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise OptimizerStateError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and not no_weight_decay(name):
            p.data *= p.dtype.type(1.0 - lr * state.weight_decay)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then half-cosine down to ``min_lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    progress = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def offset_param_names(model: Model) -> list[str]:
    return [n for n in model.params if ".atm.offset_" in n]


def freeze_offsets(model: Model) -> list[str]:
    """Zero every offset predictor so all sampled positions stay on the query."""
    names = offset_param_names(model)
    for n in names:
        model.params[n].data[...] = 0.0
    return names


def evaluate(model: Model, data: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss (no smoothing) and accuracy over the whole dataset."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x, y = data.batch(slice(start, start + batch_size))
        logits = forward(model, x)
        total_loss += float(E.cross_entropy(logits, y).item()) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / len(data), correct / len(data)


@dataclass
class TrainReport:
    rows: list[tuple[int, float, float, float]]   # step, loss, lr, batch accuracy
    model: Model
    final_loss: float
    final_accuracy: float
    first_offset_grad_norm: float

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
                self._write(fh)

    def _write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss", "lr", "acc"))
        for step, loss, lr, acc in self.rows:
            w.writerow((step, repr(loss), repr(lr), repr(acc)))


StepHook = Callable[[int, Model], None]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from fresh per-epoch permutations."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def train(cfg: TrainConfig, data: Dataset | None = None, on_step: StepHook | None = None) -> TrainReport:
    """Run ``cfg.total_steps`` optimisation steps; deterministic in ``cfg.seed``.

    ``on_step(step, model)`` runs after backward and before the update, so
    gradients are inspectable there.
    """
    cfg.validate()
    if data is None:
        data = load_dataset(cfg.data, cfg.seed)
    model_cfg = cfg.model_config()
    if model_cfg.num_classes != data.num_classes:
        model_cfg = replace(model_cfg, num_classes=data.num_classes)
    model = build_variant(model_cfg, seed=cfg.seed)
    frozen = freeze_offsets(model) if cfg.freeze_offsets else []
    offsets = offset_param_names(model)
    state = OptimState.from_config(cfg)

    # independent streams so changing one knob does not reshuffle the others
    order_rng, aug_rng, drop_rng = (np.random.default_rng([cfg.seed, k]) for k in range(3))
    batches = _batches(len(data), min(cfg.batch_size, len(data)), order_rng)
    rows = []
    first_norm = float("nan")
    for step in range(1, cfg.total_steps + 1):
        idx = next(batches)
        x, y = data.batch(idx)
        if cfg.hflip:
            x = hflip(x, aug_rng)
        for p in model.params.values():
            p.zero_grad()
        with Tape() as tape:
            logits = forward(model, x, training=True, rng=drop_rng)
            loss = E.cross_entropy(logits, y, cfg.label_smoothing)
        loss_val = float(loss.item())
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss ({loss_val}) at step {step}", step)
        tape.backward(loss)
        if step == 1:
            first_norm = float(math.sqrt(sum(float(np.sum(model.params[n].grad ** 2))
                                             for n in offsets if model.params[n].grad is not None)))
        if on_step is not None:
            on_step(step, model)
        lr = lr_at(step, cfg)
        adamw_step(model.params, state, lr, skip=frozen)
        acc = float((logits.data.argmax(axis=1) == y).mean())
        rows.append((step, loss_val, lr, acc))
    final_loss, final_acc = evaluate(model, data)
    if not math.isfinite(final_loss):
        raise NumericError("non-finite loss in final evaluation", cfg.total_steps)
    return TrainReport(rows, model, final_loss, final_acc, first_norm)
