"""Cross-entropy loss, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, LabelError
from .model import Model, backward, forward, save_checkpoint
from .views import ViewCombination

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(
    probabilities: np.ndarray, onehot: np.ndarray, class_weights: Optional[np.ndarray] = None
) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    The gradient is the fused softmax/cross-entropy form ``(p - y) / n``,
    scaled per sample by ``class_weights[true class]`` when weights are given.
    """
    if probabilities.shape != onehot.shape:
        raise LabelError(f"probabilities {probabilities.shape} and labels {onehot.shape} differ in shape")
    is_binary = np.all((onehot == 0) | (onehot == 1), axis=1)
    bad = np.flatnonzero(~is_binary | (onehot.sum(axis=1) != 1))
    if bad.size:
        raise LabelError(f"label row {bad[0]} is not one-hot")
    n = probabilities.shape[0]
    true = onehot.argmax(axis=1)
    p_true = np.maximum(probabilities[np.arange(n), true].astype(np.float64), PROB_FLOOR)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[true]
    loss = float(-(w * np.log(p_true)).sum() / n)
    d_logits = (probabilities - onehot) * (w / n)[:, None].astype(probabilities.dtype)
    return loss, d_logits.astype(probabilities.dtype)


def inverse_frequency_weights(labels: np.ndarray, class_count: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    weights = np.zeros(class_count)
    present = counts > 0
    weights[present] = len(labels) / (present.sum() * counts[present])
    return weights


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``' arrays."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for key, g in grads.items():
        theta = params[key]
        m = state.m.setdefault(key, np.zeros_like(theta))
        v = state.v.setdefault(key, np.zeros_like(theta))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        theta -= step.astype(theta.dtype, copy=False)
    return params, state


def model_parameters(model: Model) -> dict[str, np.ndarray]:
    """Trainable arrays keyed ``"<layer>.<field>"`` (running stats excluded)."""
    out = {}
    for spec, p in model.layers:
        for name in ("weights", "bias", "bn_gamma", "bn_beta"):
            arr = getattr(p, name)
            if arr is not None:
                out[f"{spec.name}.{name}"] = arr
    return out


def flatten_grads(grads: dict) -> dict[str, np.ndarray]:
    return {f"{layer}.{name}": g for layer, gs in grads.items() for name, g in gs.items()}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_rate: float = 0.2
    seed: int = 0
    view_combination: ViewCombination = ViewCombination.RGB_GM
    checkpoint_every: int = 0
    class_weighting: bool = False

    def __post_init__(self):
        self.view_combination = ViewCombination.parse(self.view_combination)
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.epsilon)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_seconds: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean([r.wall_seconds for r in self.records])) if self.records else 0.0

    def write_csv(self, path: "str | Path", include_seconds: bool = True) -> None:
        """Write one row per epoch, floats with 6 decimals.

        Without ``include_seconds`` the file depends only on (seed, data,
        config) and is byte-for-byte reproducible.
        """
        cols = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
        if include_seconds:
            cols.append("seconds")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                row = [r.epoch] + [f"{v:.6f}" for v in (r.train_loss, r.train_acc, r.val_loss, r.val_acc)]
                if include_seconds:
                    row.append(f"{r.wall_seconds:.6f}")
                w.writerow(row)

    def write_timing(self, path: "str | Path") -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.wall_seconds:.6f}"])

    @classmethod
    def read_csv(cls, path: "str | Path") -> "History":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                EpochRecord(
                    int(r["epoch"]),
                    float(r["train_loss"]),
                    float(r["train_acc"]),
                    float(r["val_loss"]),
                    float(r["val_acc"]),
                    float(r.get("seconds") or 0.0),
                )
                for r in rows
            ]
        )


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def train_epoch(
    model: Model,
    train_set,
    config: TrainConfig,
    epoch_index: int,
    state: AdamState,
    class_weights: Optional[np.ndarray] = None,
) -> tuple[float, float]:
    """One pass over ``train_set``; returns ``(mean loss, accuracy)``.

    ``train_set`` is any source with ``batches(batch_size, seed, epoch)``.
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    params = model_parameters(model)
    loss_sum = 0.0
    correct = 0
    seen = 0
    for b, (x, y) in enumerate(train_set.batches(config.batch_size, config.seed, epoch_index)):
        probs, cache = forward(model, x, "train", seed=_batch_seed(config.seed, epoch_index, b))
        loss, d_logits = cross_entropy(probs, y, class_weights)
        grads, _ = backward(model, cache, d_logits)
        adam_step(params, flatten_grads(grads), state)
        n = len(x)
        loss_sum += loss * n
        correct += int((probs.argmax(axis=1) == y.argmax(axis=1)).sum())
        seen += n
    return loss_sum / seen, correct / seen


def evaluate_loss(model: Model, source, batch_size: int = 32) -> tuple[float, float]:
    """Infer-mode ``(mean loss, accuracy)`` over a source."""
    loss_sum = 0.0
    correct = 0
    seen = 0
    for x, y in source.batches(batch_size, shuffle=False):
        probs, _ = forward(model, x, "infer")
        loss, _ = cross_entropy(probs, y)
        loss_sum += loss * len(x)
        correct += int((probs.argmax(axis=1) == y.argmax(axis=1)).sum())
        seen += len(x)
    return loss_sum / seen, correct / seen


def fit(
    model: Model,
    train_set,
    val_set,
    config: TrainConfig,
    out_dir: "str | Path | None" = None,
) -> tuple[Model, History]:
    """Train for ``config.epochs``, validating after each epoch.

    With ``out_dir`` the history (``history.csv`` without wall times,
    ``timing.csv`` with them) and checkpoints (``checkpoints/best.mvck``,
    ``checkpoints/epoch_NNN.mvck``, ``checkpoints/final.mvck``) are written.
    """
    state = config.adam()
    weights = None
    if config.class_weighting:
        weights = inverse_frequency_weights(np.asarray(train_set.labels), model.config.class_count)
    history = History()
    best = -1.0
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        train_loss, train_acc = train_epoch(model, train_set, config, epoch, state, weights)
        seconds = time.perf_counter() - t0
        val_loss, val_acc = evaluate_loss(model, val_set, config.batch_size) if len(val_set) else (0.0, 0.0)
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, seconds))
        log.info(
            "epoch %d: loss %.4f acc %.4f | val loss %.4f acc %.4f | %.1fs",
            epoch, train_loss, train_acc, val_loss, val_acc, seconds,
        )
        if ckpt_dir is not None:
            if val_acc > best:
                best = val_acc
                save_checkpoint(model, ckpt_dir / "best.mvck")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch:03d}.mvck")
            history.write_csv(Path(out_dir) / "history.csv", include_seconds=False)
            history.write_timing(Path(out_dir) / "timing.csv")
    if ckpt_dir is not None:
        save_checkpoint(model, ckpt_dir / "final.mvck")
    return model, history
