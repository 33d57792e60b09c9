"""Desk-scale supervised training loop.

Deliberately small: AdamW, linear warmup + cosine decay, cross-entropy with
optional label smoothing, full-dataset accuracy probes at a fixed cadence.
Everything downstream of the seed is deterministic, so identical configs
reproduce identical ``history.csv`` files byte for byte.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from . import tensor as T
from .data import SyntheticShapes
from .errors import ConfigError, ShapeMismatchError, TrainingDiverged
from .optim import AdamState, adamw_step, lr_at
from .tensor import GradTape, Tensor


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    base_lr: Optional[float] = None  # None: 5e-3 * batch_size / 256
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    schedule: str = "cosine"
    seed: int = 0
    label_smoothing: float = 0.0
    dtype: str = "float32"
    eval_every_epochs: int = 5
    stop_at_acc: Optional[float] = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.base_lr is not None and self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")

    @property
    def resolved_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 5e-3 * self.batch_size / 256.0

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy over the leading axes; classes on the last axis.

    With smoothing ``e`` the target puts ``1 - e + e/C`` on the true class
    and ``e/C`` elsewhere. Returns a scalar tensor wired into the tape.
    """
    labels = np.asarray(labels)
    z = logits.data
    c = z.shape[-1]
    if labels.shape != z.shape[:-1]:
        raise ShapeMismatchError(f"labels {labels.shape} do not match logits {z.shape}")
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    target = np.full_like(z, smoothing / c)
    np.put_along_axis(
        target, labels[..., None], 1.0 - smoothing + smoothing / c, axis=-1
    )
    losses = -(target * logp).sum(axis=-1)
    count = max(1, losses.size)
    loss_value = np.asarray(losses.mean(), dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        T.accumulate_grad(logits, (p - target) * (g / count))

    return T.make_op(loss_value, (logits,), backward, "cross_entropy")


def evaluate(
    weights: dict[str, Tensor],
    cfg: M.ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 64,
) -> tuple[float, int, int]:
    """Top-1 accuracy over a fixed array of images. No tape, no shuffling."""
    correct = 0
    total = len(labels)
    for start in range(0, total, batch_size):
        chunk = images[start : start + batch_size]
        logits = M.model_forward(Tensor(chunk), weights, cfg)
        pred = np.argmax(logits.data, axis=-1)
        correct += int((pred == labels[start : start + batch_size]).sum())
    return (correct / total if total else 0.0), correct, total


@dataclass
class TrainResult:
    history: list[dict]
    final_train_acc: float
    steps_run: int
    reached_target_at: Optional[int]
    wall_time: float
    weights: dict[str, Tensor]
    checkpoint_dir: Optional[Path] = None
    history_path: Optional[Path] = None

    def history_column(self, key: str) -> list:
        return [row[key] for row in self.history]


HISTORY_COLUMNS = ("step", "epoch", "lr", "train_loss", "train_acc")


def write_history_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([
                row["step"], row["epoch"], repr(row["lr"]),
                repr(row["train_loss"]), repr(row["train_acc"]),
            ])


def train(
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    dataset: SyntheticShapes,
    out_dir: str | Path | None = None,
    weights: dict[str, Tensor] | None = None,
) -> TrainResult:
    """Run the loop; returns history plus the trained weights.

    A non-finite loss aborts with :class:`TrainingDiverged` carrying the
    step index. When ``stop_at_acc`` is set, a full-trainset probe runs
    every ``eval_every_epochs`` epochs and training stops once reached.
    """
    dtype = train_cfg.np_dtype
    rng = np.random.default_rng(train_cfg.seed)
    if weights is None:
        weights = M.init_weights(model_cfg, rng, dtype=dtype)
    images = dataset.images.astype(dtype, copy=False)
    labels = dataset.labels
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / train_cfg.batch_size))
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch
    base_lr = train_cfg.resolved_lr
    no_decay = frozenset(M.no_decay_names(weights))
    state = AdamState()
    order_rng = np.random.default_rng((train_cfg.seed, 1))

    history: list[dict] = []
    reached: Optional[int] = None
    order = np.empty(0, dtype=np.int64)
    t0 = time.perf_counter()
    step = 0
    while step < train_cfg.steps:
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        if pos == 0:
            order = order_rng.permutation(n)
        batch_idx = order[pos * train_cfg.batch_size : (pos + 1) * train_cfg.batch_size]
        xb = Tensor(images[batch_idx])
        yb = labels[batch_idx]

        with GradTape() as tape:
            logits = M.model_forward(xb, weights, model_cfg)
            loss = cross_entropy(logits, yb, train_cfg.label_smoothing)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(step)
        tape.backward(loss)

        lr = lr_at(step, base_lr, train_cfg.steps, warmup_steps)
        grads = {k: w.grad for k, w in weights.items() if w.grad is not None}
        adamw_step(
            weights, grads, state, lr,
            weight_decay=train_cfg.weight_decay, no_decay=no_decay,
        )
        for w in weights.values():
            w.grad = None

        batch_acc = float((np.argmax(logits.data, axis=-1) == yb).mean())
        history.append({
            "step": step, "epoch": epoch, "lr": lr,
            "train_loss": float(loss.data), "train_acc": batch_acc,
        })
        step += 1

        end_of_epoch = step % steps_per_epoch == 0
        if train_cfg.stop_at_acc is not None and end_of_epoch and (
            (epoch + 1) % train_cfg.eval_every_epochs == 0
        ):
            acc, _, _ = evaluate(weights, model_cfg, images, labels)
            if reached is None and acc >= train_cfg.stop_at_acc:
                reached = step
                break

    final_acc, _, _ = evaluate(weights, model_cfg, images, labels)
    if reached is None and train_cfg.stop_at_acc is not None:
        if final_acc >= train_cfg.stop_at_acc:
            reached = step
    wall = time.perf_counter() - t0

    result = TrainResult(
        history=history, final_train_acc=final_acc, steps_run=step,
        reached_target_at=reached, wall_time=wall, weights=weights,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.history_path = out / "history.csv"
        write_history_csv(result.history_path, history)
        result.checkpoint_dir = M.save_checkpoint(out / "checkpoint", model_cfg, weights)
    return result
