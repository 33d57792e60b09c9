"""Representation analysis: linear CKA, feature-evolution scores, ablations.

The evolution score of block k is ``CKA(f_k, f_out) / CKA(f_in, f_out)``
where ``f_in`` are the token features entering the first block, ``f_k`` the
features leaving block k and ``f_out`` those leaving the last block. Each
example contributes one row: its token features concatenated (class token
included).
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from .data import SyntheticShapes, generate_shapes
from .errors import ConfigError
from .tensor import Tensor
from .training import TrainConfig, train


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Rows are examples, columns features. Computed in the cross-covariance
    form ``|Yc'Xc|_F^2 / (|Xc'Xc|_F |Yc'Yc|_F)``; returns 0 when either
    norm underflows (constant features).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigError(f"CKA expects [N,p] and [N,q] with equal N, "
                          f"got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ConfigError("CKA needs at least 2 examples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    denom = nx * ny
    if denom <= 0.0 or not np.isfinite(denom):
        return 0.0
    return float(cross / denom)


@dataclass
class EvolutionReport:
    scores: list[float]          # F_k per block, averaged over runs
    cka_in_out: float            # averaged CKA(f_in, f_out)
    batch_size: int
    runs: int
    includes_class_token: bool = True


def _flatten_tokens(block_features: np.ndarray) -> np.ndarray:
    """[B, dim, N] -> [B, dim*N]: one concatenated feature row per example."""
    b = block_features.shape[0]
    return block_features.reshape(b, -1)


def feature_evolution(
    cfg: M.ModelConfig,
    weights: dict[str, Tensor],
    images: np.ndarray,
    batch_size: int = 32,
    runs: int = 10,
    seed: int = 0,
) -> EvolutionReport:
    """Per-block evolution scores averaged over randomly sampled batches."""
    if len(images) < 2:
        raise ConfigError("feature evolution needs at least 2 images")
    rng = np.random.default_rng(seed)
    per_run = np.zeros((runs, cfg.depth), dtype=np.float64)
    in_out = np.zeros(runs, dtype=np.float64)
    for run in range(runs):
        take = min(batch_size, len(images))
        idx = rng.choice(len(images), size=take, replace=False)
        batch = Tensor(np.ascontiguousarray(images[idx]))
        res = M.forward(batch, weights, cfg, capture_features=True)
        f_in = _flatten_tokens(res.tokens_in)
        f_out = _flatten_tokens(res.block_outputs[-1])
        base = linear_cka(f_in, f_out)
        in_out[run] = base
        for k, feats in enumerate(res.block_outputs):
            score = linear_cka(_flatten_tokens(feats), f_out)
            per_run[run, k] = score / base if base > 0 else 0.0
    return EvolutionReport(
        scores=per_run.mean(axis=0).tolist(),
        cka_in_out=float(in_out.mean()),
        batch_size=batch_size,
        runs=runs,
    )


def write_evolution_csv(path: str | Path, report: EvolutionReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "score"])
        for k, score in enumerate(report.scores):
            writer.writerow([k + 1, repr(score)])


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_AXES = (
    "expansion_ratio", "kernel_size", "conv_mode", "reduction", "share_next", "heads",
)


def _apply_axis(cfg: M.ModelConfig, axis: str, value) -> M.ModelConfig:
    rc = cfg.refiner
    if axis == "expansion_ratio":
        rc = replace(rc, r=int(value))
    elif axis == "kernel_size":
        rc = replace(rc, k=int(value))
    elif axis == "conv_mode":
        if value not in ("direct", "spatial", "rowcol"):
            raise ConfigError(f"invalid conv_mode value {value!r}")
        rc = replace(rc, conv_mode=str(value))
    elif axis == "reduction":
        rc = replace(rc, use_reduction=bool(int(value)))
    elif axis == "share_next":
        rc = replace(rc, share_next=int(value))
    elif axis == "heads":
        heads = int(value)
        if cfg.dim % heads != 0:
            raise ConfigError(f"heads={heads} does not divide dim={cfg.dim}")
        rc = replace(rc, heads=heads)
        return replace(cfg, heads=heads, refiner=rc)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")
    return replace(cfg, refiner=rc)


def worker_cap() -> int:
    """Worker-count ceiling from the REFINER_THREADS environment variable."""
    raw = os.environ.get("REFINER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def ablation_grid(
    axis: str,
    values: Sequence,
    base_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    dataset: SyntheticShapes | None = None,
    target_acc: float = 0.99,
) -> list[dict]:
    """Train one model per axis value; returns one ordered row per value.

    Rows carry the value, the exact parameter count, the final train
    accuracy and the step at which the accuracy target was first observed
    (-1 if never). Cell seeds derive from the shared seed, so the grid is
    reproducible; cells may run on up to ``REFINER_THREADS`` workers.
    """
    if dataset is None:
        dataset = generate_shapes(
            num_classes=base_cfg.num_classes, size=base_cfg.img_size,
            seed=train_cfg.seed,
        )

    def cell(value) -> dict:
        cfg = _apply_axis(base_cfg, axis, value)
        cell_cfg = replace(train_cfg, stop_at_acc=target_acc)
        result = train(cfg, cell_cfg, dataset)
        return {
            "value": value,
            "params": M.count_params(cfg),
            "final_acc": result.final_train_acc,
            "steps_to_target": result.reached_target_at
            if result.reached_target_at is not None else -1,
        }

    workers = min(worker_cap(), max(1, len(values)))
    if workers == 1:
        return [cell(v) for v in values]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(cell, values))


def write_ablation_csv(path: str | Path, axis: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "params", "final_acc", "steps_to_target"])
        for row in rows:
            writer.writerow([
                row["value"], row["params"], repr(row["final_acc"]),
                row["steps_to_target"],
            ])
