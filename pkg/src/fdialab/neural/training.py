"""Locator training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, TrainingError
from ..fdia import Dataset
from .layers import bce_with_logits
from .network import NalModel
from .optim import Adam

INPUT_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TrainReport:
    epochs_run: int
    final_loss: float
    meter_accuracy: float
    row_accuracy: float
    loss_trace: list[float] = field(default_factory=list)


def standardization_from(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-meter mean/std of a training matrix, std floored away from zero."""
    mean = z.mean(axis=0)
    std = np.maximum(z.std(axis=0), INPUT_STD_FLOOR)
    return mean, std


def train(model: NalModel, z: np.ndarray, y: np.ndarray, config: TrainConfig,
          eval_z: np.ndarray | None = None,
          eval_y: np.ndarray | None = None) -> TrainReport:
    """Minimize mean binary cross-entropy over meters and samples.

    Deterministic under the config seed (single-threaded execution assumed).
    Reported accuracies come from the eval split when one is given, otherwise
    from the training data itself.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(z) == 0 or z.shape != y.shape:
        raise ContractError("training data must be non-empty with matching shapes")

    rng = np.random.default_rng(config.seed)
    optimizer = Adam(lr=config.lr, weight_decay=config.weight_decay)
    params = model.parameters()

    model.mode = "train"
    trace: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(z))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(z), config.batch_size):
            batch = order[start:start + config.batch_size]
            logits, ctxs = model.forward_batch(z[batch], train=True)
            loss, dlogits = bce_with_logits(logits, y[batch])
            if not np.isfinite(loss):
                model.mode = "eval"
                raise TrainingError(f"training loss became non-finite ({loss})")
            grads, _ = model.backward_batch(ctxs, dlogits, train=True)
            optimizer.step(params, grads)
            epoch_loss += loss
            n_batches += 1
        trace.append(epoch_loss / n_batches)
    model.mode = "eval"

    if eval_z is None:
        eval_z, eval_y = z, y
    meter_acc, row_acc = evaluate(model, eval_z, eval_y)
    return TrainReport(epochs_run=config.epochs, final_loss=trace[-1] if trace else float("nan"),
                       meter_accuracy=meter_acc, row_accuracy=row_acc, loss_trace=trace)


def train_on_dataset(model: NalModel, dataset: Dataset,
                     config: TrainConfig) -> TrainReport:
    """Train on the dataset's 2:1 train split, report held-out accuracies."""
    train_idx, test_idx = dataset.split_indices()
    eval_z = dataset.z[test_idx] if len(test_idx) else None
    eval_y = dataset.y[test_idx] if len(test_idx) else None
    return train(model, dataset.z[train_idx], dataset.y[train_idx], config,
                 eval_z=eval_z, eval_y=eval_y)


def evaluate(model: NalModel, z: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(meter accuracy, row accuracy): per-label correctness over all
    samples x meters, and the fraction of samples with every label correct."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y)
    predictions = model.predict_labels_batch(z)
    correct = predictions == y
    return float(correct.mean()), float(correct.all(axis=1).mean())


def smoothed_loss_nonincreasing(trace: list[float], window: int = 5) -> bool:
    """Whether the window-averaged training loss never increases; a sanity
    flag for desk-scale runs, not a hard requirement."""
    if len(trace) < 2 * window:
        return True
    smooth = np.convolve(trace, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(smooth) <= 1e-12))
