"""Training objectives with inverse-frequency class balancing.

Intensity training combines a weighted squared error on the regression
head, a cosine alignment term on the intensity profile, and weighted
binary cross entropy on five ordinal threshold logits. Detection uses a
single weighted cross entropy on occurrence logits. Weights come from
training-split label counts only; every count sum is clamped to >= 1 so
an intensity level absent from a fold cannot divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import HeadOutputs, ORD_LEVELS, TASK_DETECTION, TASK_INTENSITY
from .tensor import Tensor, ShapeError, log, maximum, sigmoid, sqrt

N_LEVELS = 6           # intensities 0..5
OCCURRENCE_MIN = 2     # y >= 2 counts as an occurrence
COS_EPS = 1e-8
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class WeightTables:
    """Per-AU balancing weights.

    reg[i, y] weights the squared error of AU i at true intensity y
    (two bins: {0,1} and {2..5}, bin weights summing to 1). ord[i, j, c]
    weights the threshold-j cross entropy when the indicator y >= j+1 is
    c; the 10 entries of each AU sum to 1. det[i, c] weights occurrence
    cross entropy, the two entries summing to 1.
    """

    reg: np.ndarray   # (n, 6)
    ord: np.ndarray   # (n, 5, 2)
    det: np.ndarray   # (n, 2)

    @property
    def n_au(self) -> int:
        return self.reg.shape[0]

    def to_jsonable(self) -> dict:
        return {"reg": self.reg.tolist(), "ord": self.ord.tolist(),
                "det": self.det.tolist()}


def compute_weights(counts: np.ndarray) -> WeightTables:
    """Balancing tables from an (n_au, 6) matrix of training label counts.

    Ratios are scale-free: doubling every count of an AU leaves its
    weights unchanged (as long as no clamp engages).
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] != N_LEVELS:
        raise ShapeError(f"counts must be (n_au, {N_LEVELS}), got {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("negative label counts")
    n = counts.shape[0]

    lo = np.maximum(counts[:, :2].sum(axis=1), 1.0)    # intensities 0..1
    hi = np.maximum(counts[:, 2:].sum(axis=1), 1.0)    # intensities 2..5
    a = 2.0 / lo
    b = 4.0 / hi
    w_lo = a / (a + b)
    reg = np.empty((n, N_LEVELS))
    reg[:, :2] = w_lo[:, None]
    reg[:, 2:] = (1.0 - w_lo)[:, None]

    ordw = np.empty((n, ORD_LEVELS, 2))
    below = np.stack([np.maximum(counts[:, :j].sum(axis=1), 1.0)
                      for j in range(1, ORD_LEVELS + 1)], axis=1)
    above = np.stack([np.maximum(counts[:, j:].sum(axis=1), 1.0)
                      for j in range(1, ORD_LEVELS + 1)], axis=1)
    denom = (1.0 / below + 1.0 / above).sum(axis=1, keepdims=True)
    ordw[:, :, 0] = (1.0 / below) / denom
    ordw[:, :, 1] = (1.0 / above) / denom

    neg = np.maximum(counts[:, :OCCURRENCE_MIN].sum(axis=1), 1.0)
    pos = np.maximum(counts[:, OCCURRENCE_MIN:].sum(axis=1), 1.0)
    d = 1.0 / neg + 1.0 / pos
    det = np.stack([(1.0 / neg) / d, (1.0 / pos) / d], axis=1)

    return WeightTables(reg=reg, ord=ordw, det=det)


def count_intensities(labels: np.ndarray, n_au: int) -> np.ndarray:
    """(frames, n_au) integer labels -> (n_au, 6) occurrence counts."""
    labels = _check_labels(labels, n_au)
    counts = np.zeros((n_au, N_LEVELS), dtype=np.int64)
    for j in range(N_LEVELS):
        counts[:, j] = (labels == j).sum(axis=0)
    return counts


def _check_labels(y, n_au: int | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"labels must be (batch, n_au), got {arr.shape}")
    if n_au is not None and arr.shape[1] != n_au:
        raise ShapeError(f"expected {n_au} AUs, got {arr.shape[1]}")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.allclose(arr, rounded):
            raise ValueError("intensity labels must be integers")
        arr = rounded.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > 5):
        raise ValueError("intensity labels must lie in 0..5")
    return arr.astype(np.int64)


def _as_batch(t: Tensor, n_au: int) -> Tensor:
    if t.data.ndim == 1:
        t = t.reshape((1, t.shape[0]))
    if t.shape[-1] != n_au and t.shape[1] != n_au:
        raise ShapeError(f"prediction has {t.shape} for {n_au} AUs")
    return t


def loss_reg_mse(y, reg: Tensor, weights: WeightTables) -> Tensor:
    """Batch mean of sum_i w[i, y_i] (y_i - reg_i)^2."""
    yl = _check_labels(y, weights.n_au)
    reg = _as_batch(reg, weights.n_au)
    if reg.shape[0] != yl.shape[0]:
        raise ShapeError("batch size mismatch between labels and predictions")
    w = weights.reg[np.arange(weights.n_au), yl]           # (B, n)
    err = Tensor(yl.astype(np.float64)) - reg
    return (err.square() * Tensor(w)).sum() / float(yl.shape[0])


def loss_reg_cos(y, reg: Tensor) -> Tensor:
    """Batch mean of 1 - cos(y, reg); a frame with all-zero labels adds 0."""
    yl = _check_labels(y)
    reg = _as_batch(reg, yl.shape[1])
    if reg.shape[0] != yl.shape[0]:
        raise ShapeError("batch size mismatch between labels and predictions")
    yf = yl.astype(np.float64)
    y_norm = np.sqrt((yf * yf).sum(axis=1))                # (B,)
    active = (y_norm > 0).astype(np.float64)
    dot = (reg * Tensor(yf)).sum(axis=1)                   # (B,)
    # clamp before sqrt: an exactly-zero prediction row must not produce
    # an infinite sqrt gradient; for ordinary rows this is a no-op
    pred_norm = sqrt(maximum(reg.square().sum(axis=1), 1e-16))
    cos = dot / (pred_norm * Tensor(y_norm) + COS_EPS)
    per_row = (Tensor(active) - cos * Tensor(active))
    return per_row.sum() / float(yl.shape[0])


def loss_class(y, ord_logits: Tensor, weights: WeightTables) -> Tensor:
    """Weighted binary CE over the five ordinal thresholds, batch mean."""
    yl = _check_labels(y, weights.n_au)
    if ord_logits.data.ndim == 2:
        ord_logits = ord_logits.reshape((1,) + ord_logits.shape)
    if ord_logits.shape != (yl.shape[0], weights.n_au, ORD_LEVELS):
        raise ShapeError(f"ord_logits {ord_logits.shape} does not match "
                         f"({yl.shape[0]}, {weights.n_au}, {ORD_LEVELS})")
    thresholds = np.arange(1, ORD_LEVELS + 1)
    chi = (yl[:, :, None] >= thresholds[None, None, :]).astype(np.int64)
    w = weights.ord[np.arange(weights.n_au)[:, None],
                    np.arange(ORD_LEVELS)[None, :], chi]   # (B, n, 5)
    ce = _bce(chi.astype(np.float64), sigmoid(ord_logits))
    return (ce * Tensor(w)).sum() / float(yl.shape[0])


def loss_auie(y, head: HeadOutputs, weights: WeightTables) -> Tensor:
    """Intensity objective: MSE + cosine + ordinal CE, unit coefficients."""
    if head.reg is None or head.ord_logits is None:
        raise ValueError("intensity loss needs reg and ord_logits outputs")
    return (loss_reg_mse(y, head.reg, weights)
            + loss_reg_cos(y, head.reg)
            + loss_class(y, head.ord_logits, weights))


def loss_aud(y, det_logits: Tensor, weights: WeightTables) -> Tensor:
    """Weighted occurrence CE; y >= 2 is an occurrence."""
    yl = _check_labels(y, weights.n_au)
    det_logits = _as_batch(det_logits, weights.n_au)
    if det_logits.shape[0] != yl.shape[0]:
        raise ShapeError("batch size mismatch between labels and predictions")
    chi = (yl >= OCCURRENCE_MIN).astype(np.int64)
    w = weights.det[np.arange(weights.n_au), chi]          # (B, n)
    ce = _bce(chi.astype(np.float64), sigmoid(det_logits))
    return (ce * Tensor(w)).sum() / float(yl.shape[0])


def batch_loss(task: str, y, head: HeadOutputs, weights: WeightTables) -> Tensor:
    yl = np.asarray(y)
    if yl.size == 0:
        raise ValueError("empty batch")
    if task == TASK_INTENSITY:
        return loss_auie(y, head, weights)
    if task == TASK_DETECTION:
        if head.det_logits is None:
            raise ValueError("detection loss needs det_logits")
        return loss_aud(y, head.det_logits, weights)
    raise ValueError(f"unknown task {task!r}")


def _bce(chi: np.ndarray, p: Tensor) -> Tensor:
    """-chi.log(p) - (1-chi).log(1-p), each log argument clamped >= 1e-12."""
    log_p = log(maximum(p, PROB_CLAMP))
    log_q = log(maximum(1.0 - p, PROB_CLAMP))
    return -(Tensor(chi) * log_p) - (Tensor(1.0 - chi) * log_q)
