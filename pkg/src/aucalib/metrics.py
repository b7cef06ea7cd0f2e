"""Agreement and detection metrics over per-frame predictions.

Intensity quality is scored with ICC(3,1) (two-way mixed, consistency,
single rater) between the human labels and the model, pooled two ways:
across participants (one ICC over everything) and within (per-participant
ICCs averaged). The distinction is the point of calibration: a model
with a per-identity offset keeps its within score but loses across.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import TASK_DETECTION, TASK_INTENSITY
from .losses import OCCURRENCE_MIN

DEGENERATE_EPS = 1e-12

INTENSITY_METRICS = ("icc_across", "icc_within", "mae")
DETECTION_METRICS = ("f1", "accuracy", "precision", "recall")


@dataclass
class PredictionSet:
    """Frame-major predictions: one row per (participant, frame)."""

    task: str
    au_names: tuple[str, ...]
    participants: np.ndarray   # (N,) str
    frames: np.ndarray         # (N,) int
    labels: np.ndarray         # (N, n_au) int intensities 0..5
    preds: np.ndarray          # (N, n_au) float

    def __post_init__(self):
        self.participants = np.asarray(self.participants, dtype=object)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.labels = np.asarray(self.labels)
        self.preds = np.asarray(self.preds, dtype=np.float64)
        n = len(self.participants)
        if not (len(self.frames) == self.labels.shape[0] == self.preds.shape[0] == n):
            raise ValueError("row count mismatch")
        if self.labels.shape != self.preds.shape or self.labels.shape[1] != len(self.au_names):
            raise ValueError("label/prediction layout mismatch")
        if n and (self.labels.min() < 0 or self.labels.max() > 5):
            raise ValueError("labels must lie in 0..5")
        keys = list(zip(self.participants.tolist(), self.frames.tolist()))
        if len(set(keys)) != n:
            raise ValueError("duplicate (participant, frame) rows")

    @property
    def n_rows(self) -> int:
        return len(self.participants)

    def participant_ids(self) -> list[str]:
        return sorted(set(self.participants.tolist()))

    def for_participant(self, pid: str) -> "PredictionSet":
        mask = self.participants == pid
        return PredictionSet(self.task, self.au_names, self.participants[mask],
                             self.frames[mask], self.labels[mask], self.preds[mask])

    @classmethod
    def concatenate(cls, sets: Sequence["PredictionSet"]) -> "PredictionSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        first = sets[0]
        for s in sets[1:]:
            if s.task != first.task or s.au_names != first.au_names:
                raise ValueError("prediction sets disagree on task or AU list")
        return cls(first.task, first.au_names,
                   np.concatenate([s.participants for s in sets]),
                   np.concatenate([s.frames for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   np.concatenate([s.preds for s in sets]))


def icc31(labels: np.ndarray, preds: np.ndarray) -> float:
    """ICC(3,1) between two raters over n targets.

    Degenerate data (no between-target variance at all) scores 0 so
    averages over participants stay defined.
    """
    x = np.stack([np.asarray(labels, dtype=np.float64),
                  np.asarray(preds, dtype=np.float64)], axis=1)  # (n, 2)
    n, k = x.shape
    if n < 2:
        raise ValueError("ICC needs at least 2 paired observations")
    m_t = x.mean(axis=1)
    m_r = x.mean(axis=0)
    m = x.mean()
    bms = k * np.sum((m_t - m) ** 2) / (n - 1)
    resid = x - m_t[:, None] - m_r[None, :] + m
    ems = np.sum(resid ** 2) / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if abs(denom) < DEGENERATE_EPS:
        return 0.0
    return float((bms - ems) / denom)


def icc_across(pset: PredictionSet, au: int) -> float:
    """One ICC over every frame of every participant pooled together."""
    if pset.n_rows == 0:
        raise ValueError("empty prediction set")
    return icc31(pset.labels[:, au], pset.preds[:, au])


def icc_within(pset: PredictionSet, au: int) -> float:
    """Mean of per-participant ICCs; participants need >= 2 frames."""
    values = []
    for pid in pset.participant_ids():
        mask = pset.participants == pid
        if mask.sum() < 2:
            continue
        values.append(icc31(pset.labels[mask, au], pset.preds[mask, au]))
    if not values:
        raise ValueError("no participant with >= 2 frames")
    return float(np.mean(values))


def mae(pset: PredictionSet, au: int) -> float:
    if pset.n_rows == 0:
        raise ValueError("empty prediction set")
    return float(np.mean(np.abs(pset.labels[:, au] - pset.preds[:, au])))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def f1(self) -> float:
        p, r = self.precision(), self.recall()
        return 2.0 * p * r / (p + r) if p + r else 0.0


def confusion(truth: np.ndarray, decided: np.ndarray) -> Confusion:
    truth = np.asarray(truth, dtype=bool)
    decided = np.asarray(decided, dtype=bool)
    if truth.shape != decided.shape:
        raise ValueError("truth/decision shape mismatch")
    return Confusion(tp=int(np.sum(truth & decided)),
                     fp=int(np.sum(~truth & decided)),
                     fn=int(np.sum(truth & ~decided)),
                     tn=int(np.sum(~truth & ~decided)))


def occurrence_truth(labels: np.ndarray) -> np.ndarray:
    """Intensities -> occurrence booleans (level >= 2 counts)."""
    return np.asarray(labels) >= OCCURRENCE_MIN


def detection_metrics(pset: PredictionSet, au: int,
                      decide: Callable[[np.ndarray], np.ndarray]) -> dict[str, float]:
    """F1/accuracy/precision/recall for one AU under a decision rule."""
    if pset.n_rows == 0:
        raise ValueError("empty prediction set")
    c = confusion(occurrence_truth(pset.labels[:, au]), decide(pset.preds[:, au]))
    return {"f1": c.f1(), "accuracy": c.accuracy(),
            "precision": c.precision(), "recall": c.recall()}


@dataclass
class MetricReport:
    """Scores per AU plus their mean, with per-fold breakdowns retained."""

    task: str
    au_names: tuple[str, ...]
    pooling: str
    per_au: dict[str, list[float]] = field(default_factory=dict)
    average: dict[str, float] = field(default_factory=dict)
    per_fold: list[dict] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {"task": self.task, "au_names": list(self.au_names),
                "pooling": self.pooling, "per_au": self.per_au,
                "average": self.average, "per_fold": self.per_fold}


def _score_set(pset: PredictionSet,
               decide: Callable[[np.ndarray], np.ndarray] | None) -> tuple[dict, dict]:
    n_au = len(pset.au_names)
    per_au: dict[str, list[float]] = {}
    if pset.task == TASK_INTENSITY:
        per_au["icc_across"] = [icc_across(pset, a) for a in range(n_au)]
        per_au["icc_within"] = [icc_within(pset, a) for a in range(n_au)]
        per_au["mae"] = [mae(pset, a) for a in range(n_au)]
    elif pset.task == TASK_DETECTION:
        if decide is None:
            raise ValueError("detection report needs a decision rule")
        rows = [detection_metrics(pset, a, decide) for a in range(n_au)]
        for name in DETECTION_METRICS:
            per_au[name] = [r[name] for r in rows]
    else:
        raise ValueError(f"unknown task {pset.task!r}")
    average = {name: float(np.mean(vals)) for name, vals in per_au.items()}
    return per_au, average


def build_report(folds: Sequence[PredictionSet],
                 decide: Callable[[np.ndarray], np.ndarray] | None = None) -> MetricReport:
    """Concatenate disjoint-participant folds and score once per AU.

    Per-fold scores ride along so the averaging convention can be
    audited against the pooled one.
    """
    if not folds:
        raise ValueError("no folds")
    seen: set[str] = set()
    for i, f in enumerate(folds):
        pids = set(f.participant_ids())
        overlap = seen & pids
        if overlap:
            raise ValueError(f"participants {sorted(overlap)} appear in multiple folds")
        seen |= pids
    pooled = PredictionSet.concatenate(folds)
    per_au, average = _score_set(pooled, decide)
    report = MetricReport(task=pooled.task, au_names=pooled.au_names,
                          pooling="concatenated", per_au=per_au, average=average)
    for i, f in enumerate(folds):
        fold_per_au, fold_avg = _score_set(f, decide)
        report.per_fold.append({
            "fold": i,
            "participants": f.participant_ids(),
            "n_frames": int(f.n_rows),
            "per_au": fold_per_au,
            "average": fold_avg,
        })
    return report
