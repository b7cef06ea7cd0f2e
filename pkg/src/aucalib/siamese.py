"""Siamese calibration forward pass and the three prediction modes.

A calibrated prediction runs the reference and target frames through the
same weights, subtracts their features at a chosen merge point, and
feeds the difference through the remaining layers. Identity-specific
appearance that is constant across a participant's frames cancels in
the subtraction; the expression signal does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone as B
from .tensor import Tensor, ShapeError, no_grad, sigmoid


@dataclass(frozen=True)
class MergePoint:
    """Where the two branches join: 'stage' k (diff on the features
    entering stage k), 'fc' (diff on pooled features entering the head),
    or 'output' (diff on raw head outputs)."""

    kind: str
    stage: int = 0

    def __post_init__(self):
        if self.kind not in ("stage", "fc", "output"):
            raise ValueError(f"unknown merge kind {self.kind!r}")
        if self.kind == "stage" and self.stage < 1:
            raise ValueError("stage merges are numbered from 1")

    @classmethod
    def parse(cls, text: str) -> "MergePoint":
        t = text.strip().lower()
        if t in ("fc", "output"):
            return cls(t)
        if t.startswith("stage"):
            return cls("stage", int(t[5:]))
        raise ValueError(f"cannot parse merge point {text!r}")

    def label(self) -> str:
        return f"stage{self.stage}" if self.kind == "stage" else self.kind


NCG = "ncg"
OFC_BS = "ofc_bs"
OFC_CSN = "ofc_csn"


@dataclass(frozen=True)
class PredictionMode:
    kind: str
    merge: MergePoint | None = None

    def __post_init__(self):
        if self.kind not in (NCG, OFC_BS, OFC_CSN):
            raise ValueError(f"unknown prediction mode {self.kind!r}")
        if self.kind == OFC_CSN and self.merge is None:
            raise ValueError("ofc_csn needs a merge point")

    @classmethod
    def parse(cls, text: str) -> "PredictionMode":
        t = text.strip().lower()
        if t in (NCG, OFC_BS):
            return cls(t)
        if t.startswith(OFC_CSN):
            rest = t[len(OFC_CSN):].strip(":/")
            if not rest:
                raise ValueError("ofc_csn needs a merge point, e.g. ofc_csn:stage4")
            return cls(OFC_CSN, MergePoint.parse(rest))
        raise ValueError(f"cannot parse prediction mode {text!r}")

    def label(self) -> str:
        if self.kind == OFC_CSN:
            return f"{OFC_CSN}:{self.merge.label()}"
        return self.kind

    @property
    def needs_reference(self) -> bool:
        return self.kind in (OFC_BS, OFC_CSN)


def forward_csn(store: B.ParamStore, spec: B.BackboneSpec, target: Tensor,
                reference: Tensor, merge: MergePoint,
                fc_after_hidden: bool = False) -> B.HeadOutputs:
    """Shared-weight two-branch forward with a feature difference.

    Differentiable end to end; gradients of shared weights accumulate
    contributions from both branches. fc_after_hidden moves the FC merge
    to the hidden activations instead of the pooled features.
    """
    if target.shape != reference.shape:
        raise ShapeError(f"branch shapes differ: {target.shape} vs {reference.shape}")
    if merge.kind == "stage":
        k = merge.stage
        if k > spec.n_stages:
            raise ValueError(f"merge stage {k} beyond {spec.n_stages} stages")
        # features entering stage k = output of stages < k
        phi_t = B.forward_stages(store, spec, target, 0, k - 1)
        phi_r = B.forward_stages(store, spec, reference, 0, k - 1)
        merged = phi_t - phi_r
        feats = B.forward_stages(store, spec, merged, k - 1, spec.n_stages)
        return B.forward_head(store, spec, feats)
    if merge.kind == "fc":
        pt = B.pooled_features(store, spec, B.forward_stages(store, spec, target))
        pr = B.pooled_features(store, spec, B.forward_stages(store, spec, reference))
        if fc_after_hidden:
            ht = B.hidden_features(store, spec, pt)
            hr = B.hidden_features(store, spec, pr)
            return B.head_from_pooled(store, spec, ht - hr, skip_hidden=True)
        return B.head_from_pooled(store, spec, pt - pr)
    # output merge: difference of reg values and of raw logits; consumers
    # apply sigmoid afterwards (probability differences would leave (0,1))
    out_t = B.forward(store, spec, target)
    out_r = B.forward(store, spec, reference)
    return out_t - out_r


def predict(store: B.ParamStore, spec: B.BackboneSpec, mode: PredictionMode,
            frames: Tensor, reference: Tensor | None = None,
            fc_after_hidden: bool = False, clamp: bool = False) -> np.ndarray:
    """Per-frame AU estimates (intensity) or occurrence scores (detection).

    Intensity estimates come from the regression head; the optional
    clamp squeezes them into [0, 5] and defaults off. Detection scores
    are sigmoid probabilities for ncg/ofc_csn and probability differences
    in (-1, 1) for ofc_bs.
    """
    if mode.needs_reference and reference is None:
        raise ValueError(f"{mode.label()} requires a reference frame")
    with no_grad():
        if mode.kind == NCG:
            out = B.forward(store, spec, frames)
        elif mode.kind == OFC_BS:
            ref_b = _match_batch(reference, frames.shape[0])
            out = B.forward(store, spec, frames) - B.forward(store, spec, ref_b)
        else:
            ref_b = _match_batch(reference, frames.shape[0])
            out = forward_csn(store, spec, frames, ref_b, mode.merge,
                              fc_after_hidden=fc_after_hidden)
        if spec.task == B.TASK_DETECTION:
            if mode.kind == OFC_BS:
                # difference of probabilities, not probability of difference
                t = sigmoid(B.forward(store, spec, frames).det_logits).data
                r = sigmoid(B.forward(store, spec, ref_b).det_logits).data
                scores = t - r
            else:
                scores = sigmoid(out.det_logits).data
            return scores
        est = out.reg.data.copy()
        if clamp:
            est = np.clip(est, 0.0, 5.0)
        return est


def detection_decisions(scores: np.ndarray, mode: PredictionMode,
                        delta: float = 0.0) -> np.ndarray:
    """Binarize detection scores.

    ncg/ofc_csn threshold probabilities at 0.5; ofc_bs fires when the
    probability difference exceeds delta (default 0, so any small
    positive drift counts as an occurrence).
    """
    if mode.kind == OFC_BS:
        return scores > delta
    return scores >= 0.5


def _match_batch(reference: Tensor, batch: int) -> Tensor:
    """Tile a single reference frame across the batch if needed."""
    if reference.shape[0] == batch:
        return reference
    if reference.shape[0] == 1:
        return Tensor(np.repeat(reference.data, batch, axis=0))
    raise ShapeError(f"reference batch {reference.shape[0]} incompatible with {batch}")
