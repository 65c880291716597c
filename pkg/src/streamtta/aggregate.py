"""Fusing the K branch predictions into one output.

Classification: each branch's logits are sharpened by a temperature below
one, pushed through softmax, and convex-combined with the reliability
weights; the argmax wins (ties to the lowest class index). Regression:
the mean of the top-ranked half of branch predictions, by reliability score
(score ties to the lowest branch index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalError
from .rank import check_weights
from .util import stable_softmax


@dataclass
class PredictionSet:
    """Per-branch predictions plus their fusion parameters."""

    weights: np.ndarray
    tau: float = 0.5
    logits: np.ndarray | None = None    # (K, C) for classification
    scalars: np.ndarray | None = None   # (K,) for regression

    def __post_init__(self):
        self.weights = check_weights(self.weights)
        if not (self.tau > 0):
            raise ContractError("temperature must be positive")
        if (self.logits is None) == (self.scalars is None):
            raise ContractError("provide exactly one of logits or scalars")
        k = self.weights.size
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64)
            if self.logits.ndim != 2 or self.logits.shape[0] != k:
                raise ContractError(f"logits must be (K={k}, C), got {self.logits.shape}")
            if not np.all(np.isfinite(self.logits)):
                raise NumericalError("logits contain non-finite values")
        if self.scalars is not None:
            self.scalars = np.asarray(self.scalars, dtype=np.float64)
            if self.scalars.shape != (k,):
                raise ContractError(f"scalars must be (K={k},), got {self.scalars.shape}")
            if not np.all(np.isfinite(self.scalars)):
                raise NumericalError("predictions contain non-finite values")


def classify(ps: PredictionSet) -> tuple[int, np.ndarray]:
    """Temperature-sharpened weighted vote; returns (class index, fused probabilities)."""
    if ps.logits is None:
        raise ContractError("classify needs logits")
    if ps.logits.shape[1] < 2:
        raise ContractError("classification needs at least two classes")
    probs = stable_softmax(ps.logits / ps.tau, axis=1)
    fused = ps.weights @ probs
    fused = fused / fused.sum()
    return int(np.argmax(fused)), fused


def regress(ps: PredictionSet, scores: np.ndarray) -> float:
    """Mean of the ceil(K/2) branch predictions with the highest reliability scores."""
    if ps.scalars is None:
        raise ContractError("regress needs scalar predictions")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != ps.scalars.shape:
        raise ContractError(f"scores shape {scores.shape} != predictions {ps.scalars.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericalError("reliability scores contain non-finite values")
    k = ps.scalars.size
    top = math.ceil(k / 2)
    order = np.argsort(-scores, kind="stable")  # stable: ties keep branch order
    return float(ps.scalars[order[:top]].mean())
