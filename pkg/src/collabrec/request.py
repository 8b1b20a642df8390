"""Slate-refresh request policy: inconsistency score, threshold, decision.

The inconsistency score is the mean absolute positional displacement
between the cloud's initial ranking and the device rerank of the same
item set. A threshold calibrated from a pool of training-period scores
turns a communication budget (fraction of users allowed to refresh) into
a request rule ``c >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CollabrecError

__all__ = [
    "InconsistencyScore",
    "RequestPolicy",
    "NotAPermutationError",
    "CalibrationError",
    "inconsistency",
    "calibrate_threshold",
    "decide",
]


class NotAPermutationError(CollabrecError):
    pass


class CalibrationError(CollabrecError):
    pass


@dataclass(frozen=True)
class InconsistencyScore:
    """Mean absolute positional displacement over n shared items."""

    c: float
    n: int


@dataclass(frozen=True)
class RequestPolicy:
    """Either threshold-on-inconsistency or budget-probability-random.

    ``threshold`` may be None until calibrated (inconsistency kind);
    ``budget`` is the target request fraction for both kinds.
    """

    kind: str = "inconsistency"
    budget: float = 0.1
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ("inconsistency", "random"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0.0 <= self.budget <= 1.0:
            raise ValueError("budget must be in [0, 1]")

    def with_threshold(self, threshold: float) -> "RequestPolicy":
        return RequestPolicy(kind=self.kind, budget=self.budget, threshold=threshold)


def inconsistency(init_order, rerank_order) -> InconsistencyScore:
    """c = mean over items of |position in init - position in rerank|.

    Both arguments must order the same item set (0-based positions).
    """
    init_order = list(init_order)
    rerank_order = list(rerank_order)
    n = len(init_order)
    if n < 1:
        raise NotAPermutationError("rankings must be non-empty")
    pos_init = {item: i for i, item in enumerate(init_order)}
    pos_rerank = {item: i for i, item in enumerate(rerank_order)}
    if len(pos_init) != n or len(pos_rerank) != len(rerank_order) or pos_init.keys() != pos_rerank.keys():
        raise NotAPermutationError("rankings are not permutations of the same item set")
    c = sum(abs(pos_init[q] - pos_rerank[q]) for q in pos_init) / n
    return InconsistencyScore(c=float(c), n=n)


def calibrate_threshold(calibration_scores, budget: float) -> float:
    """Order-statistic threshold so ~``budget`` of scores fire ``c >= t``.

    With k = floor(budget * N), the threshold is the (N-k)-th smallest
    score; budget 0 yields +inf (never request), budget 1 yields the
    minimum score (always request).
    """
    scores = sorted(float(c) for c in calibration_scores)
    if not scores:
        raise CalibrationError("empty calibration score set")
    if not 0.0 <= budget <= 1.0:
        raise ValueError("budget must be in [0, 1]")
    n = len(scores)
    k = math.floor(budget * n)
    if k == 0:
        return math.inf
    if k >= n:
        return scores[0]
    return scores[n - k]


def decide(policy: RequestPolicy, score: InconsistencyScore,
           rng: np.random.Generator | None = None) -> bool:
    """Whether to spend a request refreshing this user's slate."""
    if policy.kind == "inconsistency":
        if policy.threshold is None:
            raise CalibrationError("inconsistency policy has no calibrated threshold")
        return score.c >= policy.threshold
    if rng is None:
        raise ValueError("random policy needs an rng substream")
    return bool(rng.random() < policy.budget)
