"""Collaborative inference: slates, min-max normalization, score fusion.

The cloud ranker produces a :class:`CandidateSlate` from its (lagged) view
of the user; the device reranks the slate items from real-time history;
:func:`fuse` normalizes both score vectors to [0, 1] and combines them
with weight ``alpha`` on the cloud side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import CollabrecError, UserHistory

__all__ = [
    "CandidateSlate",
    "FusedRanking",
    "FusionConfig",
    "AlignmentError",
    "EmptyScoresError",
    "EmptyAfterFilterError",
    "UnknownUserError",
    "normalize",
    "fuse",
    "collaborative_infer",
    "slate_to_json",
    "slate_from_json",
]


class AlignmentError(CollabrecError):
    pass


class EmptyScoresError(CollabrecError):
    pass


class EmptyAfterFilterError(CollabrecError):
    pass


class UnknownUserError(CollabrecError):
    pass


@dataclass(frozen=True)
class CandidateSlate:
    """Cloud candidate list; its item order IS the initial ranking."""

    items: tuple[int, ...]
    init_scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.init_scores):
            raise AlignmentError(
                f"slate has {len(self.items)} items but {len(self.init_scores)} scores"
            )
        if len(set(self.items)) != len(self.items):
            raise CollabrecError("slate items must be distinct")
        s = self.init_scores
        if any(s[i] < s[i + 1] for i in range(len(s) - 1)):
            raise CollabrecError("slate scores must be non-increasing along the slate order")

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class FusionConfig:
    """Fusion weight and optional normalized-score floor.

    ``alpha`` weights the cloud's initial scores; ``filter_floor`` drops
    items whose normalized scores fall below the floor on both sides
    (disabled when None).
    """

    alpha: float = 0.5
    filter_floor: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.filter_floor is not None and not 0.0 <= self.filter_floor <= 1.0:
            raise ValueError("filter_floor must be in [0, 1]")


@dataclass(frozen=True)
class FusedRanking:
    """Device rerank fused with the cloud's initial ranking."""

    items: tuple[int, ...]
    rerank_scores: tuple[float, ...]
    norm_init: tuple[float, ...]
    norm_rerank: tuple[float, ...]
    alpha: float
    fused: tuple[float, ...]
    final_order: tuple[int, ...]


def normalize(scores) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to all 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyScoresError("cannot normalize an empty score vector")
    if not np.all(np.isfinite(scores)):
        raise CollabrecError("scores must be finite")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full_like(scores, 0.5)
    return (scores - lo) / (hi - lo)


def rank_by_score(items, scores) -> tuple[int, ...]:
    """Descending-score order with ties broken by ascending item id."""
    items = np.asarray(items, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((items, -scores))
    return tuple(int(items[i]) for i in order)


def fuse(slate: CandidateSlate, rerank_scores, cfg: FusionConfig) -> FusedRanking:
    """Normalize both score vectors, optionally filter, and alpha-blend."""
    rerank_scores = np.asarray(rerank_scores, dtype=np.float64)
    if rerank_scores.shape != (len(slate),):
        raise AlignmentError(
            f"rerank scores length {rerank_scores.size} != slate length {len(slate)}"
        )
    norm_init = normalize(slate.init_scores)
    norm_rerank = normalize(rerank_scores)

    items = np.asarray(slate.items, dtype=np.int64)
    if cfg.filter_floor is not None:
        keep = (norm_init >= cfg.filter_floor) | (norm_rerank >= cfg.filter_floor)
        if not keep.any():
            raise EmptyAfterFilterError(
                f"filter_floor={cfg.filter_floor} removed every slate item"
            )
        items = items[keep]
        norm_init = norm_init[keep]
        norm_rerank = norm_rerank[keep]
        rerank_scores = rerank_scores[keep]

    fused = cfg.alpha * norm_init + (1.0 - cfg.alpha) * norm_rerank
    final_order = rank_by_score(items, fused)
    return FusedRanking(
        items=tuple(int(i) for i in items),
        rerank_scores=tuple(float(x) for x in rerank_scores),
        norm_init=tuple(float(x) for x in norm_init),
        norm_rerank=tuple(float(x) for x in norm_rerank),
        alpha=cfg.alpha,
        fused=tuple(float(x) for x in fused),
        final_order=final_order,
    )


def collaborative_infer(cloud, device, user, splits, k: int, cfg: FusionConfig,
                        audit=None) -> FusedRanking:
    """Cloud slate from the lagged view, device rerank from real time, fuse.

    The cloud only ever sees the lagged history here; the device-side
    rerank uses the freshest history. ``audit``, when given, is called as
    ``audit(role, source, user)`` for every history access so tests can
    assert the information barrier.
    """
    if user not in splits.realtime:
        raise UnknownUserError(f"user {user} not present in splits")
    if audit is not None:
        audit("cloud", "lagged", user)
    cloud_hist = UserHistory.from_sequence(user, splits.lagged[user], cloud.max_seq_len)
    slate = cloud.recall_topk(cloud_hist, k)
    if audit is not None:
        audit("device", "realtime", user)
    device_hist = UserHistory.from_sequence(user, splits.realtime[user], device.max_seq_len)
    rerank = device.score_items(device_hist, list(slate.items))
    return fuse(slate, rerank, cfg)


def slate_to_json(user, slate: CandidateSlate) -> str:
    """Wire format shared with the external-ranker bridge (one line)."""
    return json.dumps(
        {"user": int(user), "items": list(slate.items), "scores": list(slate.init_scores)},
        sort_keys=True,
    )


def slate_from_json(line: str) -> tuple[int, CandidateSlate]:
    obj = json.loads(line)
    return obj["user"], CandidateSlate(
        items=tuple(int(i) for i in obj["items"]),
        init_scores=tuple(float(s) for s in obj["scores"]),
    )
