"""Three-phase collaborative training: independent, cooperative, adaptive.

Independent training fits cloud and device rankers separately on the
historical split. Cooperative training then teaches the device to rerank
inside cloud candidate slates (augmented with embedding-space neighbors),
with the cloud frozen. Adaptive re-training finally continues device
training on the real-time split so it tracks fresh preferences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CollabrecError, Rng, UserHistory
from .infer import CandidateSlate
from .model import SequentialRanker, TrainReport, softmax_slate_batch

__all__ = [
    "AugmentedSlate",
    "InvalidAugmentationError",
    "PhaseOrderError",
    "CollabConfig",
    "CollabPipeline",
    "neighbor_table",
    "augment",
    "train_cooperative",
    "retrain_adaptive",
]


class InvalidAugmentationError(CollabrecError):
    pass


class PhaseOrderError(CollabrecError):
    pass


@dataclass(frozen=True)
class AugmentedSlate:
    """A candidate slate expanded with confusable (nearby-embedding) items."""

    base: CandidateSlate
    extra: tuple[int, ...]
    k_aug: int

    def __post_init__(self):
        if set(self.extra) & set(self.base.items):
            raise CollabrecError("augmentation extras overlap the base slate")
        if len(set(self.extra)) != len(self.extra):
            raise CollabrecError("augmentation extras must be distinct")
        if self.k_aug == 0 and self.extra:
            raise CollabrecError("k_aug=0 must produce an identity augmentation")

    @property
    def items(self) -> tuple[int, ...]:
        return self.base.items + self.extra


def neighbor_table(cloud: SequentialRanker, k_aug: int) -> np.ndarray:
    """(n_items, k_aug) cosine nearest neighbors in the cloud embedding space.

    Ties break by ascending item id; an item is never its own neighbor.
    """
    emb = cloud.params_["item_emb"]
    n = emb.shape[0]
    if k_aug >= n:
        raise InvalidAugmentationError(f"k_aug={k_aug} must be < catalog size {n}")
    if k_aug == 0:
        return np.empty((n, 0), dtype=np.int64)
    norms = np.linalg.norm(emb, axis=1)
    unit = emb / np.maximum(norms, 1e-12)[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    ids = np.arange(n)
    table = np.empty((n, k_aug), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((ids, -sim[i]))
        table[i] = order[:k_aug]
    return table


def augment(slate: CandidateSlate, cloud: SequentialRanker, k_aug: int,
            table: np.ndarray | None = None) -> AugmentedSlate:
    """Add each base item's cosine neighbors, deduplicated, base excluded."""
    if len(slate) == 0:
        raise CollabrecError("cannot augment an empty slate")
    if table is None:
        table = neighbor_table(cloud, k_aug)
    base = set(slate.items)
    extra = sorted({int(j) for i in slate.items for j in table[i]} - base)
    return AugmentedSlate(base=slate, extra=tuple(extra), k_aug=k_aug)


@dataclass(frozen=True)
class CollabConfig:
    """Epoch/lr budgets for the three phases plus slate augmentation knobs."""

    independent_epochs: int = 5
    cooperative_epochs: int = 3
    adaptive_epochs: int = 3
    cooperative_lr: float | None = None
    adaptive_lr: float | None = None
    k_aug: int = 1
    n_candidate: int = 20


def train_cooperative(device: SequentialRanker, cloud: SequentialRanker,
                      sequences: dict, cfg: CollabConfig) -> TrainReport:
    """Rerank training within augmented cloud slates; cloud stays frozen.

    For every (history, positive) sample the cloud recalls a slate from
    that history, the slate is augmented, and the device minimizes softmax
    cross-entropy of the positive against the other slate items. Samples
    whose augmented slate contains no negative are skipped and counted.
    """
    report = TrainReport(phase="cooperative")
    if not sequences:
        report.warnings.append("empty cooperative training data")
        return report
    n_items = cloud.n_items_
    table = neighbor_table(cloud, cfg.k_aug)
    k = min(cfg.n_candidate, n_items)

    samples = device._make_samples(sequences)
    rows = []  # (hist, [pos] + slate negatives)
    for user, hist, pos in samples:
        cloud_hist = UserHistory.from_sequence(user, hist, cloud.max_seq_len)
        slate = cloud.recall_topk(cloud_hist, k)
        aug = augment(slate, cloud, cfg.k_aug, table=table)
        negs = [i for i in aug.items if i != pos]
        if not negs:
            report.n_skipped += 1
            continue
        rows.append((hist[-device.max_seq_len:], [pos] + negs))
    report.n_samples = len(rows)
    if not rows:
        report.warnings.append("every cooperative sample was degenerate; parameters unchanged")
        return report

    rng = Rng(device.seed).substream("train-cooperative")
    lr = cfg.cooperative_lr if cfg.cooperative_lr is not None else device.lr
    for _ in range(cfg.cooperative_epochs):
        order = rng.permutation(len(rows))
        buckets: dict[tuple[int, int], list[int]] = {}
        for i in order:
            hist, row = rows[i]
            buckets.setdefault((len(hist), len(row)), []).append(i)
        losses = []
        for key in sorted(buckets):
            idx = buckets[key]
            for start in range(0, len(idx), device.batch_size):
                chunk = idx[start:start + device.batch_size]
                hist = np.array([rows[i][0] for i in chunk], dtype=np.int64)
                slate_rows = np.array([rows[i][1] for i in chunk], dtype=np.int64)
                loss, grads = softmax_slate_batch(device, hist, slate_rows)
                device._apply_grads(grads, lr)
                losses.append(loss)
        report.epoch_losses.append(float(np.mean(losses)))
    return report


def retrain_adaptive(device: SequentialRanker, realtime_sequences: dict,
                     cfg: CollabConfig) -> TrainReport:
    """Continue device training on real-time data (fresh optimizer state)."""
    if not realtime_sequences:
        report = TrainReport(phase="adaptive")
        report.warnings.append("no real-time data; adaptive re-training skipped")
        return report
    return device.fit(realtime_sequences, device.n_items_, phase="adaptive",
                      epochs=cfg.adaptive_epochs, lr=cfg.adaptive_lr)


_PHASES = ("independent", "cooperative", "adaptive")


class CollabPipeline:
    """Enforces the independent -> cooperative -> adaptive phase order."""

    def __init__(self, cloud: SequentialRanker, device: SequentialRanker,
                 cfg: CollabConfig = CollabConfig()):
        self.cloud = cloud
        self.device = device
        self.cfg = cfg
        self.completed: list[str] = []
        self.reports: dict[str, TrainReport] = {}

    def _require(self, phase: str):
        # Later phases may be skipped but never reordered or repeated, and
        # nothing runs before independent pretraining.
        idx = _PHASES.index(phase)
        done = [_PHASES.index(p) for p in self.completed]
        if phase in self.completed or any(d >= idx for d in done) or (
                idx > 0 and "independent" not in self.completed):
            raise PhaseOrderError(
                f"phase {phase!r} cannot run after {self.completed or 'nothing'}"
            )

    def run_independent(self, historical: dict, n_items: int, sampler=None):
        self._require("independent")
        r_cloud = self.cloud.fit(historical, n_items, sampler=sampler,
                                 epochs=self.cfg.independent_epochs, rng_label="cloud")
        r_device = self.device.fit(historical, n_items, sampler=sampler,
                                   epochs=self.cfg.independent_epochs, rng_label="device")
        self.completed.append("independent")
        self.reports["independent-cloud"] = r_cloud
        self.reports["independent-device"] = r_device
        return r_cloud, r_device

    def run_cooperative(self, historical: dict):
        self._require("cooperative")
        report = train_cooperative(self.device, self.cloud, historical, self.cfg)
        self.completed.append("cooperative")
        self.reports["cooperative"] = report
        return report

    def run_adaptive(self, realtime: dict):
        self._require("adaptive")
        report = retrain_adaptive(self.device, realtime, self.cfg)
        self.completed.append("adaptive")
        self.reports["adaptive"] = report
        return report

    def run_all(self, historical: dict, realtime: dict, n_items: int, sampler=None):
        self.run_independent(historical, n_items, sampler=sampler)
        self.run_cooperative(historical)
        self.run_adaptive(realtime)
        return self.reports
