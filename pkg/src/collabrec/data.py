"""Dataset ingestion, leave-one-out splits, negative sampling, drift synthesis.

The split layout per user, for a full chronological sequence ``q``:

* ``test_target``  = q[-1]        (held out, scored at evaluation time)
* ``valid_target`` = q[-2]        (held out, validation)
* ``realtime``     = q[:-2]       (freshest history the device can see)
* ``lagged``       = realtime minus its last ``delta_t`` events (the stale
  view the cloud last received)
* ``historical``   = a prefix of realtime (the cloud/device training period)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CollabrecError,
    EmptyInputError,
    Interaction,
    Rng,
    sequences_by_user,
)

__all__ = [
    "DatasetSplits",
    "NegativeSampler",
    "DriftSpec",
    "InsufficientNegativesError",
    "EmptySplitError",
    "InvalidSpecError",
    "build_splits",
    "generate_drift",
    "read_event_log",
    "save_splits",
    "load_splits",
]

SNAPSHOT_FORMAT = "collabrec-splits"
SNAPSHOT_VERSION = 1


class EmptySplitError(CollabrecError):
    pass


class InsufficientNegativesError(CollabrecError):
    pass


class InvalidSpecError(CollabrecError):
    pass


@dataclass(frozen=True)
class DatasetSplits:
    """Per-user split views plus the two held-out targets."""

    historical: dict[int, tuple[int, ...]]
    realtime: dict[int, tuple[int, ...]]
    lagged: dict[int, tuple[int, ...]]
    valid_target: dict[int, int]
    test_target: dict[int, int]
    delta_t: int
    hist_frac: float
    n_dropped: int = 0

    @property
    def users(self) -> list[int]:
        return sorted(self.realtime)

    def full_sequence(self, user: int) -> list[int]:
        """Reassemble the original chronological sequence for one user."""
        return list(self.realtime[user]) + [self.valid_target[user], self.test_target[user]]

    def positives(self, user: int) -> set[int]:
        return set(self.full_sequence(user))


def build_splits(interactions, delta_t: int = 2, hist_frac: float = 0.5) -> DatasetSplits:
    """Build leave-one-out splits with a lagged cloud view.

    Users with fewer than ``delta_t + 3`` events are dropped (and counted
    in ``n_dropped``) so every surviving user has a non-empty lagged
    history plus both held-out targets.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    if not 0.0 < hist_frac <= 1.0:
        raise ValueError("hist_frac must be in (0, 1]")
    seqs = sequences_by_user(interactions)
    historical, realtime, lagged = {}, {}, {}
    valid_target, test_target = {}, {}
    dropped = 0
    for user, seq in seqs.items():
        if len(seq) < delta_t + 3:
            dropped += 1
            continue
        test_target[user] = seq[-1]
        valid_target[user] = seq[-2]
        rt = tuple(seq[:-2])
        realtime[user] = rt
        cut = len(rt) - min(delta_t, len(rt))
        lagged[user] = rt[:cut]
        historical[user] = rt[: max(1, math.ceil(hist_frac * len(rt)))]
    if not realtime:
        raise EmptySplitError(
            f"all {dropped} users dropped (need >= {delta_t + 3} events per user)"
        )
    return DatasetSplits(
        historical=historical,
        realtime=realtime,
        lagged=lagged,
        valid_target=valid_target,
        test_target=test_target,
        delta_t=delta_t,
        hist_frac=hist_frac,
        n_dropped=dropped,
    )


class NegativeSampler:
    """Uniform sampling over each user's non-positive items.

    ``positives`` maps user -> set of items that may never be sampled.
    """

    def __init__(self, positives: dict[int, set[int]], n_items: int, rate: int = 1):
        if rate < 0:
            raise ValueError("rate must be >= 0")
        self.n_items = n_items
        self.rate = rate
        self._pos = {u: np.array(sorted(p), dtype=np.int64) for u, p in positives.items()}
        self._pool_cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_splits(cls, splits: DatasetSplits, n_items: int, rate: int = 1) -> "NegativeSampler":
        return cls({u: splits.positives(u) for u in splits.users}, n_items, rate)

    def positives_of(self, user: int) -> np.ndarray:
        return self._pos.get(user, np.empty(0, dtype=np.int64))

    def sample(self, user: int, k: int, rng: np.random.Generator) -> list[int]:
        """Draw k distinct non-positive items uniformly for ``user``."""
        if k == 0:
            return []
        pool = self._pool_cache.get(user)
        if pool is None:
            pool = np.setdiff1d(np.arange(self.n_items, dtype=np.int64),
                                self.positives_of(user), assume_unique=False)
            self._pool_cache[user] = pool
        if k > pool.size:
            raise InsufficientNegativesError(
                f"user {user}: requested {k} negatives, only {pool.size} non-positive items"
            )
        picked = rng.choice(pool, size=k, replace=False)
        return [int(i) for i in picked]


@dataclass(frozen=True)
class DriftSpec:
    """Synthetic preference-drift dataset parameters.

    Each user clicks within one interest cluster, then switches to a
    different cluster after ``drift_point`` of the sequence; ``noise`` is
    the probability of an off-cluster click. ``drift_jitter`` (events)
    spreads the switch point per user so users differ in how much of the
    drift falls inside the device-cloud lag window.
    """

    n_users: int
    n_items: int
    seq_len: int
    n_interest_clusters: int
    drift_point: float
    noise: float
    seed: int
    drift_jitter: int = 0

    def __post_init__(self):
        if not 0.0 < self.drift_point < 1.0:
            raise InvalidSpecError("drift_point must be in (0, 1)")
        if not 0.0 <= self.noise < 0.5:
            raise InvalidSpecError("noise must be in [0, 0.5)")
        if self.n_items < self.n_interest_clusters:
            raise InvalidSpecError("need at least one item per interest cluster")
        if self.n_interest_clusters < 2:
            raise InvalidSpecError("need >= 2 clusters to drift between")


def _cluster_members(spec: DriftSpec) -> list[np.ndarray]:
    # Contiguous blocks; remainder items go to the leading clusters.
    return [np.array(block, dtype=np.int64)
            for block in np.array_split(np.arange(spec.n_items), spec.n_interest_clusters)]


def generate_drift(spec: DriftSpec) -> list[Interaction]:
    """Generate one interaction sequence per user with a preference switch."""
    clusters = _cluster_members(spec)
    rng = Rng(spec.seed).substream("drift-dataset")
    base_cut = int(spec.drift_point * spec.seq_len)
    interactions = []
    for user in range(spec.n_users):
        pre = int(rng.integers(spec.n_interest_clusters))
        post = int(rng.integers(spec.n_interest_clusters - 1))
        if post >= pre:
            post += 1
        cut = base_cut
        if spec.drift_jitter:
            cut += int(rng.integers(-spec.drift_jitter, spec.drift_jitter + 1))
            cut = min(max(cut, 1), spec.seq_len - 1)
        for t in range(spec.seq_len):
            active = pre if t < cut else post
            if spec.noise > 0 and rng.random() < spec.noise:
                member = clusters[active]
                item = int(rng.integers(spec.n_items - member.size))
                # Skip over the active cluster's contiguous block.
                if item >= member[0]:
                    item += member.size
            else:
                item = int(rng.choice(clusters[active]))
            interactions.append(Interaction(user=user, item=item, seq_index=t))
    return interactions


def read_event_log(path) -> list[tuple[str, str, float]]:
    """Read a tab-separated ``user<TAB>item<TAB>timestamp`` event log."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CollabrecError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            user, item, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                try:
                    stamp = float(ts)
                except ValueError:
                    raise CollabrecError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
            events.append((user, item, stamp))
    if not events:
        raise EmptyInputError(f"{path}: empty event log")
    return events


def save_splits(splits: DatasetSplits, path, config_hash: str = "") -> None:
    """Persist splits as line-JSON: one header line, then one line per user."""
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "delta_t": splits.delta_t,
        "hist_frac": splits.hist_frac,
        "n_dropped": splits.n_dropped,
        "config_hash": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for user in splits.users:
            row = {
                "user": user,
                "realtime": list(splits.realtime[user]),
                "hist_len": len(splits.historical[user]),
                "valid": splits.valid_target[user],
                "test": splits.test_target[user],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_splits(path, expect_config_hash: str | None = None) -> DatasetSplits:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
            raise CollabrecError(f"{path}: not a version-{SNAPSHOT_VERSION} splits snapshot")
        if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
            raise CollabrecError(
                f"{path}: config hash mismatch "
                f"(snapshot {header['config_hash']!r}, expected {expect_config_hash!r})"
            )
        delta_t = header["delta_t"]
        historical, realtime, lagged = {}, {}, {}
        valid_target, test_target = {}, {}
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            user = row["user"]
            rt = tuple(row["realtime"])
            realtime[user] = rt
            historical[user] = rt[: row["hist_len"]]
            cut = len(rt) - min(delta_t, len(rt))
            lagged[user] = rt[:cut]
            valid_target[user] = row["valid"]
            test_target[user] = row["test"]
    return DatasetSplits(
        historical=historical,
        realtime=realtime,
        lagged=lagged,
        valid_target=valid_target,
        test_target=test_target,
        delta_t=delta_t,
        hist_frac=header["hist_frac"],
        n_dropped=header["n_dropped"],
    )
