"""Shared domain types, id remapping, and deterministic randomness.

Everything downstream works with dense integer ids; raw (string) ids only
exist at the ingestion boundary. Randomness is counter-based (Philox) with
named substreams so that two runs differing in one component draw identical
numbers everywhere else.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CollabrecError",
    "DuplicateEventError",
    "EmptyInputError",
    "UnknownIdError",
    "Interaction",
    "UserHistory",
    "Catalog",
    "Rng",
    "remap_ids",
]


class CollabrecError(Exception):
    """Base class for all errors raised by this package."""


class DuplicateEventError(CollabrecError):
    pass


class EmptyInputError(CollabrecError):
    pass


class UnknownIdError(CollabrecError):
    pass


@dataclass(frozen=True)
class Interaction:
    """A single (user, item) event with its ordinal position and label.

    ``seq_index`` is the 0-based position in the user's lifetime sequence;
    ``label`` is 1 for an observed click and 0 for a sampled negative.
    """

    user: int
    item: int
    seq_index: int
    label: int = 1

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class UserHistory:
    """Chronological item sequence for one user, windowed to ``max_len``.

    ``items`` holds the most recent ``max_len`` items in chronological
    order (oldest first). An empty history is legal.
    """

    user: int
    items: tuple[int, ...]
    max_len: int

    @classmethod
    def from_sequence(cls, user: int, items, max_len: int) -> "UserHistory":
        items = tuple(items)
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        return cls(user=user, items=items[-max_len:], max_len=max_len)


@dataclass(frozen=True)
class Catalog:
    """Bijective mapping between raw ids and dense 0-based ids."""

    user_to_dense: dict = field(repr=False)
    item_to_dense: dict = field(repr=False)

    @property
    def n_users(self) -> int:
        return len(self.user_to_dense)

    @property
    def n_items(self) -> int:
        return len(self.item_to_dense)

    def dense_item(self, raw) -> int:
        try:
            return self.item_to_dense[raw]
        except KeyError:
            raise UnknownIdError(f"unknown raw item id: {raw!r}") from None

    def dense_user(self, raw) -> int:
        try:
            return self.user_to_dense[raw]
        except KeyError:
            raise UnknownIdError(f"unknown raw user id: {raw!r}") from None

    def raw_items(self) -> list:
        inv = [None] * self.n_items
        for raw, dense in self.item_to_dense.items():
            inv[dense] = raw
        return inv

    def raw_users(self) -> list:
        inv = [None] * self.n_users
        for raw, dense in self.user_to_dense.items():
            inv[dense] = raw
        return inv


def _stream_key(name: str) -> int:
    # Stable 64-bit key per substream name, platform independent.
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Seeded counter-based random source with named substreams.

    Substreams are keyed by (seed, sha256(name)) into a Philox generator,
    so the draws of one purpose (negative sampling, init, augmentation,
    random policy, ...) never shift when another purpose draws more or
    fewer numbers.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def substream(self, name: str) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, _stream_key(name)],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def remap_ids(raw_events) -> tuple[Catalog, list[Interaction]]:
    """Densify raw (user, item, timestamp) events into Interactions.

    Dense ids are assigned in first-appearance order over the input as
    given. Per-user ``seq_index`` follows timestamp order, ties broken by
    input order. Output is sorted by (user, seq_index).
    """
    raw_events = list(raw_events)
    if not raw_events:
        raise EmptyInputError("no events to remap")

    seen = set()
    user_to_dense: dict = {}
    per_user: dict[int, list] = {}
    for user, item, ts in raw_events:
        trip = (user, ts, item)
        if trip in seen:
            raise DuplicateEventError(f"duplicate event {trip!r}")
        seen.add(trip)
        if user not in user_to_dense:
            user_to_dense[user] = len(user_to_dense)
        per_user.setdefault(user_to_dense[user], []).append((ts, item))

    # Item ids follow first appearance in the canonical (user, time) stream
    # so remapping the output's raw form reproduces the same dense ids.
    item_to_dense: dict = {}
    interactions = []
    for u in sorted(per_user):
        # Stable sort keeps input order for equal timestamps within a user.
        events = sorted(per_user[u], key=lambda e: e[0])
        for idx, (_, item) in enumerate(events):
            if item not in item_to_dense:
                item_to_dense[item] = len(item_to_dense)
            interactions.append(Interaction(user=u, item=item_to_dense[item], seq_index=idx))
    catalog = Catalog(user_to_dense=user_to_dense, item_to_dense=item_to_dense)
    return catalog, interactions


def sequences_by_user(interactions) -> dict[int, list[int]]:
    """Group interactions into per-user chronological item lists."""
    out: dict[int, list[int]] = {}
    for it in sorted(interactions, key=lambda i: (i.user, i.seq_index)):
        if it.label == 1:
            out.setdefault(it.user, []).append(it.item)
    return out
