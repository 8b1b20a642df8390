import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabrec.core import UserHistory
from collabrec.data import DriftSpec, build_splits, generate_drift
from collabrec.infer import (
    AlignmentError,
    CandidateSlate,
    EmptyAfterFilterError,
    EmptyScoresError,
    FusionConfig,
    UnknownUserError,
    collaborative_infer,
    fuse,
    normalize,
    rank_by_score,
    slate_from_json,
    slate_to_json,
)
from collabrec.model import SequentialRanker


def make_slate(items, scores=None):
    if scores is None:
        scores = list(range(len(items), 0, -1))
    return CandidateSlate(items=tuple(items), init_scores=tuple(float(s) for s in scores))


class TestNormalize:
    def test_direct(self):
        assert np.allclose(normalize([1, 2, 3]), [0, 0.5, 1])

    def test_degenerate_constant(self):
        assert np.allclose(normalize([7, 7, 7]), [0.5, 0.5, 0.5])

    def test_empty_error(self):
        with pytest.raises(EmptyScoresError):
            normalize([])

    def test_random_vectors_range_and_order(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.normal(size=20)
            y = normalize(x)
            assert y.min() == 0.0 and y.max() == 1.0
            assert (np.argsort(y) == np.argsort(x)).all()


class TestFuse:
    def test_alpha_half_tie_by_item_id(self):
        slate = make_slate([5, 3], scores=[1.0, 0.0])
        out = fuse(slate, [0.0, 1.0], FusionConfig(alpha=0.5))
        assert out.fused == (0.5, 0.5)
        assert out.final_order == (3, 5)

    def test_alpha_one_reproduces_slate_order(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            items = rng.permutation(30)[:10]
            scores = np.sort(rng.normal(size=10))[::-1]
            slate = make_slate(items, scores)
            out = fuse(slate, rng.normal(size=10), FusionConfig(alpha=1.0))
            assert out.final_order == slate.items

    def test_alpha_zero_reproduces_rerank_order(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            items = rng.permutation(30)[:10]
            slate = make_slate(items, np.sort(rng.normal(size=10))[::-1])
            rerank = rng.normal(size=10)
            out = fuse(slate, rerank, FusionConfig(alpha=0.0))
            assert out.final_order == rank_by_score(items, rerank)

    def test_matches_straight_line_recomputation(self):
        rng = np.random.default_rng(3)
        items = list(rng.permutation(40)[:10])
        init = np.sort(rng.normal(size=10))[::-1]
        rerank = rng.normal(size=10)
        alpha = 0.7
        out = fuse(make_slate(items, init), rerank, FusionConfig(alpha=alpha))
        # Independent recomputation of normalize + blend + stable sort.
        ni = (init - init.min()) / (init.max() - init.min())
        nr = (rerank - rerank.min()) / (rerank.max() - rerank.min())
        fused = alpha * ni + (1 - alpha) * nr
        oracle = tuple(sorted(items, key=lambda v: (-fused[items.index(v)], v)))
        assert out.final_order == oracle
        assert np.allclose(out.fused, fused)

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            fuse(make_slate([1, 2, 3]), [0.1, 0.2], FusionConfig())

    def test_filter_floor_drops_doubly_low_items(self):
        slate = make_slate([0, 1, 2, 3], scores=[3.0, 2.0, 1.0, 0.0])
        # Item 3 is lowest on both sides; item 0 highest on init.
        out = fuse(slate, [3.0, 2.0, 1.0, 0.0], FusionConfig(alpha=0.5, filter_floor=0.2))
        assert 3 not in out.items
        assert set(out.items) == {0, 1, 2}

    def test_filter_all_items_error(self):
        slate = make_slate([0, 1], scores=[1.0, 1.0])
        # Constant vectors normalize to 0.5 everywhere; floor above that kills all.
        with pytest.raises(EmptyAfterFilterError):
            fuse(slate, [2.0, 2.0], FusionConfig(alpha=0.5, filter_floor=0.9))

    def test_affine_invariance_of_final_order(self):
        rng = np.random.default_rng(4)
        items = list(range(12))
        init = np.sort(rng.normal(size=12))[::-1]
        rerank = rng.normal(size=12)
        base = fuse(make_slate(items, init), rerank, FusionConfig(alpha=0.4))
        shifted = fuse(make_slate(items, 3.0 * init + 11.0), 0.5 * rerank - 2.0,
                       FusionConfig(alpha=0.4))
        assert base.final_order == shifted.final_order

    def test_permutation_no_item_invented_or_lost(self):
        rng = np.random.default_rng(5)
        items = list(rng.permutation(50)[:15])
        out = fuse(make_slate(items), rng.normal(size=15), FusionConfig(alpha=0.3))
        assert sorted(out.final_order) == sorted(out.items) == sorted(items)

    @given(st.integers(0, 2**16), st.integers(2, 10), st.floats(0.0, 0.99))
    @settings(max_examples=60, deadline=None)
    def test_monotonicity_in_rerank_score(self, seed, n, alpha):
        rng = np.random.default_rng(seed)
        items = list(range(n))
        init = np.sort(rng.normal(size=n))[::-1]
        rerank = rng.normal(size=n)
        before = fuse(make_slate(items, init), rerank, FusionConfig(alpha=alpha))
        target = int(rng.integers(n))
        bumped = rerank.copy()
        bumped[target] += abs(rng.normal()) + 0.1
        after = fuse(make_slate(items, init), bumped, FusionConfig(alpha=alpha))
        assert after.final_order.index(target) <= before.final_order.index(target)


class TestCollaborativeInfer:
    @staticmethod
    def _setup(delta_t):
        spec = DriftSpec(n_users=20, n_items=30, seq_len=12, n_interest_clusters=3,
                         drift_point=0.5, noise=0.1, seed=6)
        splits = build_splits(generate_drift(spec), delta_t=delta_t)
        cloud = SequentialRanker(emb_dim=8, seed=1).init_params(30)
        device = SequentialRanker(emb_dim=4, seed=2).init_params(30)
        return splits, cloud, device

    def test_zero_lag_equals_same_context_fusion(self):
        splits, cloud, device = self._setup(delta_t=0)
        user = splits.users[0]
        out = collaborative_infer(cloud, device, user, splits, k=10, cfg=FusionConfig(0.5))
        hist = UserHistory.from_sequence(user, splits.realtime[user], cloud.max_seq_len)
        slate = cloud.recall_topk(hist, 10)
        dev_hist = UserHistory.from_sequence(user, splits.realtime[user], device.max_seq_len)
        expect = fuse(slate, device.score_items(dev_hist, list(slate.items)),
                      FusionConfig(0.5))
        assert out == expect

    def test_self_fusion_keeps_slate_order(self):
        splits, cloud, _ = self._setup(delta_t=0)
        user = splits.users[0]
        # Same model both sides and no lag: both score vectors agree.
        out = collaborative_infer(cloud, cloud, user, splits, k=10, cfg=FusionConfig(0.3))
        assert out.final_order == out.items

    def test_unknown_user(self):
        splits, cloud, device = self._setup(delta_t=2)
        with pytest.raises(UnknownUserError):
            collaborative_infer(cloud, device, 10**6, splits, k=5, cfg=FusionConfig())

    def test_information_barrier_audit(self):
        splits, cloud, device = self._setup(delta_t=2)
        accesses = []
        collaborative_infer(cloud, device, splits.users[0], splits, k=5,
                            cfg=FusionConfig(), audit=lambda *a: accesses.append(a))
        cloud_sources = {src for role, src, _ in accesses if role == "cloud"}
        assert cloud_sources == {"lagged"}


def test_slate_json_roundtrip():
    slate = make_slate([4, 9, 1], scores=[2.5, 1.0, -3.0])
    line = slate_to_json(7, slate)
    user, back = slate_from_json(line)
    assert user == 7 and back == slate


def test_slate_validation():
    with pytest.raises(Exception):
        CandidateSlate(items=(1, 1), init_scores=(1.0, 0.5))
    with pytest.raises(Exception):
        CandidateSlate(items=(1, 2), init_scores=(0.5, 1.0))  # increasing scores
