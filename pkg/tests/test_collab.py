import numpy as np
import pytest

from collabrec.collab import (
    AugmentedSlate,
    CollabConfig,
    CollabPipeline,
    InvalidAugmentationError,
    PhaseOrderError,
    augment,
    neighbor_table,
    retrain_adaptive,
    train_cooperative,
)
from collabrec.data import DriftSpec, build_splits, generate_drift
from collabrec.infer import CandidateSlate
from collabrec.model import SequentialRanker


def ranker_with_embeddings(emb, seed=0):
    n, d = emb.shape
    r = SequentialRanker(emb_dim=d, seed=seed).init_params(n)
    r.params_["item_emb"] = np.array(emb, dtype=np.float64)
    return r


def slate_of(items):
    return CandidateSlate(items=tuple(items),
                          init_scores=tuple(float(len(items) - i) for i in range(len(items))))


class TestAugment:
    def test_identity_when_k_aug_zero(self):
        r = ranker_with_embeddings(np.eye(4))
        out = augment(slate_of([0, 1]), r, k_aug=0)
        assert out.extra == ()
        assert out.items == (0, 1)

    def test_duplicate_embedding_added_once(self):
        # Items 0,1,2 orthogonal; item 3 duplicates item 0's embedding.
        emb = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
        r = ranker_with_embeddings(emb)
        out = augment(slate_of([0, 1]), r, k_aug=1)
        assert out.extra.count(3) == 1

    def test_matches_brute_force_cosine_oracle(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(20, 6))
        r = ranker_with_embeddings(emb)
        slate = slate_of([3, 7, 11])
        out = augment(slate, r, k_aug=2)
        # Exhaustive all-pairs cosine similarity.
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        sim = unit @ unit.T
        expect = set()
        for i in slate.items:
            order = sorted((j for j in range(20) if j != i),
                           key=lambda j: (-sim[i, j], j))
            expect.update(order[:2])
        expect -= set(slate.items)
        assert set(out.extra) == expect

    def test_invariant_to_slate_order(self):
        rng = np.random.default_rng(1)
        r = ranker_with_embeddings(rng.normal(size=(15, 4)))
        a = augment(slate_of([2, 5, 9]), r, k_aug=2)
        b = augment(slate_of([9, 2, 5]), r, k_aug=2)
        assert set(a.extra) == set(b.extra)

    def test_k_aug_too_large(self):
        r = ranker_with_embeddings(np.eye(4))
        with pytest.raises(InvalidAugmentationError):
            augment(slate_of([0]), r, k_aug=4)

    def test_overlap_rejected(self):
        with pytest.raises(Exception):
            AugmentedSlate(base=slate_of([0, 1]), extra=(1,), k_aug=1)


def drift_setup(seed=0, n_users=60):
    spec = DriftSpec(n_users=n_users, n_items=60, seq_len=16, n_interest_clusters=4,
                     drift_point=0.75, noise=0.1, seed=seed)
    splits = build_splits(generate_drift(spec), delta_t=2)
    return spec, splits


def pretrained_pair(splits, n_items, epochs=4):
    cloud = SequentialRanker(emb_dim=16, lr=0.3, seed=1)
    device = SequentialRanker(emb_dim=8, lr=0.3, seed=2)
    cloud.fit(splits.historical, n_items, epochs=epochs, rng_label="cloud")
    device.fit(splits.historical, n_items, epochs=epochs, rng_label="device")
    return cloud, device


class TestCooperative:
    def test_cloud_frozen(self):
        _, splits = drift_setup()
        cloud, device = pretrained_pair(splits, 60)
        before = cloud.checksum()
        train_cooperative(device, cloud, splits.historical,
                          CollabConfig(cooperative_epochs=2, k_aug=1, n_candidate=10))
        assert cloud.checksum() == before

    def test_device_changes(self):
        _, splits = drift_setup()
        cloud, device = pretrained_pair(splits, 60)
        before = device.checksum()
        train_cooperative(device, cloud, splits.historical,
                          CollabConfig(cooperative_epochs=1, n_candidate=10))
        assert device.checksum() != before

    def test_degenerate_slate_skipped_and_counted(self):
        # Catalog of 2 items, slate length 1: whenever the slate is exactly
        # the positive there is no negative and the sample is skipped.
        seqs = {0: [0, 0, 0, 0, 0]}
        cloud = SequentialRanker(emb_dim=4, seed=1)
        device = SequentialRanker(emb_dim=4, seed=2)
        cloud.fit(seqs, 2, epochs=1)
        device.fit(seqs, 2, epochs=1)
        # Make item 0 the clear cloud favourite so every slate is {0}.
        cloud.params_["item_bias"][:] = [10.0, -10.0]
        report = train_cooperative(device, cloud, seqs,
                                   CollabConfig(cooperative_epochs=1, k_aug=0, n_candidate=1))
        assert report.n_skipped == 4
        assert report.n_samples == 0

    def test_determinism(self):
        def run():
            _, splits = drift_setup()
            cloud, device = pretrained_pair(splits, 60)
            train_cooperative(device, cloud, splits.historical,
                              CollabConfig(cooperative_epochs=2, n_candidate=10))
            return device.checksum()
        assert run() == run()


class TestAdaptive:
    def test_epochs_zero_unchanged(self):
        _, splits = drift_setup()
        cloud, device = pretrained_pair(splits, 60)
        before = device.checksum()
        retrain_adaptive(device, splits.realtime, CollabConfig(adaptive_epochs=0))
        assert device.checksum() == before

    def test_empty_realtime_noop_with_warning(self):
        _, splits = drift_setup()
        _, device = pretrained_pair(splits, 60)
        before = device.checksum()
        report = retrain_adaptive(device, {}, CollabConfig(adaptive_epochs=3))
        assert device.checksum() == before
        assert report.warnings

    def test_same_seed_identical_checkpoint_hash(self):
        def run():
            _, splits = drift_setup()
            cloud, device = pretrained_pair(splits, 60)
            retrain_adaptive(device, splits.realtime, CollabConfig(adaptive_epochs=2))
            return device.checksum()
        assert run() == run()


class TestPipelinePhaseOrder:
    def make(self):
        _, splits = drift_setup(n_users=20)
        cloud = SequentialRanker(emb_dim=8, seed=1)
        device = SequentialRanker(emb_dim=4, seed=2)
        return splits, CollabPipeline(cloud, device, CollabConfig(
            independent_epochs=1, cooperative_epochs=1, adaptive_epochs=1, n_candidate=5))

    def test_cannot_start_with_cooperative(self):
        splits, pl = self.make()
        with pytest.raises(PhaseOrderError):
            pl.run_cooperative(splits.historical)

    def test_cannot_repeat_independent(self):
        splits, pl = self.make()
        pl.run_independent(splits.historical, 60)
        with pytest.raises(PhaseOrderError):
            pl.run_independent(splits.historical, 60)

    def test_cannot_run_cooperative_after_adaptive(self):
        splits, pl = self.make()
        pl.run_independent(splits.historical, 60)
        pl.run_adaptive(splits.realtime)
        with pytest.raises(PhaseOrderError):
            pl.run_cooperative(splits.historical)

    def test_full_order_and_skip_allowed(self):
        splits, pl = self.make()
        pl.run_all(splits.historical, splits.realtime, 60)
        assert pl.completed == ["independent", "cooperative", "adaptive"]

    def test_cloud_untouched_by_later_phases(self):
        splits, pl = self.make()
        pl.run_independent(splits.historical, 60)
        frozen = pl.cloud.checksum()
        pl.run_cooperative(splits.historical)
        pl.run_adaptive(splits.realtime)
        assert pl.cloud.checksum() == frozen
