"""Event-driven device-cloud simulation, top-k metrics, and ablation arms.

One evaluation step per test user: the cloud recalls a slate from its
lagged view, the device reranks from real time, the inconsistency score
feeds the request policy, a granted request regenerates the slate from
fresh data, and the fused ranking is scored against the held-out target.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CollabrecError, Rng, UserHistory
from .collab import CollabConfig, CollabPipeline
from .infer import FusionConfig, fuse, rank_by_score
from .model import SequentialRanker
from .request import CalibrationError, RequestPolicy, decide, inconsistency

__all__ = [
    "SimConfig",
    "SimReport",
    "EvalCase",
    "ArmSpec",
    "metric_ndcg",
    "metric_hr",
    "metric_precision",
    "collect_calibration_scores",
    "run_episode",
    "run_ablation",
    "ablation_suite",
    "report_rows",
    "reports_to_csv",
    "mean_metric",
    "train_variants",
]

INFERENCE_MODES = ("fused", "cloud-only", "rerank-only", "device-only")
TRAINING_ARMS = ("neither", "coop", "adaptive", "coop+adaptive")

# Coarse wire-cost model: 8-byte ids, 8-byte scores.
ID_BYTES = 8
SCORE_BYTES = 8


@dataclass(frozen=True)
class EvalCase:
    """One leave-one-out evaluation: a ranking and the held-out target."""

    user: int
    final_order: tuple[int, ...]
    target: int


def _target_rank(case: EvalCase) -> int | None:
    try:
        return case.final_order.index(case.target)
    except ValueError:
        return None


def metric_ndcg(case: EvalCase, K: int) -> float:
    """1/log2(rank+2) if the target ranks inside the top K, else 0."""
    r = _target_rank(case)
    return 1.0 / math.log2(r + 2) if r is not None and r < K else 0.0


def metric_hr(case: EvalCase, K: int) -> float:
    r = _target_rank(case)
    return 1.0 if r is not None and r < K else 0.0


def metric_precision(case: EvalCase, K: int) -> float:
    return metric_hr(case, K) / K


@dataclass(frozen=True)
class SimConfig:
    """Candidate length, fusion weight, policy, and metric cutoffs."""

    k: int = 50
    alpha: float = 0.15
    filter_floor: float | None = None
    policy: RequestPolicy = field(default_factory=RequestPolicy)
    metrics_k: tuple[int, ...] = (5, 10, 20)
    inference_mode: str = "fused"
    seed: int = 0

    def __post_init__(self):
        if list(self.metrics_k) != sorted(self.metrics_k):
            raise ValueError("metrics_k must be sorted ascending")
        if self.k < max(self.metrics_k):
            raise ValueError("candidate length k must cover the largest metric cutoff")
        if self.inference_mode not in INFERENCE_MODES:
            raise ValueError(f"inference_mode must be one of {INFERENCE_MODES}")

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(alpha=self.alpha, filter_floor=self.filter_floor)


@dataclass
class SimReport:
    """Aggregated metrics and communication accounting for one arm/seed."""

    arm: str
    seed: int
    n_users: int = 0
    metrics: dict = field(default_factory=dict)  # (name, K) -> mean
    request_count: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    n_target_missing: int = 0
    threshold: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def request_rate(self) -> float:
        return self.request_count / self.n_users if self.n_users else 0.0


def _default_provider(cloud: SequentialRanker):
    def provider(user, history_items, k):
        hist = UserHistory.from_sequence(user, history_items, cloud.max_seq_len)
        return cloud.recall_topk(hist, k)
    return provider


def collect_calibration_scores(cloud, device, splits, k: int,
                               slate_provider=None) -> list[float]:
    """Inconsistency scores from the step before the test step.

    Histories are truncated by one event so calibration draws from the
    same distribution as evaluation without reusing the very same scores.
    """
    provider = slate_provider or _default_provider(cloud)
    scores = []
    for user in splits.users:
        rt = splits.realtime[user][:-1]
        if not rt:
            continue
        cut = len(rt) - min(splits.delta_t, len(rt))
        lag = rt[:cut]
        if not lag:
            continue
        slate = provider(user, list(lag), k)
        hist = UserHistory.from_sequence(user, rt, device.max_seq_len)
        rerank = device.score_items(hist, list(slate.items))
        rerank_order = rank_by_score(slate.items, rerank)
        scores.append(inconsistency(slate.items, rerank_order).c)
    return scores


def run_episode(cloud, device, splits, cfg: SimConfig, slate_provider=None,
                arm: str = "default", audit=None) -> SimReport:
    """Evaluate every test user once under the configured policy and mode."""
    if cfg.inference_mode != "device-only" and cfg.policy.kind == "inconsistency" \
            and cfg.policy.budget > 0 and cfg.policy.threshold is None:
        raise CalibrationError(
            "inconsistency policy has no threshold; run calibration first"
        )
    policy = cfg.policy
    if policy.kind == "inconsistency" and policy.threshold is None:
        policy = policy.with_threshold(math.inf)  # budget 0: never request

    provider = slate_provider or (_default_provider(cloud) if cloud is not None else None)
    policy_rng = Rng(cfg.seed).substream("request-policy")
    report = SimReport(arm=arm, seed=cfg.seed, threshold=policy.threshold)
    sums: dict = {(m, K): 0.0 for m in ("ndcg", "hr", "precision") for K in cfg.metrics_k}

    for user in splits.users:
        target = splits.test_target[user]
        if cfg.inference_mode == "device-only":
            if audit is not None:
                audit("device", "realtime", user)
            hist = UserHistory.from_sequence(user, splits.realtime[user], device.max_seq_len)
            final_order = device.recall_topk(hist, cfg.k).items
        else:
            if audit is not None:
                audit("cloud", "lagged", user)
            slate = provider(user, list(splits.lagged[user]), cfg.k)
            if audit is not None:
                audit("device", "realtime", user)
            dev_hist = UserHistory.from_sequence(user, splits.realtime[user],
                                                 device.max_seq_len)
            rerank = device.score_items(dev_hist, list(slate.items))
            rerank_order = rank_by_score(slate.items, rerank)
            c = inconsistency(slate.items, rerank_order)
            if decide(policy, c, policy_rng):
                # Granted: the cloud re-reads fresh data and regenerates.
                if audit is not None:
                    audit("cloud", "realtime", user)
                report.request_count += 1
                report.bytes_up += len(dev_hist.items) * ID_BYTES
                report.bytes_down += cfg.k * (ID_BYTES + SCORE_BYTES)
                slate = provider(user, list(splits.realtime[user]), cfg.k)
                rerank = device.score_items(dev_hist, list(slate.items))

            if cfg.inference_mode == "cloud-only":
                final_order = slate.items
            elif cfg.inference_mode == "rerank-only":
                final_order = rank_by_score(slate.items, rerank)
            else:
                final_order = fuse(slate, rerank, cfg.fusion).final_order

        case = EvalCase(user=user, final_order=tuple(final_order), target=target)
        if _target_rank(case) is None:
            report.n_target_missing += 1
        for K in cfg.metrics_k:
            sums[("ndcg", K)] += metric_ndcg(case, K)
            sums[("hr", K)] += metric_hr(case, K)
            sums[("precision", K)] += metric_precision(case, K)
        report.n_users += 1

    report.metrics = {key: val / report.n_users for key, val in sums.items()}
    return report


@dataclass(frozen=True)
class ArmSpec:
    """One ablation arm: training variant x inference mode x policy."""

    name: str
    training: str = "coop+adaptive"
    inference: str = "fused"
    k: int = 50
    alpha: float = 0.15
    policy_kind: str = "none"  # none | inconsistency | random
    budget: float = 0.0

    def __post_init__(self):
        if self.training not in TRAINING_ARMS:
            raise ValueError(f"training must be one of {TRAINING_ARMS}")
        if self.inference not in INFERENCE_MODES:
            raise ValueError(f"inference must be one of {INFERENCE_MODES}")
        if self.policy_kind not in ("none", "inconsistency", "random"):
            raise ValueError(f"unknown policy kind {self.policy_kind!r}")


def train_variants(splits, n_items: int, cloud_proto: SequentialRanker,
                   device_proto: SequentialRanker, collab_cfg: CollabConfig,
                   trainings) -> tuple[SequentialRanker, dict]:
    """Train the shared cloud once and one device per training variant.

    All variants share the independent pretraining (copied, not re-run) so
    arms differ only in the ablated phase.
    """
    trainings = sorted(set(trainings), key=TRAINING_ARMS.index)
    cloud = copy.deepcopy(cloud_proto)
    base_device = copy.deepcopy(device_proto)
    pipeline = CollabPipeline(cloud, base_device, collab_cfg)
    pipeline.run_independent(splits.historical, n_items)

    devices = {}
    for training in trainings:
        device = copy.deepcopy(base_device)
        pl = CollabPipeline(cloud, device, collab_cfg)
        pl.completed = ["independent"]
        if "coop" in training:
            pl.run_cooperative(splits.historical)
        if "adaptive" in training:
            pl.run_adaptive(splits.realtime)
        devices[training] = device
    return cloud, devices


def run_ablation(splits, n_items: int, arms, cloud_proto: SequentialRanker,
                 device_proto: SequentialRanker, collab_cfg: CollabConfig,
                 metrics_k=(5, 10, 20), seed: int = 0) -> list[SimReport]:
    """Run every arm on shared data, models, and seeds; one report per arm."""
    arms = list(arms)
    cloud, devices = train_variants(splits, n_items, cloud_proto, device_proto,
                                    collab_cfg, [a.training for a in arms])
    reports = []
    for arm in arms:
        device = devices[arm.training]
        if arm.policy_kind == "none":
            policy = RequestPolicy(kind="inconsistency", budget=0.0, threshold=math.inf)
        elif arm.policy_kind == "random":
            policy = RequestPolicy(kind="random", budget=arm.budget)
        else:
            scores = collect_calibration_scores(cloud, device, splits, arm.k)
            from .request import calibrate_threshold
            policy = RequestPolicy(kind="inconsistency", budget=arm.budget,
                                   threshold=calibrate_threshold(scores, arm.budget))
        cfg = SimConfig(k=arm.k, alpha=arm.alpha, policy=policy,
                        metrics_k=tuple(metrics_k), inference_mode=arm.inference,
                        seed=seed)
        report = run_episode(cloud, device, splits, cfg, arm=arm.name)
        if arm.policy_kind == "inconsistency" and len(set(scores)) < len(scores):
            # Ties at the threshold can push the realized rate above budget.
            report.warnings.append("duplicated calibration scores")
        reports.append(report)
    return reports


def ablation_suite(drift_spec, arms, cloud_proto, device_proto, collab_cfg,
                   delta_t: int = 2, hist_frac: float = 0.5,
                   metrics_k=(5, 10, 20), seeds=(0,)) -> list[SimReport]:
    """Regenerate data, retrain, and run all arms for each seed."""
    from .data import build_splits, generate_drift

    reports = []
    for seed in seeds:
        spec = replace(drift_spec, seed=drift_spec.seed + seed)
        interactions = generate_drift(spec)
        splits = build_splits(interactions, delta_t=delta_t, hist_frac=hist_frac)
        cloud = copy.deepcopy(cloud_proto)
        device = copy.deepcopy(device_proto)
        cloud.seed = cloud_proto.seed + seed
        device.seed = device_proto.seed + seed
        for rep in run_ablation(splits, spec.n_items, arms, cloud, device,
                                collab_cfg, metrics_k=metrics_k, seed=seed):
            reports.append(rep)
    return reports


def report_rows(report: SimReport) -> list[dict]:
    """Flatten one report into CSV rows (arm, metric, K, value, ...)."""
    rows = []
    for (metric, K), value in sorted(report.metrics.items()):
        rows.append({
            "arm": report.arm,
            "metric": metric,
            "K": K,
            "value": repr(float(value)),
            "request_rate": repr(float(report.request_rate)),
            "seed": report.seed,
        })
    return rows


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["arm", "metric", "K", "value", "request_rate", "seed"],
        lineterminator="\n",
    )
    writer.writeheader()
    for report in reports:
        for row in report_rows(report):
            writer.writerow(row)
    return buf.getvalue()


def mean_metric(reports, arm: str, metric: str, K: int) -> float:
    """Mean of one metric across seeds for a named arm."""
    vals = [r.metrics[(metric, K)] for r in reports if r.arm == arm]
    if not vals:
        raise CollabrecError(f"no reports for arm {arm!r}")
    return float(np.mean(vals))
