"""Command-line pipeline: prepare -> train -> calibrate -> eval (+ ablate, bridge).

A single YAML config drives every command; each artifact written under the
run directory embeds the config hash so downstream commands can verify
they are consuming artifacts from the same configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import click
import yaml

from .core import CollabrecError, remap_ids
from .collab import CollabConfig, CollabPipeline
from .data import DriftSpec, build_splits, generate_drift, load_splits, read_event_log, save_splits
from .model import SequentialRanker, load_checkpoint, save_checkpoint
from .request import RequestPolicy, calibrate_threshold
from .simeval import (
    ArmSpec,
    SimConfig,
    ablation_suite,
    collect_calibration_scores,
    reports_to_csv,
    run_episode,
)

DEFAULT_CONFIG = {
    "paths": {
        "events": None,       # optional raw TSV event log; drift spec used if absent
        "run_dir": "run",
    },
    "data": {
        "delta_t": 2,
        "hist_frac": 0.5,
        "drift": {
            "n_users": 300,
            "n_items": 160,
            "seq_len": 30,
            "n_interest_clusters": 8,
            "drift_point": 0.7,
            "noise": 0.05,
            "drift_jitter": 6,
            "seed": 7,
        },
    },
    "cloud": {
        "emb_dim": 32,
        "encoder": "mean-pool",
        "max_seq_len": 10,
        "lr": 0.2,
        "weight_decay": 0.0,
        "epochs": 5,
        "neg_rate": 1,
        "batch_size": 256,
        "seed": 11,
    },
    "device": {
        "emb_dim": 5,
        "encoder": "mean-pool",
        "max_seq_len": 5,
        "lr": 0.2,
        "weight_decay": 0.0,
        "epochs": 5,
        "neg_rate": 1,
        "batch_size": 256,
        "seed": 13,
    },
    "collab": {
        "independent_epochs": 80,
        "cooperative_epochs": 10,
        "adaptive_epochs": 10,
        "cooperative_lr": 0.05,
        "adaptive_lr": None,
        "k_aug": 1,
        "n_candidate": 20,
    },
    "fusion": {"alpha": 0.15, "filter_floor": None},
    "request": {"kind": "inconsistency", "budget": 0.2},
    "sim": {"k": 50, "metrics_k": [5, 10, 20], "seed": 0},
    "ablate": {"seeds": [0, 1, 2, 3, 4], "arms": []},
    "bridge": {"host": "127.0.0.1", "port": 7757},
}


class ConfigError(CollabrecError):
    pass


def _merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and key != "arms":
            if not isinstance(val, dict):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _merge(defaults[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    """Load YAML config, apply defaults, reject unknown keys."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, raw)
    # Env overrides are allowed for paths only.
    if os.environ.get("COLLABREC_RUN_DIR"):
        cfg["paths"]["run_dir"] = os.environ["COLLABREC_RUN_DIR"]
    if os.environ.get("COLLABREC_EVENTS"):
        cfg["paths"]["events"] = os.environ["COLLABREC_EVENTS"]
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def _run_dir(cfg) -> Path:
    p = Path(cfg["paths"]["run_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require_artifact(path: Path, producer: str):
    if not path.exists():
        raise ConfigError(f"missing artifact {path}; run `collabrec {producer}` first")


def _rankers(cfg) -> tuple[SequentialRanker, SequentialRanker]:
    return SequentialRanker(**cfg["cloud"]), SequentialRanker(**cfg["device"])


def _collab_cfg(cfg) -> CollabConfig:
    return CollabConfig(**cfg["collab"])


def _load_models(cfg, run_dir: Path, chash: str):
    cloud_p, device_p = run_dir / "cloud.ckpt", run_dir / "device.ckpt"
    _require_artifact(cloud_p, "train")
    _require_artifact(device_p, "train")
    return load_checkpoint(cloud_p, chash), load_checkpoint(device_p, chash)


@click.group()
def main():
    """Device-cloud collaborative recommendation simulator."""


def _cmd(fn):
    # Uniform error handling: nonzero exit with a machine-readable line.
    def wrapper(config, **kw):
        try:
            cfg = load_config(config)
            fn(cfg, **kw)
        except CollabrecError as exc:
            click.echo(json.dumps({"error": str(exc)}), err=True)
            sys.exit(1)
    wrapper.__name__ = fn.__name__
    return wrapper


config_opt = click.option("--config", "-c", required=True,
                          type=click.Path(exists=True), help="YAML run config.")


@main.command()
@config_opt
@_cmd
def prepare(cfg):
    """Build and persist dataset splits (drift synthesis or event log)."""
    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    if cfg["paths"]["events"]:
        events = read_event_log(cfg["paths"]["events"])
        catalog, interactions = remap_ids(events)
        n_items = catalog.n_items
    else:
        spec = DriftSpec(**cfg["data"]["drift"])
        interactions = generate_drift(spec)
        n_items = spec.n_items
    splits = build_splits(interactions, delta_t=cfg["data"]["delta_t"],
                          hist_frac=cfg["data"]["hist_frac"])
    save_splits(splits, run_dir / "splits.jsonl", config_hash=chash)
    (run_dir / "meta.json").write_text(json.dumps(
        {"config_hash": chash, "n_items": n_items, "n_users": len(splits.users),
         "n_dropped": splits.n_dropped}, sort_keys=True))
    click.echo(json.dumps({"ok": "prepare", "users": len(splits.users),
                           "dropped": splits.n_dropped, "n_items": n_items}))


def _load_prepared(cfg, run_dir, chash):
    _require_artifact(run_dir / "splits.jsonl", "prepare")
    _require_artifact(run_dir / "meta.json", "prepare")
    meta = json.loads((run_dir / "meta.json").read_text())
    if meta["config_hash"] != chash:
        raise ConfigError("prepared artifacts were built from a different config; "
                          "run `collabrec prepare` again")
    splits = load_splits(run_dir / "splits.jsonl", expect_config_hash=chash)
    return splits, meta["n_items"]


@main.command()
@config_opt
@_cmd
def train(cfg):
    """Run the three-phase collaborative training pipeline."""
    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    splits, n_items = _load_prepared(cfg, run_dir, chash)
    cloud, device = _rankers(cfg)
    pipeline = CollabPipeline(cloud, device, _collab_cfg(cfg))
    reports = pipeline.run_all(splits.historical, splits.realtime, n_items)
    save_checkpoint(cloud, run_dir / "cloud.ckpt", config_hash=chash)
    save_checkpoint(device, run_dir / "device.ckpt", config_hash=chash)
    with open(run_dir / "train_report.jsonl", "w", encoding="utf-8") as fh:
        for name, report in reports.items():
            fh.write(json.dumps({"report": name, **report.to_dict()}, sort_keys=True) + "\n")
    click.echo(json.dumps({"ok": "train", "phases": sorted(reports)}))


@main.command()
@config_opt
@_cmd
def calibrate(cfg):
    """Calibrate the request threshold from training-period inconsistency."""
    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    splits, _ = _load_prepared(cfg, run_dir, chash)
    cloud, device = _load_models(cfg, run_dir, chash)
    scores = collect_calibration_scores(cloud, device, splits, cfg["sim"]["k"])
    budget = cfg["request"]["budget"]
    threshold = calibrate_threshold(scores, budget)
    (run_dir / "threshold.json").write_text(json.dumps(
        {"config_hash": chash, "threshold": threshold if math.isfinite(threshold) else "inf",
         "budget": budget, "n_scores": len(scores),
         "duplicated_scores": len(set(scores)) < len(scores)}, sort_keys=True))
    with open(run_dir / "calibration_scores.csv", "w", encoding="utf-8") as fh:
        fh.write("c\n")
        for c in scores:
            fh.write(f"{c!r}\n")
    click.echo(json.dumps({"ok": "calibrate",
                           "threshold": threshold if math.isfinite(threshold) else "inf",
                           "n_scores": len(scores)}))


def _load_threshold(run_dir, chash) -> float:
    path = run_dir / "threshold.json"
    _require_artifact(path, "calibrate")
    obj = json.loads(path.read_text())
    if obj["config_hash"] != chash:
        raise ConfigError("threshold was calibrated under a different config; "
                          "run `collabrec calibrate` again")
    return math.inf if obj["threshold"] == "inf" else float(obj["threshold"])


@main.command(name="eval")
@config_opt
@_cmd
def eval_cmd(cfg):
    """Run one evaluation episode and write the report CSV."""
    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    splits, _ = _load_prepared(cfg, run_dir, chash)
    cloud, device = _load_models(cfg, run_dir, chash)
    kind, budget = cfg["request"]["kind"], cfg["request"]["budget"]
    if kind == "inconsistency" and budget > 0:
        policy = RequestPolicy(kind=kind, budget=budget,
                               threshold=_load_threshold(run_dir, chash))
    else:
        policy = RequestPolicy(kind=kind, budget=budget,
                               threshold=math.inf if kind == "inconsistency" else None)
    sim = SimConfig(k=cfg["sim"]["k"], alpha=cfg["fusion"]["alpha"],
                    filter_floor=cfg["fusion"]["filter_floor"], policy=policy,
                    metrics_k=tuple(cfg["sim"]["metrics_k"]), seed=cfg["sim"]["seed"])
    report = run_episode(cloud, device, splits, sim, arm="eval")
    (run_dir / "report.csv").write_text(reports_to_csv([report]))
    (run_dir / "report.json").write_text(json.dumps({
        "config_hash": chash, "arm": report.arm, "seed": report.seed,
        "n_users": report.n_users, "request_count": report.request_count,
        "request_rate": report.request_rate, "bytes_up": report.bytes_up,
        "bytes_down": report.bytes_down, "n_target_missing": report.n_target_missing,
        "metrics": {f"{m}@{K}": v for (m, K), v in sorted(report.metrics.items())},
    }, sort_keys=True))
    click.echo(json.dumps({"ok": "eval", "ndcg@10": report.metrics[("ndcg", 10)],
                           "request_rate": report.request_rate}))


DEFAULT_ARMS = [
    # Training ablation (evaluated with fused inference, no requests).
    {"name": "train-neither", "training": "neither"},
    {"name": "train-coop", "training": "coop"},
    {"name": "train-adaptive", "training": "adaptive"},
    {"name": "train-coop+adaptive", "training": "coop+adaptive"},
    # Inference ablation.
    {"name": "infer-cloud-only", "inference": "cloud-only"},
    {"name": "infer-device-only", "inference": "device-only"},
    {"name": "infer-rerank-only", "inference": "rerank-only"},
    {"name": "infer-fused", "inference": "fused"},
    # Request policy ablation.
    {"name": "req-inconsistency-20", "policy_kind": "inconsistency", "budget": 0.2},
    {"name": "req-random-20", "policy_kind": "random", "budget": 0.2},
    # Candidate length.
    {"name": "len-k20", "k": 20},
    {"name": "len-k50", "k": 50},
]


@main.command()
@config_opt
@_cmd
def ablate(cfg):
    """Run the ablation arm suite over the configured seeds."""
    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    arms = [ArmSpec(**a) for a in (cfg["ablate"]["arms"] or DEFAULT_ARMS)]
    spec = DriftSpec(**cfg["data"]["drift"])
    cloud, device = _rankers(cfg)
    reports = ablation_suite(spec, arms, cloud, device, _collab_cfg(cfg),
                             delta_t=cfg["data"]["delta_t"],
                             hist_frac=cfg["data"]["hist_frac"],
                             metrics_k=tuple(cfg["sim"]["metrics_k"]),
                             seeds=cfg["ablate"]["seeds"])
    (run_dir / "ablate.csv").write_text(reports_to_csv(reports))
    with open(run_dir / "ablate.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps({
                "config_hash": chash, "arm": r.arm, "seed": r.seed,
                "request_rate": r.request_rate,
                "metrics": {f"{m}@{K}": v for (m, K), v in sorted(r.metrics.items())},
            }, sort_keys=True) + "\n")
    click.echo(json.dumps({"ok": "ablate", "arms": sorted({r.arm for r in reports}),
                           "seeds": cfg["ablate"]["seeds"]}))


@main.command()
@config_opt
@_cmd
def bridge(cfg):
    """Serve the trained cloud ranker's slates over the line-JSON bridge."""
    from .bridge import BridgeServer

    chash = config_hash(cfg)
    run_dir = _run_dir(cfg)
    cloud, _ = _load_models(cfg, run_dir, chash)
    server = BridgeServer(cloud, cfg["bridge"]["host"], cfg["bridge"]["port"])
    click.echo(json.dumps({"ok": "bridge", "address": list(server.address)}))
    server.serve_forever()


if __name__ == "__main__":
    main()
