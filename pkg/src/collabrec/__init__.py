"""Device-cloud collaborative sequential recommendation simulator."""

from .core import Catalog, Interaction, Rng, UserHistory, remap_ids
from .data import DatasetSplits, DriftSpec, NegativeSampler, build_splits, generate_drift
from .infer import CandidateSlate, FusedRanking, FusionConfig, collaborative_infer, fuse, normalize
from .model import SequentialRanker, TrainReport, gradient_check, load_checkpoint, save_checkpoint
from .collab import AugmentedSlate, CollabConfig, CollabPipeline, augment, retrain_adaptive, train_cooperative
from .request import InconsistencyScore, RequestPolicy, calibrate_threshold, decide, inconsistency
from .simeval import ArmSpec, EvalCase, SimConfig, SimReport, metric_hr, metric_ndcg, metric_precision, run_ablation, run_episode
from .bridge import BridgeClient, BridgeServer, bridge_serve

__version__ = "0.1.0"
