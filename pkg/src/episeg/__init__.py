"""Episodic few-shot segmentation on cached ViT features.

Per-episode layer routing by leave-one-out transfer risk, parameter-efficient
test-time adaptation of a residual head, entropy-gated Gaussian attention
priors, and pixelwise logit calibration behind a vote gate.
"""

from .adapt import AdaptedHead, TtaConfig, adapt, apply_head, soft_copy
from .attention_prior import PgrConfig, calibrate_attention
from .calibration import PacConfig, predict_calibrated, refine_vote
from .config import RunConfig, load_run_config
from .numerics import binary_iou
from .pipeline import run_benchmark, run_episode
from .routing import HlsConfig, RoutingDecision, route, select_single, transfer_risk
from .self_support import SspConfig, predict
from .store import Episode, FeatureDump, load_episode, read_dump, write_dump
from .synthetic import SyntheticSpec, gen_synthetic

__all__ = [
    "AdaptedHead",
    "Episode",
    "FeatureDump",
    "HlsConfig",
    "PacConfig",
    "PgrConfig",
    "RoutingDecision",
    "RunConfig",
    "SspConfig",
    "SyntheticSpec",
    "TtaConfig",
    "adapt",
    "apply_head",
    "binary_iou",
    "calibrate_attention",
    "gen_synthetic",
    "load_episode",
    "load_run_config",
    "predict",
    "predict_calibrated",
    "read_dump",
    "refine_vote",
    "route",
    "run_benchmark",
    "run_episode",
    "select_single",
    "soft_copy",
    "transfer_risk",
    "write_dump",
]

__version__ = "0.1.0"
