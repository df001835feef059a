#!/usr/bin/env python3
"""Run the full pipeline over planted synthetic episodes and print a summary.

Compares the complete route/adapt/calibrate stack against the frozen base
predictor at a fixed layer, mirroring the kind of ablation table a real
benchmark would produce.
"""

import argparse
import json

import numpy as np

from episeg.adapt import TtaConfig, adapt
from episeg.attention_prior import PgrConfig
from episeg.calibration import PacConfig, predict_calibrated
from episeg.config import RunConfig
from episeg.numerics import binary_iou
from episeg.pipeline import run_benchmark, run_episode, iter_episodes
from episeg.routing import HlsConfig, RoutingDecision, layer_risk
from episeg.self_support import SspConfig
from episeg.synthetic import SyntheticSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--shot", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--corruption", type=float, default=0.5)
    ap.add_argument("--out", default="runs/synthetic")
    args = ap.parse_args()

    cfg = RunConfig(
        seed=args.seed,
        shot=args.shot,
        out_dir=args.out,
        synthetic=SyntheticSpec(
            episodes=args.episodes, boundary_corruption=args.corruption, margin=3.0
        ),
        compare_selectors=True,
    )
    summary = run_benchmark(cfg)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2))

    # fixed-layer frozen baseline for contrast
    fixed_layer = cfg.hls.anchor_layer
    base_scores = []
    for index, episode in iter_episodes(cfg):
        decision = RoutingDecision(
            kind="single",
            layers=[fixed_layer],
            weights=[1.0],
            etr=float("nan"),
            per_layer_risk={},
        )
        head = adapt(episode, decision, TtaConfig(variant="m0"), seed=index)
        pred = predict_calibrated(
            episode.query, episode.supports, decision, head,
            cfg.ssp, PgrConfig(enabled=False), PacConfig(gate_policy="off"),
            use_pac=False,
        )
        base_scores.append(binary_iou(pred.mask, episode.query.mask))
    print(f"frozen last-layer baseline mIoU: {np.mean(base_scores):.4f}")
    print(f"full pipeline mIoU:              {summary['mean_iou']:.4f}")


if __name__ == "__main__":
    main()
