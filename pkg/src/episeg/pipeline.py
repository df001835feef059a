"""End-to-end episodic driver: route, adapt, calibrate, score, report.

Benchmark outputs (CSV/JSON) are deterministic functions of the config and
seed; wall-clock timings stay on the result objects and are never written
into those artifacts.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import adapt, expand_one_shot
from .calibration import gate_on, predict_calibrated
from .config import RunConfig, run_config_to_dict
from .numerics import binary_iou, cos_map, fgbg_softmax, sigmoid
from .routing import RoutingDecision, layer_risk, route, select_single
from .selectors import grad_delta_max, grad_max, static_max
from .self_support import support_prototypes
from .store import Episode, load_episode


@dataclass
class EpisodeResult:
    index: int
    class_id: str
    shot: int
    decision: RoutingDecision
    gate_applied: bool
    gate_policy: str
    votes: list[int]
    pred_mask: np.ndarray
    prob: np.ndarray
    iou: float | None
    branch_norms: dict[str, float]
    timings: dict[str, float] = field(default_factory=dict)

    def gate_report(self) -> dict:
        return {
            "policy": self.gate_policy,
            "votes": list(self.votes),
            "applied": bool(self.gate_applied),
            "branch_norms": {k: float(v) for k, v in self.branch_norms.items()},
        }


def episode_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def resolve_gate_policy(cfg: RunConfig, shot: int):
    """Wire the shot-dependent default: 1-shot always on, K-shot auto with
    a ceil(2K/5) vote threshold."""
    pac = cfg.pac
    if pac.gate_policy != "by_shot":
        return pac
    if shot == 1:
        return replace(pac, gate_policy="always_on")
    return replace(pac, gate_policy="auto", gate_votes=math.ceil(2 * shot / 5))


def _select(episode: Episode, cfg: RunConfig) -> RoutingDecision:
    if cfg.selector == "hls":
        return route(episode, cfg.hls, cfg.ssp)
    if cfg.selector == "static_max":
        layer = static_max(episode, cfg.hls.candidates, cfg.static_max, cfg.ssp)
    elif cfg.selector == "grad_max":
        layer = grad_max(episode, cfg.hls.candidates, cfg.ssp)
    else:
        layer = grad_delta_max(episode, cfg.hls.candidates, cfg.ssp)
    risk = layer_risk(episode, layer, cfg.ssp)
    return RoutingDecision(
        kind="single", layers=[layer], weights=[1.0], etr=risk, per_layer_risk={layer: risk}
    )


def run_episode(episode: Episode, cfg: RunConfig, index: int = 0) -> EpisodeResult:
    """Full pipeline on one episode; the query ground truth is scoring-only."""
    seed = episode_seed(cfg.seed, index)
    original_shot = episode.shot
    timings = {}

    t0 = time.perf_counter()
    if episode.shot == 1:
        episode = expand_one_shot(episode, cfg.tta.augment_views, seed)
    decision = _select(episode, cfg)
    timings["route"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    head = adapt(episode, decision, cfg.tta, kappa=cfg.ssp.kappa, seed=seed)
    timings["adapt"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pac_eff = resolve_gate_policy(cfg, original_shot)
    applied, votes = gate_on(episode, decision, head, cfg.ssp, cfg.pgr, pac_eff)
    pred = predict_calibrated(
        episode.query, episode.supports, decision, head, cfg.ssp, cfg.pgr, pac_eff,
        use_pac=applied,
    )
    timings["predict"] = time.perf_counter() - t0

    iou = None
    if episode.query.mask is not None:
        iou = binary_iou(pred.mask, episode.query.mask)
    return EpisodeResult(
        index=index,
        class_id=episode.class_id,
        shot=original_shot,
        decision=decision,
        gate_applied=applied,
        gate_policy=pac_eff.gate_policy,
        votes=votes,
        pred_mask=pred.mask,
        prob=pred.prob,
        iou=iou,
        branch_norms={
            "sim": float(np.linalg.norm(pred.maps.sim)),
            "attn": float(np.linalg.norm(pred.maps.attn)),
            "img": float(np.linalg.norm(pred.maps.img)),
        },
        timings=timings,
    )


def iter_episodes(cfg: RunConfig):
    """Yield (index, episode) pairs from manifests or the synthetic spec."""
    if cfg.manifests is not None:
        for i, path in enumerate(cfg.manifests):
            yield i, load_episode(path)
    else:
        from .synthetic import gen_episode

        cfg.synthetic.validate()
        for i in range(cfg.synthetic.episodes):
            rng = np.random.default_rng([cfg.seed, i])
            yield i, gen_episode(cfg.synthetic, cfg.shot, rng, class_id=f"synthetic-{i:04d}")


def run_benchmark(cfg: RunConfig) -> dict:
    """Run every episode, write per-episode CSV and summary JSON, return the summary."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    results = []
    for index, episode in iter_episodes(cfg):
        res = run_episode(episode, cfg, index)
        results.append(res)
        rows.append(
            {
                "index": res.index,
                "class_id": res.class_id,
                "shot": res.shot,
                "selector": cfg.selector,
                "kind": res.decision.kind,
                "layers": "|".join(str(l) for l in res.decision.layers),
                "weights": "|".join(repr(w) for w in res.decision.weights),
                "etr": repr(res.decision.etr),
                "gate_policy": res.gate_policy,
                "gate_applied": int(res.gate_applied),
                "votes": "|".join(str(v) for v in res.votes),
                "iou": "" if res.iou is None else repr(res.iou),
            }
        )
    if not rows:
        raise ValueError("benchmark over zero episodes")

    csv_path = os.path.join(cfg.out_dir, "episodes.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    scored = [r.iou for r in results if r.iou is not None]
    autos = [r for r in results if r.gate_policy == "auto"]
    summary = {
        "episodes": len(results),
        "evaluated": len(scored),
        "mean_iou": float(np.mean(scored)) if scored else None,
        "selector": cfg.selector,
        "gate": {
            "auto_episodes": len(autos),
            "triggered": sum(int(r.gate_applied) for r in autos),
            "trigger_rate": (sum(int(r.gate_applied) for r in autos) / len(autos))
            if autos
            else None,
        },
        "config": run_config_to_dict(cfg),
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.compare_selectors:
        selectors_compare(cfg)
    return summary


def selectors_compare(cfg: RunConfig) -> list[dict]:
    """Per-episode layer choice and risk regret for every selector, as CSV."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for index, episode in iter_episodes(cfg):
        if episode.shot == 1:
            episode = expand_one_shot(episode, cfg.tta.augment_views, episode_seed(cfg.seed, index))
        single, risks = select_single(episode, cfg.hls, cfg.ssp)
        floor = min(risks.values())
        chosen = {
            "hls": single,
            "static_max": static_max(episode, cfg.hls.candidates, cfg.static_max, cfg.ssp),
            "grad_max": grad_max(episode, cfg.hls.candidates, cfg.ssp),
            "grad_delta_max": grad_delta_max(episode, cfg.hls.candidates, cfg.ssp),
        }
        for name, layer in chosen.items():
            rows.append(
                {
                    "index": index,
                    "selector": name,
                    "layer": layer,
                    "etr": repr(risks[layer]),
                    "regret": repr(risks[layer] - floor),
                }
            )
    if not rows:
        raise ValueError("selector comparison over zero episodes")
    path = os.path.join(cfg.out_dir, "selector_regret.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def dump_layer_heatmaps(episode: Episode, out_dir, ssp_cfg) -> list[str]:
    """Per-layer foreground-probability maps as P5 PGM plus CSV, one pair per layer."""
    os.makedirs(out_dir, exist_ok=True)
    hg, wg = episode.query.grid
    masks = [s.flat_mask() for s in episode.supports]
    written = []
    for layer in range(episode.query.n_layers):
        feats = [s.tokens[layer].astype(np.float64) for s in episode.supports]
        p_fg, p_bg = support_prototypes(feats, masks)
        fq = episode.query.tokens[layer].astype(np.float64)
        prob = fgbg_softmax(cos_map(fq, p_fg), cos_map(fq, p_bg), ssp_cfg.kappa)
        grid = prob.reshape(hg, wg)
        quant = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
        pgm_path = os.path.join(out_dir, f"layer_{layer:02d}.pgm")
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{wg} {hg}\n255\n".encode("ascii"))
            fh.write(quant.tobytes())
        csv_path = os.path.join(out_dir, f"layer_{layer:02d}.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in grid:
                writer.writerow([repr(v) for v in row])
        written.extend([pgm_path, csv_path])
    return written
