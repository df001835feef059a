"""Per-episode layer routing by leave-one-out transfer risk, with local fusion.

Stage I scores every candidate layer by treating each support as a pseudo
query predicted from the remaining supports; stage II re-scores a compact
set of fusion candidates anchored at the stage-I winner and always
containing the last-block anchor, then the global minimizer wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import binarize, binary_iou
from .self_support import SspConfig, predict, support_prototypes
from .store import Episode


class TooFewSupportsError(ValueError):
    """Risk estimation needs at least two effective supports."""


@dataclass
class HlsConfig:
    candidates: list[int] = field(default_factory=lambda: list(range(12, 24)))
    beta: float = 10.0  # reliance on per-layer risk evidence
    tau_fusion: float = 2.0  # locality bandwidth; 0 disables the locality term
    anchor_layer: int = 23
    fusion_pools: list[list[int]] | None = None  # None -> derived around the stage-I winner

    def validate(self) -> None:
        if not self.candidates:
            raise ValueError("candidate set is empty")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.tau_fusion < 0:
            raise ValueError("tau_fusion must be >= 0")
        if self.anchor_layer not in self.candidates:
            raise ValueError("anchor layer must be a candidate")


@dataclass
class RoutingDecision:
    kind: str  # "single" | "fusion"
    layers: list[int]
    weights: list[float]
    etr: float
    per_layer_risk: dict[int, float]

    def features(self, dump) -> np.ndarray:
        """Routed representation [N, D] of a dump under this decision."""
        toks = dump.tokens.astype(np.float64)
        if self.kind == "single":
            return toks[self.layers[0]]
        return np.tensordot(np.asarray(self.weights), toks[self.layers], axes=1)

    def primary_layer(self) -> int:
        """The evidence-dominant layer: max fusion weight, ties to deeper."""
        if self.kind == "single":
            return self.layers[0]
        best = max(zip(self.weights, self.layers))
        return best[1]

    def to_report(self) -> dict:
        return {
            "kind": self.kind,
            "layers": list(self.layers),
            "weights": [float(w) for w in self.weights],
            "etr": float(self.etr),
            "per_layer_risk": {str(k): float(v) for k, v in sorted(self.per_layer_risk.items())},
        }


def transfer_risk(feats: list[np.ndarray], masks: list[np.ndarray], ssp_cfg: SspConfig) -> float:
    """One minus the mean leave-one-out pseudo-query foreground IoU.

    ``feats[i]``/``masks[i]`` describe support i at one representation; each
    support in turn is predicted from prototypes pooled over the others.
    """
    k = len(feats)
    if k < 2:
        raise TooFewSupportsError(f"need >= 2 supports, got {k}")
    ious = []
    for i in range(k):
        rest = [j for j in range(k) if j != i]
        ps_fg, ps_bg = support_prototypes([feats[j] for j in rest], [masks[j] for j in rest])
        pred = predict(feats[i], ps_fg, ps_bg, ssp_cfg)
        ious.append(binary_iou(binarize(pred.prob), masks[i] >= 0.5))
    return 1.0 - float(np.mean(ious))


def _support_views(episode: Episode) -> tuple[list[np.ndarray], list[np.ndarray]]:
    feats = [s.tokens.astype(np.float64) for s in episode.supports]
    masks = [s.flat_mask() for s in episode.supports]
    return feats, masks


def layer_risk(episode: Episode, layer: int, ssp_cfg: SspConfig) -> float:
    toks, masks = _support_views(episode)
    return transfer_risk([t[layer] for t in toks], masks, ssp_cfg)


def select_single(
    episode: Episode, cfg: HlsConfig, ssp_cfg: SspConfig
) -> tuple[int, dict[int, float]]:
    """Argmin of per-layer risk over the candidates; ties go to the deeper layer."""
    cfg.validate()
    risks = {layer: layer_risk(episode, layer, ssp_cfg) for layer in cfg.candidates}
    best = max(cfg.candidates)
    for layer in sorted(cfg.candidates, reverse=True):
        if risks[layer] < risks[best]:
            best = layer
    return best, risks


def fusion_weights(pool: list[int], risks: dict[int, float], cfg: HlsConfig) -> np.ndarray:
    """Convex weights over a fusion pool from risk evidence and anchor locality.

    Softmax of -beta*r_l - |l - anchor|/tau; tau == 0 drops the locality term.
    """
    scores = np.array([-cfg.beta * risks[l] for l in pool], dtype=np.float64)
    if cfg.tau_fusion > 0:
        scores -= np.array([abs(l - cfg.anchor_layer) for l in pool], dtype=np.float64) / cfg.tau_fusion
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def default_pools(single: int, cfg: HlsConfig) -> list[list[int]]:
    """Fusion pools anchored at the stage-I winner, each containing the anchor."""
    raw = [
        [single, cfg.anchor_layer],
        [single - 1, single, cfg.anchor_layer],
        [single, single + 1, cfg.anchor_layer],
    ]
    pools: list[list[int]] = []
    for pool in raw:
        clipped = sorted({l for l in pool if l in cfg.candidates})
        if clipped and clipped not in pools:
            pools.append(clipped)
    return pools


def route(episode: Episode, cfg: HlsConfig, ssp_cfg: SspConfig) -> RoutingDecision:
    """Unified-risk routing over the single winner and its fusion candidates."""
    single, risks = select_single(episode, cfg, ssp_cfg)
    toks, masks = _support_views(episode)
    best = RoutingDecision(
        kind="single",
        layers=[single],
        weights=[1.0],
        etr=risks[single],
        per_layer_risk=risks,
    )
    pools = cfg.fusion_pools if cfg.fusion_pools is not None else default_pools(single, cfg)
    for pool in pools:
        w = fusion_weights(pool, risks, cfg)
        fused = [np.tensordot(w, t[pool], axes=1) for t in toks]
        etr = transfer_risk(fused, masks, ssp_cfg)
        if etr < best.etr:
            best = RoutingDecision(
                kind="fusion",
                layers=list(pool),
                weights=[float(x) for x in w],
                etr=etr,
                per_layer_risk=risks,
            )
    return best
