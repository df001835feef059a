"""Self-support prototype predictor: the base head producing p_fg and the base logit.

Support prototypes are refined with confident regions of the image being
predicted (foreground by thresholded pooling, background by attention-style
aggregation), then fused with the support prototypes at fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    EmptyMaskError,
    Prototype,
    cos_map,
    fgbg_softmax,
    masked_avg_pool,
    row_softmax,
)


@dataclass
class SspConfig:
    tau_f: float = 0.7  # confident-foreground threshold
    tau_b: float = 0.6  # confident-background threshold
    alpha1: float = 0.5  # support prototype fusion weight
    alpha2: float = 0.5  # self-support prototype fusion weight
    kappa: float = 10.0  # cosine-to-logit scale

    def validate(self) -> None:
        if not (0.0 < self.tau_f < 1.0 and 0.0 < self.tau_b < 1.0):
            raise ValueError("thresholds must lie in (0,1)")
        if abs(self.alpha1 + self.alpha2 - 1.0) > 1e-9:
            raise ValueError("fusion weights must sum to 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


@dataclass
class SspPrediction:
    prob: np.ndarray  # [N] foreground probability
    base_logit: np.ndarray  # [N], sigmoid(base_logit) == prob up to rounding
    proto_fg: Prototype  # fused foreground prototype
    proto_bg: Prototype  # fused background prototype
    fg_fallback: bool = False
    bg_fallback: bool = False


def support_prototypes(
    feats: list[np.ndarray], masks: list[np.ndarray]
) -> tuple[Prototype, Prototype]:
    """Pooled fg/bg prototypes over one or more support feature maps.

    ``feats[i]`` is [N, D]; ``masks[i]`` is [N] with weights in [0, 1].
    All positions across supports contribute jointly.
    """
    stack = np.concatenate([np.asarray(f, dtype=np.float64) for f in feats], axis=0)
    w = np.concatenate([np.asarray(m, dtype=np.float64) for m in masks], axis=0)
    return (
        masked_avg_pool(stack, w, kind="fg"),
        masked_avg_pool(stack, 1.0 - w, kind="bg"),
    )


def coarse_match(fq: np.ndarray, ps_fg: Prototype, ps_bg: Prototype, cfg: SspConfig) -> np.ndarray:
    """Foreground probability from cosine matching against a prototype pair."""
    return fgbg_softmax(cos_map(fq, ps_fg), cos_map(fq, ps_bg), cfg.kappa)


def self_support_fg(
    fq: np.ndarray, coarse: np.ndarray, support_fg: Prototype, cfg: SspConfig
) -> tuple[Prototype, bool]:
    """Prototype from confidently-foreground positions; support fallback when empty."""
    sel = (coarse > cfg.tau_f).astype(np.float64)
    if sel.sum() == 0:
        return Prototype(vec=support_fg.vec.copy(), kind="fg"), True
    return masked_avg_pool(fq, sel, kind="fg"), False


def self_support_bg(fq: np.ndarray, coarse: np.ndarray, cfg: SspConfig) -> np.ndarray:
    """Per-position background prototype field [N, D].

    Confidently-background rows attend over all positions with cosine
    affinity (unit-normalized rows keep the head scale invariant); each
    position's prototype is its attention-weighted sum of those rows.
    Raises EmptyMaskError when no position passes the threshold.
    """
    fq = np.asarray(fq, dtype=np.float64)
    keep = (1.0 - coarse) > cfg.tau_b
    if not keep.any():
        raise EmptyMaskError("no confident background positions")
    sel = fq[keep]  # [t, D]
    norms = np.linalg.norm(fq, axis=1, keepdims=True)
    unit = fq / np.where(norms > 0.0, norms, 1.0)
    affinity = unit[keep] @ unit.T  # [t, N] cosine affinities
    weights = row_softmax(affinity.T).T  # softmax over the t selected rows, per column
    return weights.T @ sel  # [N, D]


def predict(
    fq: np.ndarray,
    ps_fg: Prototype,
    ps_bg: Prototype,
    cfg: SspConfig,
) -> SspPrediction:
    """Full self-support prediction for one feature map against support prototypes."""
    coarse = coarse_match(fq, ps_fg, ps_bg, cfg)
    q_fg, fg_fallback = self_support_fg(fq, coarse, ps_fg, cfg)
    bg_fallback = False
    try:
        q_bg_vec = self_support_bg(fq, coarse, cfg).mean(axis=0)
    except EmptyMaskError:
        q_bg_vec = ps_bg.vec.copy()
        bg_fallback = True
    fused_fg = Prototype(cfg.alpha1 * ps_fg.vec + cfg.alpha2 * q_fg.vec, kind="fg")
    fused_bg = Prototype(cfg.alpha1 * ps_bg.vec + cfg.alpha2 * q_bg_vec, kind="bg")
    s_fg = cos_map(fq, fused_fg)
    s_bg = cos_map(fq, fused_bg)
    prob = fgbg_softmax(s_fg, s_bg, cfg.kappa)
    base_logit = cfg.kappa * (s_fg - s_bg)
    return SspPrediction(
        prob=prob,
        base_logit=base_logit,
        proto_fg=fused_fg,
        proto_bg=fused_bg,
        fg_fallback=fg_fallback,
        bg_fallback=bg_fallback,
    )
