"""Pixelwise logit calibration: three residual branches behind a vote gate.

The base logit is corrected by a prototype-difference branch, a one-hop
propagation of the base probability over prior-calibrated attention, and a
shallow appearance branch. A leave-one-out vote over the supports decides
whether the correction is applied at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from skimage.color import rgb2lab

from .adapt import AdaptedHead, apply_head
from .attention_prior import PgrConfig, calibrate_attention, mean_attention
from .numerics import (
    Prototype,
    ZeroProtoError,
    binarize,
    binary_iou,
    cos_map,
    masked_avg_pool,
    sigmoid,
)
from .routing import RoutingDecision
from .self_support import SspConfig, SspPrediction, predict, support_prototypes
from .store import Episode, FeatureDump

_EPS_STD = 1e-6


@dataclass
class PacConfig:
    tau_sim: float = 1.0
    tau_attn: float = 1.0
    tau_img: float = 0.5
    w_sim: float = 0.3
    w_attn: float = 0.3
    w_img: float = 0.2
    gate_policy: str = "by_shot"  # "always_on" | "auto" | "off" | "by_shot"
    gate_votes: int = 2  # vote threshold T under the auto policy

    def validate(self) -> None:
        if min(self.w_sim, self.w_attn, self.w_img) < 0:
            raise ValueError("branch weights must be >= 0")
        if self.gate_policy not in ("always_on", "auto", "off", "by_shot"):
            raise ValueError(f"unknown gate policy {self.gate_policy!r}")
        if self.gate_policy == "auto" and self.gate_votes < 0:
            raise ValueError("vote threshold must be >= 0")


@dataclass
class LogitMaps:
    base: np.ndarray  # [N]
    sim: np.ndarray
    attn: np.ndarray
    img: np.ndarray
    final: np.ndarray | None = None


def l_sim(fq: np.ndarray, pfg: Prototype, pbg: Prototype, cfg: PacConfig) -> np.ndarray:
    """Support-prototype difference logit."""
    return cfg.tau_sim * (cos_map(fq, pfg) - cos_map(fq, pbg))


def l_attn(attn_mean: np.ndarray, base_logit: np.ndarray, cfg: PacConfig) -> np.ndarray:
    """One-hop propagation of the base probability over row-stochastic attention."""
    p0 = sigmoid(base_logit)
    return cfg.tau_attn * (attn_mean @ p0)


def appearance_embed(image_small: np.ndarray) -> np.ndarray:
    """Shallow per-cell appearance embedding [N, 5].

    Channels: Lab color plus 3x3 local mean/std of L, each standardized over
    the image. The local filters wrap at the grid border so whole-grid shifts
    move embeddings exactly. A constant image embeds as all zeros.
    """
    img = np.transpose(np.asarray(image_small, dtype=np.float64), (1, 2, 0))
    lab = rgb2lab(np.clip(img, 0.0, 1.0))
    lum = lab[..., 0]
    local_mean = uniform_filter(lum, size=3, mode="wrap")
    local_sq = uniform_filter(lum * lum, size=3, mode="wrap")
    local_std = np.sqrt(np.clip(local_sq - local_mean * local_mean, 0.0, None))
    chans = [lum, lab[..., 1], lab[..., 2], local_mean, local_std]
    out = np.stack(
        [(c - c.mean()) / (c.std() + _EPS_STD) for c in chans], axis=-1
    )
    return out.reshape(-1, len(chans))


def l_img(v: np.ndarray, u_fg: Prototype, u_bg: Prototype, cfg: PacConfig) -> np.ndarray:
    """Appearance-prototype difference logit; zero when prototypes carry no signal."""
    try:
        return cfg.tau_img * (cos_map(v, u_fg) - cos_map(v, u_bg))
    except ZeroProtoError:
        return np.zeros(v.shape[0])


def fuse(maps: LogitMaps, cfg: PacConfig, gate_on: bool) -> np.ndarray:
    """Weighted residual fusion; bit-identical to the base logit when gated off
    or when every weight is zero."""
    final = maps.base.copy()
    if gate_on:
        for w, branch in ((cfg.w_sim, maps.sim), (cfg.w_attn, maps.attn), (cfg.w_img, maps.img)):
            if w != 0.0:
                final = final + w * branch
    maps.final = final
    return final


def choose_attention_layer(decision: RoutingDecision, dump: FeatureDump) -> int:
    """Attention source for calibration: the heaviest routed layer that has
    exported logits, else the exported layer nearest the primary one."""
    avail = dump.meta.attn_layers
    if not avail:
        raise ValueError("dump exports no attention logits")
    for _, layer in sorted(
        zip(decision.weights, decision.layers), key=lambda t: (-t[0], -t[1])
    ):
        if layer in avail:
            return layer
    primary = decision.primary_layer()
    return min(avail, key=lambda l: (abs(l - primary), -l))


@dataclass
class CalibratedPrediction:
    prob: np.ndarray  # sigmoid of the fused logit
    mask: np.ndarray  # [Hg, Wg] binary
    maps: LogitMaps
    ssp: SspPrediction
    pac_applied: bool
    gate_votes: list[int] = field(default_factory=list)


def predict_calibrated(
    query: FeatureDump,
    proto_supports: list[FeatureDump],
    decision: RoutingDecision,
    head: AdaptedHead,
    ssp_cfg: SspConfig,
    pgr_cfg: PgrConfig,
    pac_cfg: PacConfig,
    use_pac: bool,
) -> CalibratedPrediction:
    """Predict one image from support prototypes, optionally with calibration.

    All features pass through the adapted head; the attention branch uses the
    query's own prior-calibrated attention at the routed layer.
    """
    fq = apply_head(head, decision.features(query))
    fs = [apply_head(head, decision.features(s)) for s in proto_supports]
    masks = [s.flat_mask() for s in proto_supports]
    ps_fg, ps_bg = support_prototypes(fs, masks)
    ssp = predict(fq, ps_fg, ps_bg, ssp_cfg)

    hg, wg = query.grid
    if use_pac:
        sim = l_sim(fq, ps_fg, ps_bg, pac_cfg)
        layer = choose_attention_layer(decision, query)
        qk, kk = query.attn_at(layer)
        attn = mean_attention(calibrate_attention(qk, kk, (hg, wg), pgr_cfg))
        attn_branch = l_attn(attn, ssp.base_logit, pac_cfg)
        v_q = appearance_embed(query.image_small)
        embeds = [appearance_embed(s.image_small) for s in proto_supports]
        stack = np.concatenate(embeds, axis=0)
        w = np.concatenate(masks)
        u_fg = masked_avg_pool(stack, w, kind="fg")
        u_bg = masked_avg_pool(stack, 1.0 - w, kind="bg")
        img_branch = l_img(v_q, u_fg, u_bg, pac_cfg)
    else:
        zero = np.zeros_like(ssp.base_logit)
        sim, attn_branch, img_branch = zero, zero.copy(), zero.copy()
    maps = LogitMaps(base=ssp.base_logit, sim=sim, attn=attn_branch, img=img_branch)
    final = fuse(maps, pac_cfg, gate_on=use_pac)
    prob = sigmoid(final)
    return CalibratedPrediction(
        prob=prob,
        mask=binarize(prob).reshape(hg, wg),
        maps=maps,
        ssp=ssp,
        pac_applied=use_pac,
    )


def refine_vote(
    episode: Episode,
    decision: RoutingDecision,
    head: AdaptedHead,
    ssp_cfg: SspConfig,
    pgr_cfg: PgrConfig,
    pac_cfg: PacConfig,
) -> tuple[bool, list[int]]:
    """Leave-one-out gain vote: enable calibration when at least T supports
    improve (strictly) with it. Ties count against."""
    votes = []
    k = episode.shot
    for i in range(k):
        others = [episode.supports[j] for j in range(k) if j != i]
        pseudo = episode.supports[i]
        gt = pseudo.mask
        plain = predict_calibrated(
            pseudo, others, decision, head, ssp_cfg, pgr_cfg, pac_cfg, use_pac=False
        )
        with_pac = predict_calibrated(
            pseudo, others, decision, head, ssp_cfg, pgr_cfg, pac_cfg, use_pac=True
        )
        delta = binary_iou(with_pac.mask, gt) - binary_iou(plain.mask, gt)
        votes.append(1 if delta > 0 else 0)
    return sum(votes) >= pac_cfg.gate_votes, votes


def gate_on(
    episode: Episode,
    decision: RoutingDecision,
    head: AdaptedHead,
    ssp_cfg: SspConfig,
    pgr_cfg: PgrConfig,
    pac_cfg: PacConfig,
) -> tuple[bool, list[int]]:
    """Resolve the gate policy to a concrete on/off decision plus votes."""
    pac_cfg.validate()
    if pac_cfg.gate_policy == "by_shot":
        raise ValueError("resolve 'by_shot' to a concrete policy before gating")
    if pac_cfg.gate_policy == "off":
        return False, []
    if pac_cfg.gate_policy == "always_on":
        return True, []
    return refine_vote(episode, decision, head, ssp_cfg, pgr_cfg, pac_cfg)
