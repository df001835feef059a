"""Baseline per-episode layer selectors for ablation parity.

Three label-free heuristics score candidate layers: a static blend of
semantic/structure/complexity cues, and two gradient proxies ranking layers
by loss sensitivity. All scores are range-normalized within the episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import cos_map, masked_avg_pool, sigmoid
from .self_support import SspConfig, predict, support_prototypes
from .store import Episode

_CLAMP = 1e-7


@dataclass
class StaticMaxConfig:
    alpha_sem: float = 0.5  # fg/bg balance inside the semantic score
    w_sem: float = 1.0 / 3.0
    w_str: float = 1.0 / 3.0
    w_cpx: float = 1.0 / 3.0
    eps_norm: float = 1e-8

    def validate(self) -> None:
        if not 0.0 <= self.alpha_sem <= 1.0:
            raise ValueError("alpha_sem must lie in [0,1]")
        w = (self.w_sem, self.w_str, self.w_cpx)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be >= 0 and sum to 1")


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def query_prototypes(feats: np.ndarray, p0: np.ndarray):
    """Soft query prototypes weighted by the baseline probability."""
    return (
        masked_avg_pool(feats, p0, kind="fg"),
        masked_avg_pool(feats, 1.0 - p0, kind="bg"),
    )


def s_sem(p_fg, p_bg, q_fg, q_bg, alpha: float) -> float:
    """Support/query prototype agreement."""
    return alpha * _cos(p_fg.vec, q_fg.vec) + (1.0 - alpha) * _cos(p_bg.vec, q_bg.vec)


def s_str(p_fg, p_bg, q_fg, q_bg) -> float:
    """Foreground/background separation in both prototype spaces."""
    return 1.0 - 0.5 * (_cos(q_fg.vec, q_bg.vec) + _cos(p_fg.vec, p_bg.vec))


def complexity(feats: np.ndarray, p0: np.ndarray, q_fg) -> float:
    """Weighted feature variance around the query prototype plus mask entropy."""
    w = p0 / max(p0.sum(), _CLAMP)
    var = float((w[:, None] * (feats - q_fg.vec) ** 2).sum(axis=0).mean())
    p = np.clip(p0, _CLAMP, 1.0 - _CLAMP)
    ent = float(-(p * np.log(p) + (1.0 - p) * np.log(1.0 - p)).mean())
    return var + ent


def range_normalize(scores: dict[int, float], eps: float = 1e-8) -> dict[int, float]:
    vals = np.array(list(scores.values()))
    lo, hi = vals.min(), vals.max()
    return {k: float((v - lo) / (hi - lo + eps)) for k, v in scores.items()}


def _layer_state(episode: Episode, layer: int, ssp_cfg: SspConfig):
    feats_s = [s.tokens[layer].astype(np.float64) for s in episode.supports]
    masks = [s.flat_mask() for s in episode.supports]
    p_fg, p_bg = support_prototypes(feats_s, masks)
    fq = episode.query.tokens[layer].astype(np.float64)
    p0 = predict(fq, p_fg, p_bg, ssp_cfg).prob
    return fq, p_fg, p_bg, p0


def static_max(
    episode: Episode,
    candidates: list[int],
    cfg: StaticMaxConfig,
    ssp_cfg: SspConfig,
) -> int:
    """Argmax of the normalized weighted blend; ties go to the deeper layer."""
    cfg.validate()
    sem, sep, cpx = {}, {}, {}
    for layer in candidates:
        fq, p_fg, p_bg, p0 = _layer_state(episode, layer, ssp_cfg)
        q_fg, q_bg = query_prototypes(fq, p0)
        sem[layer] = s_sem(p_fg, p_bg, q_fg, q_bg, cfg.alpha_sem)
        sep[layer] = s_str(p_fg, p_bg, q_fg, q_bg)
        cpx[layer] = complexity(fq, p0, q_fg)
    sem = range_normalize(sem, cfg.eps_norm)
    sep = range_normalize(sep, cfg.eps_norm)
    cpx = range_normalize(cpx, cfg.eps_norm)
    total = {
        l: cfg.w_sem * sem[l] + cfg.w_str * sep[l] + cfg.w_cpx * cpx[l] for l in candidates
    }
    best = candidates[0]
    for layer in sorted(candidates):
        if total[layer] >= total[best]:
            best = layer
    return best


def feature_gradient(
    fq: np.ndarray, p_fg, p_bg, kappa: float
) -> np.ndarray:
    """Analytic gradient of the self-consistent BCE w.r.t. query features.

    The target is the binarized own prediction of the frozen cosine head;
    prototypes are held fixed.
    """
    nq = np.linalg.norm(fq, axis=1)
    inv_nq = np.where(nq > 0, 1.0 / np.where(nq > 0, nq, 1.0), 0.0)
    npf, npb = np.linalg.norm(p_fg.vec), np.linalg.norm(p_bg.vec)
    cf = (fq @ p_fg.vec) * inv_nq / npf
    cb = (fq @ p_bg.vec) * inv_nq / npb
    z = kappa * (cf - cb)
    p = sigmoid(z)
    y = (p >= 0.5).astype(np.float64)
    dz = (p - y) / fq.shape[0]
    dcf = kappa * dz
    dcb = -kappa * dz
    grad = (dcf * inv_nq)[:, None] * (p_fg.vec[None, :] / npf) - (dcf * cf * inv_nq**2)[:, None] * fq
    grad += (dcb * inv_nq)[:, None] * (p_bg.vec[None, :] / npb) - (dcb * cb * inv_nq**2)[:, None] * fq
    return grad


def grad_norms(episode: Episode, candidates: list[int], ssp_cfg: SspConfig) -> dict[int, float]:
    """L2 norm of the query-feature gradient per candidate layer."""
    out = {}
    for layer in candidates:
        feats_s = [s.tokens[layer].astype(np.float64) for s in episode.supports]
        masks = [s.flat_mask() for s in episode.supports]
        p_fg, p_bg = support_prototypes(feats_s, masks)
        fq = episode.query.tokens[layer].astype(np.float64)
        out[layer] = float(np.linalg.norm(feature_gradient(fq, p_fg, p_bg, ssp_cfg.kappa)))
    return out


def grad_max(episode: Episode, candidates: list[int], ssp_cfg: SspConfig) -> int:
    norms = grad_norms(episode, candidates, ssp_cfg)
    best = candidates[0]
    for layer in sorted(candidates):
        if norms[layer] >= norms[best]:
            best = layer
    return best


def grad_delta_max(episode: Episode, candidates: list[int], ssp_cfg: SspConfig) -> int:
    """Largest jump in gradient norm between consecutive candidates.

    The first candidate has no predecessor and cannot be selected.
    """
    if len(candidates) < 2:
        raise ValueError("need at least two candidate layers")
    ordered = sorted(candidates)
    norms = grad_norms(episode, ordered, ssp_cfg)
    deltas = {l: abs(norms[l] - norms[prev]) for prev, l in zip(ordered, ordered[1:])}
    best = ordered[1]
    for layer in ordered[1:]:
        if deltas[layer] >= deltas[best]:
            best = layer
    return best
