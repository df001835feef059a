"""Entropy-gated Gaussian priors injected into attention logits, per head.

Each head gets its own bandwidth: heads whose query-key rows are more
dispersed than their key-key rows are treated as local/confident and get a
sharp prior, globally dispersed heads get a diffuse one. The prior enters
additively in the log domain, so an infinite bandwidth recovers the raw
attention exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import row_entropy_mean, row_softmax, sigmoid


class NonFiniteLogitsError(ValueError):
    pass


@dataclass
class PgrConfig:
    sigma_loc: float = 2.0  # patch units
    sigma_glo: float = 8.0
    alpha_gate: float = 1.0
    enabled: bool = True

    def validate(self) -> None:
        if not (0.0 < self.sigma_loc < self.sigma_glo):
            raise ValueError("need 0 < sigma_loc < sigma_glo")
        if self.alpha_gate <= 0:
            raise ValueError("gate temperature must be positive")


def grid_sq_distances(hg: int, wg: int) -> np.ndarray:
    """Pairwise squared Euclidean distances [N, N] between grid cells."""
    rr, cc = np.meshgrid(np.arange(hg), np.arange(wg), indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    return (diff**2).sum(axis=-1)


def gaussian_prior(grid: tuple[int, int], center: int, sigma: float) -> np.ndarray:
    """exp(-||p_j - p_center||^2 / (2 sigma^2)) over all grid cells."""
    hg, wg = grid
    rr, cc = np.meshgrid(np.arange(hg), np.arange(wg), indexing="ij")
    cr, ccol = divmod(center, wg)
    d2 = (rr - cr) ** 2 + (cc - ccol) ** 2
    return np.exp(-d2.ravel() / (2.0 * sigma * sigma))


def head_gate(qk: np.ndarray, kk: np.ndarray, cfg: PgrConfig) -> tuple[float, float]:
    """Gate value and bandwidth for one head from its entropy difference."""
    h_q = row_entropy_mean(qk)
    h_k = row_entropy_mean(kk)
    gamma = float(sigmoid(np.asarray(cfg.alpha_gate * (h_q - h_k))))
    sigma_h = (1.0 - gamma) * cfg.sigma_glo + gamma * cfg.sigma_loc
    return gamma, sigma_h


def calibrate_attention(
    qk_logits: np.ndarray,
    kk_logits: np.ndarray,
    grid: tuple[int, int],
    cfg: PgrConfig,
) -> np.ndarray:
    """Row-stochastic attention [H, N, N] with per-head query-centered priors.

    With the module disabled this is exactly the row softmax of the raw
    query-key logits.
    """
    qk = np.asarray(qk_logits, dtype=np.float64)
    kk = np.asarray(kk_logits, dtype=np.float64)
    if not (np.isfinite(qk).all() and np.isfinite(kk).all()):
        raise NonFiniteLogitsError("attention logits contain NaN/Inf")
    if not cfg.enabled:
        return row_softmax(qk)
    cfg.validate()
    d2 = grid_sq_distances(*grid)
    out = np.empty_like(qk)
    for h in range(qk.shape[0]):
        _, sigma_h = head_gate(qk[h], kk[h], cfg)
        out[h] = row_softmax(qk[h] - d2 / (2.0 * sigma_h * sigma_h))
    return out


def mean_attention(attn: np.ndarray) -> np.ndarray:
    """Head-averaged attention, re-normalized to row-stochastic [N, N]."""
    mean = np.asarray(attn, dtype=np.float64).mean(axis=0)
    return mean / mean.sum(axis=1, keepdims=True)
