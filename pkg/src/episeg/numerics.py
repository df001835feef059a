"""Shared dense primitives: pooling, cosine maps, softmax, entropy, IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyMaskError(ValueError):
    """Raised when a pooling mask selects nothing; caller decides the fallback."""


class ZeroProtoError(ValueError):
    """Raised when a prototype has zero norm."""


@dataclass
class Prototype:
    vec: np.ndarray  # [D]
    kind: str = "fg"  # "fg" | "bg"


def masked_avg_pool(feat: np.ndarray, weights: np.ndarray, kind: str = "fg") -> Prototype:
    """Weighted mean of feature rows: sum_i w_i f_i / sum_i w_i."""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0.0:
        raise EmptyMaskError("mask weights sum to zero")
    vec = (w[:, None] * np.asarray(feat, dtype=np.float64)).sum(axis=0) / total
    return Prototype(vec=vec, kind=kind)


def cos_map(feat: np.ndarray, proto: Prototype) -> np.ndarray:
    """Cosine similarity of each feature row to the prototype; zero rows map to 0."""
    vec = np.asarray(proto.vec, dtype=np.float64)
    pn = np.linalg.norm(vec)
    if pn == 0.0:
        raise ZeroProtoError("prototype has zero norm")
    f = np.asarray(feat, dtype=np.float64)
    fn = np.linalg.norm(f, axis=1)
    out = np.zeros(f.shape[0], dtype=np.float64)
    nz = fn > 0.0
    out[nz] = (f[nz] @ vec) / (fn[nz] * pn)
    return np.clip(out, -1.0, 1.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fgbg_softmax(s_fg: np.ndarray, s_bg: np.ndarray, kappa: float) -> np.ndarray:
    """Two-way softmax over fg/bg scores, scaled by kappa; returns p_fg.

    p_bg is the exact complement 1 - p_fg.
    """
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    a = kappa * np.asarray(s_fg, dtype=np.float64)
    b = kappa * np.asarray(s_bg, dtype=np.float64)
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    return ea / (ea + eb)


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground IoU of two binary masks; both empty counts as perfect (1.0)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    # dst cell i spans [i*src/dst, (i+1)*src/dst) in source units
    w = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            w[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return w / scale


def resample_mask(mask: np.ndarray, to: tuple[int, int]) -> np.ndarray:
    """Exact area-averaged resampling of a mask to a target grid.

    Output is soft (fractional coverage in [0,1]); binarization is a
    separate explicit step, see :func:`binarize`.
    """
    mask = np.asarray(mask, dtype=np.float64)
    hg, wg = to
    if hg <= 0 or wg <= 0:
        raise ValueError("target grid must be positive")
    wr = _overlap_weights(mask.shape[0], hg)
    wc = _overlap_weights(mask.shape[1], wg)
    return np.clip(wr @ mask @ wc.T, 0.0, 1.0)


def binarize(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(soft) >= threshold).astype(np.uint8)


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def row_entropy_mean(logits: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the row-softmax distributions."""
    p = row_softmax(logits)
    logp = np.log(np.clip(p, 1e-300, None))
    return float(-(p * logp).sum(axis=-1).mean())


def bce(p: np.ndarray, target: np.ndarray, clamp: float = 1e-7) -> float:
    """Mean binary cross-entropy with probability clamping; soft targets allowed."""
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(target, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())
