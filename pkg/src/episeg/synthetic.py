"""Synthetic episode test-bed with a planted informative layer.

One layer carries class structure (fg/bg token clusters a chosen margin
apart); every other layer is pure noise. Attention logits are synthesized
with per-head locality, images are two-tone renderings of the mask, and an
optional corruption knob blurs class identity in a band around the mask
boundary while the image stays faithful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .attention_prior import grid_sq_distances
from .store import DumpMeta, Episode, FeatureDump


@dataclass
class SyntheticSpec:
    hg: int = 14
    wg: int = 14
    d: int = 32
    layers: int = 24
    planted_layer: int = 17
    margin: float = 4.0
    noise: float = 1.0
    episodes: int = 20
    heads: int = 2
    attn_layers: list[int] | None = None  # None -> [planted_layer, layers-1]
    attn_sigmas: tuple[float, float] = (1.5, 6.0)  # per-head locality, cycled
    attn_gain: float = 1.0
    attn_noise: float = 0.3
    boundary_corruption: float = 0.0  # fraction of boundary-band cells degraded
    color_contrast: float = 0.5
    image_noise: float = 0.03

    def validate(self) -> None:
        if not (0 <= self.planted_layer < self.layers):
            raise ValueError("planted layer outside the stack")
        if self.margin < 0 or self.noise < 0:
            raise ValueError("margin and noise must be >= 0")
        if self.episodes < 0:
            raise ValueError("episode count must be >= 0")

    def resolved_attn_layers(self) -> list[int]:
        if self.attn_layers is not None:
            return sorted(set(self.attn_layers))
        return sorted({self.planted_layer, self.layers - 1})


def _blob_mask(hg: int, wg: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:hg, 0:wg]
    for _ in range(64):
        cy = rng.uniform(0.25 * hg, 0.75 * hg)
        cx = rng.uniform(0.25 * wg, 0.75 * wg)
        ry = rng.uniform(0.15 * hg, 0.38 * hg)
        rx = rng.uniform(0.15 * wg, 0.38 * wg)
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
        if 0 < mask.sum() < hg * wg:
            return mask.astype(np.uint8)
    mask = np.zeros((hg, wg), dtype=np.uint8)
    mask[hg // 2, wg // 2] = 1
    return mask


def _boundary_band(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    return binary_dilation(m) & ~binary_erosion(m)


def _attention(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.hg * spec.wg
    d2 = grid_sq_distances(spec.hg, spec.wg)
    la = len(spec.resolved_attn_layers())
    qk = np.empty((la, spec.heads, n, n), dtype=np.float32)
    kk = np.empty_like(qk)
    for li in range(la):
        for h in range(spec.heads):
            sigma = spec.attn_sigmas[h % len(spec.attn_sigmas)]
            qk[li, h] = (
                -spec.attn_gain * d2 / (2.0 * sigma * sigma)
                + spec.attn_noise * rng.normal(size=(n, n))
            ).astype(np.float32)
            kk[li, h] = (
                -spec.attn_gain * d2 / (2.0 * (0.5 * sigma) ** 2)
                + spec.attn_noise * rng.normal(size=(n, n))
            ).astype(np.float32)
    return qk, kk


def _image(spec, mask, fg_color, bg_color, rng) -> np.ndarray:
    img = np.where(mask.astype(bool)[None, :, :], fg_color[:, None, None], bg_color[:, None, None])
    img = img + spec.image_noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _dump(spec, mask, mu_fg, mu_bg, fg_color, bg_color, rng, with_mask=True) -> FeatureDump:
    hg, wg, n = spec.hg, spec.wg, spec.hg * spec.wg
    flat = mask.reshape(-1).astype(bool)
    tokens = rng.normal(size=(spec.layers, n, spec.d))
    planted = np.where(flat[:, None], mu_fg[None, :], mu_bg[None, :])
    planted = planted + spec.noise * rng.normal(size=(n, spec.d))
    if spec.boundary_corruption > 0:
        band = _boundary_band(mask).reshape(-1)
        hit = band & (rng.random(n) < spec.boundary_corruption)
        mid = 0.5 * (mu_fg + mu_bg)
        planted[hit] = mid[None, :] + 2.0 * spec.noise * rng.normal(size=(hit.sum(), spec.d))
    tokens[spec.planted_layer] = planted
    qk, kk = _attention(spec, rng)
    return FeatureDump(
        tokens=tokens.astype(np.float32),
        qk_logits=qk,
        kk_logits=kk,
        image_small=_image(spec, mask, fg_color, bg_color, rng),
        mask=mask if with_mask else None,
        meta=DumpMeta(
            hg=hg,
            wg=wg,
            patch_size=16,
            backbone="synthetic",
            attn_layers=spec.resolved_attn_layers(),
        ),
    )


def gen_episode(spec: SyntheticSpec, shot: int, rng: np.random.Generator, class_id="") -> Episode:
    """One K-shot episode; the query keeps its ground-truth mask for scoring."""
    mu_bg = rng.normal(size=spec.d)
    direction = rng.normal(size=spec.d)
    direction /= np.linalg.norm(direction)
    mu_fg = mu_bg + spec.margin * direction
    base = rng.uniform(0.15, 0.45, size=3)
    shiftdir = rng.normal(size=3)
    shiftdir /= max(np.linalg.norm(shiftdir), 1e-9)
    fg_color = np.clip(base + spec.color_contrast * np.abs(shiftdir), 0.0, 1.0)
    supports = [
        _dump(spec, _blob_mask(spec.hg, spec.wg, rng), mu_fg, mu_bg, fg_color, base, rng)
        for _ in range(shot)
    ]
    query = _dump(spec, _blob_mask(spec.hg, spec.wg, rng), mu_fg, mu_bg, fg_color, base, rng)
    episode = Episode(supports=supports, query=query, class_id=class_id)
    episode.validate()
    return episode


def gen_synthetic(spec: SyntheticSpec, shot: int, seed: int) -> list[Episode]:
    """Deterministic batch of episodes; episode i is reproducible in isolation."""
    spec.validate()
    return [
        gen_episode(spec, shot, np.random.default_rng([seed, i]), class_id=f"synthetic-{i:04d}")
        for i in range(spec.episodes)
    ]
