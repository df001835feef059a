"""Synthetic segmentation corpus: textured shapes on gradient backgrounds.

Stands in for a real per-class episodic dataset when exercising the
extraction-plus-engine path end to end: each class fixes a shape family and
color, each image varies placement, scale, and noise, and masks are exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw


@dataclass
class ImageSetSpec:
    classes: int = 20
    shot: int = 5
    size: int = 224
    seed: int = 0

_SHAPES = ("ellipse", "rectangle", "triangle", "cross")


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    c0 = rng.uniform(40, 110, size=3)
    c1 = rng.uniform(40, 110, size=3)
    ramp = np.linspace(0.0, 1.0, size)
    axis = rng.integers(0, 2)
    grad = ramp[:, None] if axis == 0 else ramp[None, :]
    img = c0[None, None, :] + grad[..., None] * (c1 - c0)[None, None, :]
    img = img + rng.normal(0.0, 6.0, size=(size, size, 3))
    return img


def _draw_shape(size, shape, cx, cy, r, rng) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if shape == "ellipse":
        rx, ry = r, r * rng.uniform(0.6, 1.4)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif shape == "rectangle":
        rx, ry = r, r * rng.uniform(0.5, 1.2)
        draw.rectangle([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif shape == "triangle":
        pts = [(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)]
        draw.polygon(pts, fill=255)
    else:  # cross
        w = max(2, int(r * 0.4))
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=255)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=255)
    return np.asarray(canvas) > 0


def _render(size, shape, color, distractor_color, rng) -> tuple[np.ndarray, np.ndarray]:
    img = _background(size, rng)
    # distractor shapes share the palette family but are not foreground
    for _ in range(int(rng.integers(1, 3))):
        ds = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
        dr = rng.uniform(0.08, 0.16) * size
        dx = rng.uniform(0.15 * size, 0.85 * size)
        dy = rng.uniform(0.15 * size, 0.85 * size)
        dmask = _draw_shape(size, ds, dx, dy, dr, rng)
        tex = distractor_color[None, None, :] + rng.normal(0.0, 12.0, size=(size, size, 3))
        img[dmask] = tex[dmask]
    r = rng.uniform(0.16, 0.28) * size
    cx = rng.uniform(0.3 * size, 0.7 * size)
    cy = rng.uniform(0.3 * size, 0.7 * size)
    mask = _draw_shape(size, shape, cx, cy, r, rng)
    jitter = color + rng.normal(0.0, 8.0, size=3)
    textured = jitter[None, None, :] + rng.normal(0.0, 14.0, size=(size, size, 3))
    img[mask] = textured[mask]
    return np.clip(img, 0, 255).astype(np.uint8), mask


def make_dataset(out_dir, spec: ImageSetSpec) -> str:
    """Write images, masks, and a dataset manifest; returns the manifest path."""
    rng = np.random.default_rng(spec.seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    episodes = []
    for c in range(spec.classes):
        shape = _SHAPES[c % len(_SHAPES)]
        color = rng.uniform(90, 200, size=3)
        distractor = np.clip(color + rng.choice([-1, 1], size=3) * rng.uniform(30, 70, size=3), 60, 235)
        items = []
        for j in range(spec.shot + 1):
            img, mask = _render(spec.size, shape, color, distractor, rng)
            img_path = os.path.join(img_dir, f"cls{c:03d}_img{j}.png")
            mask_path = os.path.join(img_dir, f"cls{c:03d}_img{j}_mask.png")
            Image.fromarray(img).save(img_path)
            Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
            items.append({"image": os.path.relpath(img_path, out_dir),
                          "mask": os.path.relpath(mask_path, out_dir)})
        episodes.append(
            {"class_id": f"class-{c:03d}", "supports": items[:-1], "query": items[-1]}
        )
    manifest_path = os.path.join(out_dir, "dataset.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"episodes": episodes}, fh, indent=2)
        fh.write("\n")
    return manifest_path
