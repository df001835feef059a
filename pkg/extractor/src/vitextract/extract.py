"""Image -> HFD1 feature dump extraction and episode batching."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .backbones import IMAGENET_MEAN, IMAGENET_STD, HookedViT, backbone_info, load_backbone
from .hfd import read_meta, write_atomic


class MaskSizeError(ValueError):
    pass


@dataclass
class ExtractSpec:
    backbone: str = "vit-b16-random"
    resolution: int = 400
    token_layers: list[int] | None = None  # None -> every block
    attn_layers: list[int] | None = None  # None -> last block only
    out_dir: str = "dumps"
    seed: int = 0  # init seed for the -random backbones

    def resolved_layers(self, num_layers: int) -> tuple[list[int], list[int]]:
        tokens = sorted(self.token_layers) if self.token_layers else list(range(num_layers))
        attn = sorted(self.attn_layers) if self.attn_layers else [num_layers - 1]
        for layer in tokens + attn:
            if not 0 <= layer < num_layers:
                raise ValueError(f"layer {layer} outside [0,{num_layers})")
        missing = [a for a in attn if a not in tokens]
        if missing:
            raise ValueError(f"attention layers {missing} not in the exported token set")
        return tokens, attn

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "backbone": self.backbone,
                "resolution": self.resolution,
                "token_layers": self.token_layers,
                "attn_layers": self.attn_layers,
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_image(path, resolution: int) -> tuple[torch.Tensor, np.ndarray, bytes]:
    raw = open(path, "rb").read()
    img = Image.open(path).convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0  # [R, R, 3]
    tensor = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    return (tensor - mean) / std, arr, raw


def _load_mask(path, image_path, resolution: int) -> tuple[np.ndarray, bytes]:
    raw = open(path, "rb").read()
    mask_img = Image.open(path).convert("L")
    with Image.open(image_path) as ref:
        if mask_img.size != ref.size:
            raise MaskSizeError(
                f"mask {path} size {mask_img.size} != image size {ref.size}"
            )
    mask_img = mask_img.resize((resolution, resolution), Image.NEAREST)
    return (np.asarray(mask_img) > 127).astype(np.float32), raw


def _area_pool(arr: np.ndarray, grid: int) -> np.ndarray:
    """Exact box average from [..., R, R] down to [..., grid, grid]."""
    r = arr.shape[-1]
    factor = r // grid
    shaped = arr.reshape(*arr.shape[:-2], grid, factor, grid, factor)
    return shaped.mean(axis=(-3, -1))


def source_hash(image_bytes: bytes, mask_bytes: bytes | None, spec: ExtractSpec) -> str:
    h = hashlib.sha256()
    h.update(spec.fingerprint().encode())
    h.update(image_bytes)
    if mask_bytes is not None:
        h.update(mask_bytes)
    return h.hexdigest()


def extract(
    image_path,
    mask_path,
    spec: ExtractSpec,
    out_path,
    backbone: HookedViT | None = None,
) -> str:
    """Run the frozen backbone over one image and write its HFD1 dump.

    Re-extraction is skipped (without touching the model) when the target
    file already records the same source hash. Returns the output path.
    """
    info = backbone.info if backbone is not None else backbone_info(spec.backbone)
    if spec.resolution % info.patch_size != 0:
        raise ValueError(
            f"resolution {spec.resolution} not divisible by patch size {info.patch_size}"
        )
    grid = spec.resolution // info.patch_size
    tokens_idx, attn_idx = spec.resolved_layers(info.num_layers)

    image, rgb, image_bytes = _load_image(image_path, spec.resolution)
    mask_bytes = None
    mask_grid = None
    if mask_path is not None:
        mask_full, mask_bytes = _load_mask(mask_path, image_path, spec.resolution)
        mask_grid = (_area_pool(mask_full, grid) >= 0.5).astype(np.uint8)

    digest = source_hash(image_bytes, mask_bytes, spec)
    if os.path.exists(out_path):
        try:
            meta = read_meta(out_path)
            if meta.get("extra", {}).get("source_sha256") == digest:
                return str(out_path)
        except Exception:
            pass  # unreadable leftovers get overwritten

    model = backbone or load_backbone(spec.backbone, spec.resolution, spec.seed)
    tokens, qk, kk = model.forward(image, tokens_idx, attn_idx)
    image_small = _area_pool(np.transpose(rgb, (2, 0, 1)), grid).astype(np.float32)

    # attention indices are positions within the exported token stack
    attn_positions = [tokens_idx.index(a) for a in attn_idx]
    tensors = {
        "tokens": tokens.astype(np.float32),
        "qk_logits": qk.astype(np.float32),
        "kk_logits": kk.astype(np.float32),
        "image_small": np.clip(image_small, 0.0, 1.0),
    }
    if mask_grid is not None:
        tensors["mask"] = mask_grid
    meta = {
        "hg": grid,
        "wg": grid,
        "patch_size": model.info.patch_size,
        "backbone": spec.backbone,
        "attn_layers": attn_positions,
        "extra": {
            "resolution": spec.resolution,
            "token_layers": tokens_idx,
            "attn_block_ids": attn_idx,
            "source_sha256": digest,
            "normalization": "imagenet",
        },
    }
    write_atomic(out_path, tensors, meta)
    return str(out_path)


@dataclass
class EpisodeEntry:
    class_id: str
    supports: list[dict]  # {"image": path, "mask": path}
    query: dict  # {"image": path, "mask": optional path}


def load_dataset_manifest(path) -> list[EpisodeEntry]:
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    episodes = []
    for entry in spec["episodes"]:
        episodes.append(
            EpisodeEntry(
                class_id=str(entry.get("class_id", "")),
                supports=list(entry["supports"]),
                query=dict(entry["query"]),
            )
        )
    return episodes


def extract_episode_set(dataset_manifest, spec: ExtractSpec) -> list[str]:
    """Extract every episode in a dataset manifest; one manifest JSON each.

    Dump files are shared between episodes via content addressing, and
    manifests reference them by relative path only.
    """
    entries = load_dataset_manifest(dataset_manifest)
    os.makedirs(spec.out_dir, exist_ok=True)
    model = load_backbone(spec.backbone, spec.resolution, spec.seed)
    manifest_dir = os.path.dirname(os.path.abspath(dataset_manifest))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(manifest_dir, p)

    def dump_for(item) -> str:
        image = resolve(item["image"])
        mask = resolve(item["mask"]) if item.get("mask") else None
        stem = os.path.splitext(os.path.basename(image))[0]
        digest = source_hash(
            open(image, "rb").read(),
            open(mask, "rb").read() if mask else None,
            spec,
        )[:12]
        out = os.path.join(spec.out_dir, f"{stem}-{digest}.hfd")
        extract(image, mask, spec, out, backbone=model)
        return os.path.basename(out)

    written = []
    for i, entry in enumerate(entries):
        if not entry.supports:
            raise ValueError(f"episode {i} has no supports")
        for item in entry.supports:
            if not item.get("mask"):
                raise ValueError(f"episode {i}: every support needs a mask")
        manifest = {
            "supports": [dump_for(item) for item in entry.supports],
            "query": dump_for(entry.query),
            "class_id": entry.class_id,
        }
        path = os.path.join(spec.out_dir, f"episode_{i:04d}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    return written
