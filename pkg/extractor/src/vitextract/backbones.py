"""Frozen ViT backbones with hooks exporting tokens and attention logits.

The registry covers torchvision ViTs (optionally with pretrained weights) and
hub-loaded self-supervised/contrastive ViTs. Weight downloads are attempted
lazily; offline environments can always fall back to the ``-random`` variants,
which build the genuine architecture with a fixed-seed initialization so
extraction stays deterministic end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torchvision.models.vision_transformer import VisionTransformer

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class UnknownBackboneError(ValueError):
    pass


class WeightsUnavailableError(RuntimeError):
    pass


@dataclass
class BackboneInfo:
    name: str
    patch_size: int
    num_layers: int
    num_heads: int
    hidden_dim: int
    mlp_dim: int
    pretrained: bool = False


_VIT_CONFIGS = {
    "vit-b16": BackboneInfo("vit-b16", 16, 12, 12, 768, 3072),
    "vit-l16": BackboneInfo("vit-l16", 16, 24, 16, 1024, 4096),
}


def available_backbones() -> list[str]:
    names = []
    for key in _VIT_CONFIGS:
        names.extend([f"{key}-random", f"{key}-in1k"])
    return sorted(names)


def _build_vit(info: BackboneInfo, resolution: int, seed: int) -> VisionTransformer:
    torch.manual_seed(seed)
    return VisionTransformer(
        image_size=resolution,
        patch_size=info.patch_size,
        num_layers=info.num_layers,
        num_heads=info.num_heads,
        hidden_dim=info.hidden_dim,
        mlp_dim=info.mlp_dim,
    )


def _load_pretrained_vit(info: BackboneInfo, resolution: int) -> VisionTransformer:
    from torchvision.models.vision_transformer import interpolate_embeddings

    try:
        if info.name == "vit-b16":
            from torchvision.models import ViT_B_16_Weights, vit_b_16

            reference = vit_b_16(weights=ViT_B_16_Weights.IMAGENET1K_V1)
        elif info.name == "vit-l16":
            from torchvision.models import ViT_L_16_Weights, vit_l_16

            reference = vit_l_16(weights=ViT_L_16_Weights.IMAGENET1K_V1)
        else:
            raise UnknownBackboneError(info.name)
    except UnknownBackboneError:
        raise
    except Exception as exc:  # download failure, missing cache, ...
        raise WeightsUnavailableError(
            f"pretrained weights for {info.name} not available: {exc}"
        ) from exc
    state = interpolate_embeddings(resolution, info.patch_size, reference.state_dict())
    model = _build_vit(info, resolution, seed=0)
    model.load_state_dict(state)
    return model


class HookedViT:
    """Wraps a torchvision ViT; one forward collects everything the dump needs.

    Attention logits are recomputed from each block's own projection weights
    on the pre-attention (post-LN) tokens, so they equal the logits the model
    softmaxes internally, 1/sqrt(d_head) scaling included.
    """

    def __init__(self, model: VisionTransformer, info: BackboneInfo, resolution: int):
        if resolution % info.patch_size != 0:
            raise ValueError(
                f"resolution {resolution} not divisible by patch size {info.patch_size}"
            )
        self.model = model.eval()
        self.info = info
        self.resolution = resolution
        self.grid = resolution // info.patch_size
        self._block_outputs: list[torch.Tensor] = []
        self._attn_inputs: dict[int, torch.Tensor] = {}
        blocks = list(self.model.encoder.layers)
        for idx, block in enumerate(blocks):
            block.register_forward_hook(self._save_output)
            block.ln_1.register_forward_hook(self._save_attn_input(idx))

    def _save_output(self, module, args, output):
        self._block_outputs.append(output.detach())

    def _save_attn_input(self, idx):
        def hook(module, args, output):
            self._attn_inputs[idx] = output.detach()

        return hook

    def _attention_logits(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._attn_inputs[idx]  # [B, 1+N, E] post-LN tokens
        attn = self.model.encoder.layers[idx].self_attention
        qkv = torch.nn.functional.linear(x, attn.in_proj_weight, attn.in_proj_bias)
        q, k, _ = qkv.chunk(3, dim=-1)
        b, t, e = q.shape
        h = self.info.num_heads
        dh = e // h
        q = q.reshape(b, t, h, dh).permute(0, 2, 1, 3)  # [B, H, T, dh]
        k = k.reshape(b, t, h, dh).permute(0, 2, 1, 3)
        scale = 1.0 / np.sqrt(dh)
        qk = (q * scale) @ k.transpose(-2, -1)
        kk = (k * scale) @ k.transpose(-2, -1)
        return qk, kk

    @torch.no_grad()
    def forward(self, image: torch.Tensor, token_layers, attn_layers):
        """Run one [1, 3, R, R] image; returns (tokens [L,N,D], qk, kk [La,H,N,N])."""
        self._block_outputs.clear()
        self._attn_inputs.clear()
        x = self.model._process_input(image)
        cls = self.model.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        self.model.encoder(x)
        tokens = torch.stack(
            [self._block_outputs[i][0, 1:, :] for i in token_layers]
        )  # class token stripped
        qks, kks = [], []
        for i in attn_layers:
            qk, kk = self._attention_logits(i)
            qks.append(qk[0, :, 1:, 1:])
            kks.append(kk[0, :, 1:, 1:])
        qk = torch.stack(qks) if qks else torch.zeros(0)
        kk = torch.stack(kks) if kks else torch.zeros(0)
        return tokens.numpy(), qk.numpy(), kk.numpy()


def backbone_info(name: str) -> BackboneInfo:
    """Architecture facts for a registry name, without building the model."""
    for key, info in _VIT_CONFIGS.items():
        if name in (f"{key}-random", f"{key}-in1k"):
            return info
    raise UnknownBackboneError(
        f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
    )


def load_backbone(name: str, resolution: int, seed: int = 0) -> HookedViT:
    """Resolve a registry name like ``vit-b16-random`` or ``vit-b16-in1k``."""
    info = backbone_info(name)
    if name.endswith("-random"):
        return HookedViT(_build_vit(info, resolution, seed), info, resolution)
    pretrained = BackboneInfo(**{**info.__dict__, "pretrained": True})
    return HookedViT(_load_pretrained_vit(info, resolution), pretrained, resolution)
