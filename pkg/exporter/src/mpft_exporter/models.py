"""Backbone registry.

Each entry builds an eval-mode torch module whose ``forward_tokens``
returns the final token features right before any classifier:
``(cls, tokens)`` for transformer-family models (mode "cls+tokens") or
``(None, tokens)`` for convolutional ones (mode "tokens-only").

Stub models carry deterministic seeded weights and exist so exports can
be validated without downloading checkpoints; the torchvision entry
pulls real pretrained weights when the hub is reachable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError

IMAGE_SIZE = 224


@dataclass(frozen=True)
class ModelInfo:
    name: str
    mode: str                 # "cls+tokens" or "tokens-only"
    tokens: int               # word tokens per image at 224x224
    dim: int
    mean: tuple
    std: tuple


class StubViT(nn.Module):
    """Minimal ViT-style encoder: patch embedding, learned CLS token and
    position embeddings, a couple of pre-LN blocks, final LN."""

    def __init__(self, patch: int, dim: int, depth: int = 2, heads: int = 4,
                 seed: int = 1234):
        super().__init__()
        torch.manual_seed(seed)
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        n_tokens = (IMAGE_SIZE // patch) ** 2
        self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, n_tokens + 1, dim) * 0.02)
        block = nn.TransformerEncoderLayer(
            d_model=dim, nhead=heads, dim_feedforward=dim * 4,
            activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(block, num_layers=depth,
                                             enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward_tokens(self, x):
        z = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(z.shape[0], -1, -1)
        z = torch.cat([cls, z], dim=1) + self.pos
        z = self.norm(self.encoder(z))
        return z[:, 0], z[:, 1:]


class StubConvNet(nn.Module):
    """Small strided conv stack; the final 7x7 grid flattens to 49
    word tokens and there is no classification token."""

    def __init__(self, dim: int, seed: int = 4321):
        super().__init__()
        torch.manual_seed(seed)
        widths = (16, 32, 64, dim)
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(widths):
            stride = 2 if i < 3 else 4
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
                       nn.GELU()]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)

    def forward_tokens(self, x):
        z = self.features(x)                       # [B, dim, 7, 7]
        return None, z.flatten(2).transpose(1, 2)  # [B, 49, dim]


class TorchvisionViT(nn.Module):
    """Pretrained hub model; exposes the encoder output before the head."""

    def __init__(self):
        super().__init__()
        from torchvision.models import ViT_B_16_Weights, vit_b_16
        try:
            self.vit = vit_b_16(weights=ViT_B_16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download failure, offline hub
            raise ConfigError(
                f"could not load pretrained vit-b16 weights: {exc}") from exc

    def forward_tokens(self, x):
        v = self.vit
        z = v._process_input(x)
        cls = v.class_token.expand(z.shape[0], -1, -1)
        z = v.encoder(torch.cat([cls, z], dim=1))
        return z[:, 0], z[:, 1:]


_STUB_STATS = ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5))
_IMAGENET_STATS = ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))

REGISTRY = {
    "stub-vit": (
        ModelInfo("stub-vit", "cls+tokens", tokens=49, dim=64, mean=_STUB_STATS[0],
                  std=_STUB_STATS[1]),
        lambda: StubViT(patch=32, dim=64)),
    "stub-vit-b16": (
        ModelInfo("stub-vit-b16", "cls+tokens", tokens=196, dim=768,
                  mean=_STUB_STATS[0], std=_STUB_STATS[1]),
        lambda: StubViT(patch=16, dim=768, depth=2)),
    "stub-conv": (
        ModelInfo("stub-conv", "tokens-only", tokens=49, dim=64,
                  mean=_STUB_STATS[0], std=_STUB_STATS[1]),
        lambda: StubConvNet(dim=64)),
    "vit-b16-torchvision": (
        ModelInfo("vit-b16-torchvision", "cls+tokens", tokens=196, dim=768,
                  mean=_IMAGENET_STATS[0], std=_IMAGENET_STATS[1]),
        TorchvisionViT),
}


def build_model(name: str) -> tuple[ModelInfo, nn.Module]:
    if name not in REGISTRY:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(REGISTRY)}")
    info, builder = REGISTRY[name]
    model = builder()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return info, model
