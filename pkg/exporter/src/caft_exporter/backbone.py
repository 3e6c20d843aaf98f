"""Minimal vision-transformer encoder used for token extraction.

Standard pre-norm architecture: patch embedding, learned class token and
positional embedding, multi-head self-attention blocks with MLPs, final norm,
linear classification head. Weights always come from a checkpoint file; the
named presets only fix the architecture.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    depth: int
    dim: int
    heads: int
    patch_size: int
    resolution: int
    mlp_ratio: float = 4.0
    n_classes: int = 1000

    def __post_init__(self):
        if self.resolution % self.patch_size:
            raise ValueError(
                f"resolution {self.resolution} not divisible by patch size {self.patch_size}"
            )
        if self.depth < 3:
            raise ValueError("need at least three blocks to export the last three")

    @property
    def grid_side(self) -> int:
        return self.resolution // self.patch_size


PRESETS = {
    "base-384": BackboneConfig(depth=12, dim=768, heads=12, patch_size=16, resolution=384),
    "large-384": BackboneConfig(depth=24, dim=1024, heads=16, patch_size=16, resolution=384),
}


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        attended, _ = self.attn(*([self.norm1(x)] * 3), need_weights=False)
        x = x + attended
        return x + self.mlp(self.norm2(x))


class VisionBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(
            3, config.dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        n_patches = config.grid_side**2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, config.n_classes)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward_tokens(self, images: torch.Tensor):
        """Class logits plus the last three blocks' token sequences.

        Block outputs come back in forward order (the deepest block last),
        each of shape (B, 1 + H*W, D) with the class token at position 0 and
        grid tokens row-major.
        """
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        keep_from = len(self.blocks) - 3
        captured = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= keep_from:
                captured.append(x)
        logits = self.head(self.norm(x)[:, 0])
        return logits, captured


def save_checkpoint(model: VisionBackbone, path) -> None:
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> VisionBackbone:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    try:
        config = BackboneConfig(**payload["config"])
        model = VisionBackbone(config)
        model.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, RuntimeError) as exc:
        raise ValueError(f"{path}: checkpoint mismatch: {exc}") from exc
    model.eval()
    return model


def make_random_checkpoint(config: BackboneConfig, path, seed: int = 0) -> None:
    """Randomly initialized checkpoint, mainly for tests and dry runs."""
    torch.manual_seed(seed)
    model = VisionBackbone(config)
    save_checkpoint(model, path)
