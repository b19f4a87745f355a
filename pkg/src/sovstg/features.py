"""Desk-scale multi-scale feature extractor: small conv backbone + deformable encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import BoxDeformableAttention, positional_encode_box


@dataclass
class MultiScaleFeatures:
    levels: list[torch.Tensor]   # each (B, D, H_l, W_l)
    strides: list[int]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("at least one feature level is required")
        widths = {f.shape[1] for f in self.levels}
        if len(widths) != 1:
            raise ValueError(f"all levels must share one width, got {sorted(widths)}")

    @property
    def d_model(self) -> int:
        return self.levels[0].shape[1]


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.GroupNorm(8, cout), nn.ReLU())


class ToyBackbone(nn.Module):
    """Strided conv stages; the last ``n_levels`` stages (stride 4, 8, 16, ...) are kept."""

    def __init__(self, d_model: int, n_levels: int = 2, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(_conv(3, width, 2), _conv(width, width, 1))
        stages, cin = [], width
        for i in range(n_levels):
            cout = width * 2 ** min(i + 1, 2)
            stages.append(nn.Sequential(_conv(cin, cout, 2), _conv(cout, cout, 1)))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleList(nn.Sequential(nn.Conv2d(s[0][0].out_channels, d_model, 1), nn.GroupNorm(8, d_model))
                                  for s in stages)
        self.strides = [2 ** (i + 2) for i in range(n_levels)]

    def forward(self, images):
        x = self.stem(images)
        out = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            out.append(proj(x))
        return out


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, n_levels, n_points, d_ffn, window: float):
        super().__init__()
        self.window = window
        self.attn = BoxDeformableAttention(d_model, n_heads, n_levels, n_points)
        self.norm1 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.linear2 = nn.Linear(d_ffn, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, tokens, pos, centers, levels):
        boxes = torch.cat([centers, torch.full_like(centers, self.window)], -1)
        boxes = boxes.expand(tokens.shape[0], -1, -1)
        tokens = self.norm1(tokens + self.attn(tokens + pos, boxes, levels))
        return self.norm2(tokens + self.linear2(F.relu(self.linear1(tokens))))


class FeatureExtractor(nn.Module):
    """Images (B, 3, H, W) in [0, 1] -> :class:`MultiScaleFeatures` of width ``d_model``."""

    def __init__(self, d_model=64, n_levels=2, n_heads=4, n_points=4, encoder_layers=1, d_ffn=128,
                 backbone_width=32, window=0.25):
        super().__init__()
        self.d_model = d_model
        self.backbone = ToyBackbone(d_model, n_levels, backbone_width)
        self.level_embed = nn.Parameter(torch.randn(n_levels, d_model) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads, n_levels, n_points, d_ffn, window)
                                    for _ in range(encoder_layers))

    def forward(self, images) -> MultiScaleFeatures:
        levels = self.backbone(images)
        if self.layers:
            shapes = [f.shape[-2:] for f in levels]
            tokens = torch.cat([f.flatten(2).transpose(1, 2) for f in levels], 1)
            centers, pos = [], []
            for lvl, (hh, ww) in enumerate(shapes):
                ys, xs = torch.meshgrid((torch.arange(hh, dtype=tokens.dtype) + 0.5) / hh,
                                        (torch.arange(ww, dtype=tokens.dtype) + 0.5) / ww, indexing="ij")
                c = torch.stack([xs.flatten(), ys.flatten()], -1)
                cell = torch.tensor([1.0 / ww, 1.0 / hh], dtype=tokens.dtype).expand_as(c)
                centers.append(c)
                pos.append(positional_encode_box(torch.cat([c, cell], -1), self.d_model) + self.level_embed[lvl])
            centers = torch.cat(centers)[None]
            pos = torch.cat(pos)[None]
            for layer in self.layers:
                tokens = layer(tokens, pos, centers, levels)
                split = tokens.split([h * w for h, w in shapes], dim=1)
                levels = [t.transpose(1, 2).reshape(t.shape[0], -1, h, w) for t, (h, w) in zip(split, shapes)]
        return MultiScaleFeatures(levels, self.backbone.strides)
