from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def positional_encode_box(boxes: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal encoding of ``(cx, cy, w, h)``; ``dim // 4`` channels per coordinate.

    Within each coordinate block even channels are ``sin`` and odd channels
    ``cos`` of the same frequency, so an all-zero box encodes as 0, 1, 0, 1, ...
    """
    if dim % 8:
        raise ValueError("positional encoding width must be a multiple of 8")
    per = dim // 4
    i = torch.arange(per, dtype=boxes.dtype, device=boxes.device)
    freq = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / per)
    phase = boxes[..., None] * (2 * math.pi) / freq            # (..., 4, per)
    enc = torch.where(i % 2 == 0, phase.sin(), phase.cos())
    return enc.flatten(-2)


class MLP(nn.Module):
    def __init__(self, input_dim, hidden_dim, output_dim, num_layers):
        super().__init__()
        self.num_layers = num_layers
        h = [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip([input_dim] + h, h + [output_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < self.num_layers - 1 else layer(x)
        return x


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a boolean ``allowed`` mask.

    ``mask`` is ``(Nq, Nk)`` or ``(B, Nq, Nk)``; ``True`` lets a query attend to a
    key. Disallowed entries get exactly zero weight.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query, key, value, mask=None):
        # query (B, Nq, D); key/value (B, Nk, D) or (Nk, D) shared across the batch
        bsz, nq, d = query.shape
        if key.dim() == 2:
            key = key.expand(bsz, -1, -1)
            value = value.expand(bsz, -1, -1)
        nk = key.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        q = self.q_proj(query).view(bsz, nq, h, dh).transpose(1, 2)
        k = self.k_proj(key).view(bsz, nk, h, dh).transpose(1, 2)
        v = self.v_proj(value).view(bsz, nk, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            allowed = mask if mask.dim() == 3 else mask[None]
            logits = logits.masked_fill(~allowed[:, None], float("-inf"))
        attn = logits.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, nq, d)
        return self.out_proj(out)


def sampling_locations(boxes: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Map unit offsets to image coordinates: ``center + offset * size / 2``.

    boxes ``(B, N, 4)``, offsets ``(B, N, H, L, P, 2)``.
    """
    center = boxes[:, :, None, None, None, :2]
    half = boxes[:, :, None, None, None, 2:] / 2
    return center + offsets * half


def bilinear_sample(value: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Sample ``value`` (B, C, H, W) at normalized ``loc`` (B, N, P, 2) in [0, 1].

    Pixel ``(i, j)`` has its center at ``((j + 0.5) / W, (i + 0.5) / H)``;
    locations outside the map read zeros. Returns (B, C, N, P).
    """
    grid = loc * 2 - 1
    return F.grid_sample(value, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


class BoxDeformableAttention(nn.Module):
    """Multi-scale deformable cross-attention whose sampling region is a box.

    Each query predicts per-head, per-level, per-point offsets; the sampled
    location is the box center plus offset times half the box size. Attention
    weights are a softmax over all levels and points of a head.
    """

    def __init__(self, d_model: int, n_heads: int, n_levels: int, n_points: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads, self.n_levels, self.n_points = d_model, n_heads, n_levels, n_points
        self.sampling_offsets = nn.Linear(d_model, n_heads * n_levels * n_points * 2)
        self.attention_weights = nn.Linear(d_model, n_heads * n_levels * n_points)
        self.value_proj = nn.Linear(d_model, d_model)
        self.output_proj = nn.Linear(d_model, d_model)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        # initial points spread on a ring inside the box, growing with point index
        thetas = torch.arange(self.n_heads, dtype=torch.float32) * (2.0 * math.pi / self.n_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.n_heads, 1, 1, 2).repeat(1, self.n_levels, self.n_points, 1)
        scale = torch.arange(1, self.n_points + 1, dtype=torch.float32) / self.n_points
        grid = grid * scale[None, None, :, None]
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.flatten())
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def offsets_and_weights(self, query):
        bsz, n, _ = query.shape
        h, l, p = self.n_heads, self.n_levels, self.n_points
        offsets = self.sampling_offsets(query).view(bsz, n, h, l, p, 2)
        weights = self.attention_weights(query).view(bsz, n, h, l * p).softmax(-1).view(bsz, n, h, l, p)
        return offsets, weights

    def forward(self, query: torch.Tensor, boxes: torch.Tensor, levels: list[torch.Tensor]) -> torch.Tensor:
        """query (B, N, D), boxes (B, N, 4), levels: list of (B, D, H_l, W_l)."""
        if len(levels) != self.n_levels:
            raise ValueError(f"expected {self.n_levels} feature levels, got {len(levels)}")
        if boxes.shape[:2] != query.shape[:2]:
            raise ValueError("one box per query is required")
        bsz, n, d = query.shape
        h, p, dh = self.n_heads, self.n_points, d // self.n_heads
        offsets, weights = self.offsets_and_weights(query)
        loc = sampling_locations(boxes, offsets)                           # (B, N, H, L, P, 2)
        out = query.new_zeros(bsz, h, dh, n)
        for lvl, feat in enumerate(levels):
            _, _, hh, ww = feat.shape
            value = self.value_proj(feat.flatten(2).transpose(1, 2))       # (B, HW, D)
            value = value.transpose(1, 2).reshape(bsz * h, dh, hh, ww)
            grid = loc[:, :, :, lvl].permute(0, 2, 1, 3, 4).reshape(bsz * h, n, p, 2)
            sampled = bilinear_sample(value, grid).view(bsz, h, dh, n, p)
            w = weights[:, :, :, lvl].permute(0, 2, 1, 3)                  # (B, H, N, P)
            out = out + (sampled * w[:, :, None]).sum(-1)
        out = out.permute(0, 3, 1, 2).reshape(bsz, n, d)
        return self.output_proj(out)


def deformable_box_cross_attention(attn: BoxDeformableAttention, query, box, levels):
    """Single-query convenience form: query (D,), box (4,), levels of (D, H, W)."""
    out = attn(query[None, None], box[None, None], [f[None] for f in levels])
    return out[0, 0]
