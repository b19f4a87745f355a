"""Frozen vision-language provider, vision advisor decoder and the verb-to-HOI bridge."""
from __future__ import annotations

import hashlib
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import MLP, BoxDeformableAttention, MultiHeadAttention, positional_encode_box


class AdvisorProvider(Protocol):
    """A frozen image/text encoder. Outputs never carry gradients."""

    dim: int

    def extract_image_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, N_ga, D_a)."""

    def encode_hoi_prompts(self, phrases: list[str]) -> list[np.ndarray]:
        """One (n_tokens, D_a) embedding set per phrase."""


class StubProvider:
    """Deterministic stand-in for a pretrained VLM.

    Image tokens are a fixed random projection of per-cell color statistics on a
    ``grid x grid`` downsampling; prompt sets are seeded from a hash of the phrase.
    """

    def __init__(self, seed: int = 0, dim: int = 32, grid: int = 4, prompt_tokens: int = 4):
        self.seed, self.dim, self.grid, self.prompt_tokens = seed, dim, grid, prompt_tokens
        rng = np.random.default_rng(seed)
        # inputs per cell: mean rgb, max rgb, cell x, cell y
        self._weight = rng.normal(0.0, 1.0, size=(8, dim))
        self._bias = rng.normal(0.0, 0.1, size=dim)

    def extract_image_features(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            g = self.grid
            x = images.detach().double()
            mean = F.adaptive_avg_pool2d(x, g)
            peak = F.adaptive_max_pool2d(x, g)
            ys, xs = torch.meshgrid((torch.arange(g, dtype=x.dtype) + 0.5) / g,
                                    (torch.arange(g, dtype=x.dtype) + 0.5) / g, indexing="ij")
            coords = torch.stack([xs, ys]).expand(x.shape[0], 2, g, g)
            stats = torch.cat([mean, peak, coords], 1).flatten(2).transpose(1, 2)   # (B, g*g, 8)
            feats = torch.tanh(stats @ torch.from_numpy(self._weight) + torch.from_numpy(self._bias))
            return feats.to(images.dtype)

    def encode_hoi_prompts(self, phrases: list[str]) -> list[np.ndarray]:
        out = []
        for phrase in phrases:
            digest = hashlib.sha256(f"{self.seed}:{phrase}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            out.append(rng.normal(0.0, 1.0, size=(self.prompt_tokens, self.dim)))
        return out

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray([self.seed, self.dim, self.grid, self.prompt_tokens]).tobytes())
        h.update(self._weight.tobytes())
        h.update(self._bias.tobytes())
        return h.hexdigest()


PROVIDERS = {"stub": StubProvider}


def make_provider(name: str = "stub", seed: int = 0, dim: int = 32) -> AdvisorProvider:
    try:
        cls = PROVIDERS[name]
    except KeyError:
        raise ValueError(f"unknown advisor provider {name!r}; known: {sorted(PROVIDERS)}") from None
    return cls(seed=seed, dim=dim)


def stub_provider(seed: int = 0) -> StubProvider:
    return StubProvider(seed)


def hoi_prompt(verb: str, obj: str) -> str:
    article = "an" if obj[:1].lower() in "aeiou" else "a"
    return f"a person {verb} {article} {obj}"


def average_prompt_sets(sets: list[np.ndarray]) -> np.ndarray:
    return np.stack([s.mean(0) for s in sets])


def hoi_text_weights(provider: AdvisorProvider, phrases: list[str], projection: torch.Tensor) -> torch.Tensor:
    """Average each phrase's embedding set and map it to model width with ``projection`` (D x D_a)."""
    means = torch.from_numpy(average_prompt_sets(provider.encode_hoi_prompts(phrases)))
    return means.to(projection.dtype) @ projection.detach().T


class AdvisorLayer(nn.Module):
    """Pre-norm: masked self-attention with box PE -> attention over advisor tokens
    -> box-constrained deformable attention over the detector features -> FFN."""

    def __init__(self, d_model=64, n_heads=4, n_levels=2, n_points=4, d_ffn=128):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.deform_attn = BoxDeformableAttention(d_model, n_heads, n_levels, n_points)
        self.norm4 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.linear2 = nn.Linear(d_ffn, d_model)

    def forward(self, x, pos, f_ga, boxes, levels, mask=None):
        h = self.norm1(x)
        x = x + self.self_attn(h + pos, h + pos, h, mask)
        h = self.norm2(x)
        x = x + self.cross_attn(h, f_ga, f_ga)
        h = self.norm3(x)
        x = x + self.deform_attn(h + pos, boxes, levels)
        h = self.norm4(x)
        return x + self.linear2(F.relu(self.linear1(h)))


class VisionAdvisorDecoder(nn.Module):
    def __init__(self, num_layers=2, d_model=64, advisor_dim=32, n_heads=4, n_levels=2, n_points=4,
                 d_ffn=128, use_box_pe=True):
        super().__init__()
        self.d_model = d_model
        self.use_box_pe = use_box_pe
        self.input_proj = nn.Linear(advisor_dim, d_model)
        self.ref_point_head = MLP(d_model, d_model, d_model, 2)
        self.layers = nn.ModuleList(AdvisorLayer(d_model, n_heads, n_levels, n_points, d_ffn)
                                    for _ in range(num_layers))

    def box_pe(self, verb_boxes):
        if not self.use_box_pe:
            return torch.zeros(*verb_boxes.shape[:-1], self.d_model, dtype=verb_boxes.dtype)
        return self.ref_point_head(positional_encode_box(verb_boxes, self.d_model))

    def forward(self, E_v, f_ga, levels, verb_boxes, mask=None):
        """E_v (B, N, D) verb queries; f_ga (B, N_ga, D_a). Returns (N_l, B, N, D)."""
        if f_ga is None or f_ga.numel() == 0:
            raise ValueError("vision advisor needs advisor image features")
        if verb_boxes.shape[:2] != E_v.shape[:2]:
            raise ValueError("need exactly one verb box per query")
        f_ga = self.input_proj(f_ga)
        pos = self.box_pe(verb_boxes)
        x, out = E_v, []
        for layer in self.layers:
            x = layer(x, pos, f_ga, verb_boxes, levels, mask)
            out.append(x)
        return torch.stack(out)


def vision_advisor_decode(decoder: VisionAdvisorDecoder, E_v, f_ga, features, verb_boxes, mask=None):
    return decoder(E_v, f_ga, features.levels, verb_boxes, mask)


class VHOIBridge(nn.Module):
    """Two-step head: verbs from ``proj([E_v', E_va])``, then HOI classes from ``E_vt + E_va``.

    With ``use_verb_prediction=False`` the first step is skipped and the HOI
    head reads ``E_v' + E_va`` directly.
    """

    def __init__(self, d_model, num_verbs, num_hoi, use_verb_prediction=True):
        super().__init__()
        self.use_verb_prediction = use_verb_prediction
        self.proj = nn.Linear(2 * d_model, d_model) if use_verb_prediction else None
        self.verb_head = nn.Linear(d_model, num_verbs) if use_verb_prediction else None
        self.hoi_head = nn.Linear(d_model, num_hoi)

    @torch.no_grad()
    def init_hoi_from_text(self, weights: torch.Tensor):
        if weights.shape != self.hoi_head.weight.shape:
            raise ValueError(f"text weights {tuple(weights.shape)} do not fit HOI head "
                             f"{tuple(self.hoi_head.weight.shape)}")
        self.hoi_head.weight.copy_(weights)
        self.hoi_head.bias.zero_()

    def forward(self, E_vp, E_va):
        if E_vp.shape != E_va.shape:
            raise ValueError(f"bridge inputs disagree: {tuple(E_vp.shape)} vs {tuple(E_va.shape)}")
        if not self.use_verb_prediction:
            return None, None, self.hoi_head(E_vp + E_va)
        E_vt = self.proj(torch.cat([E_vp, E_va], -1))
        return E_vt, self.verb_head(E_vt), self.hoi_head(E_vt + E_va)


def vhoi_bridge(bridge: VHOIBridge, E_v_last, E_va_last):
    return bridge(E_v_last, E_va_last)
