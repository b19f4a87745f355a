"""Split subject/object/verb decoding."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MLP, BoxDeformableAttention, MultiHeadAttention, inverse_sigmoid, positional_encode_box


class DecoderLayer(nn.Module):
    """Self-attention (masked) -> box-constrained deformable cross-attention -> FFN, post-norm."""

    def __init__(self, d_model=64, n_heads=4, n_levels=2, n_points=4, d_ffn=128):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = BoxDeformableAttention(d_model, n_heads, n_levels, n_points)
        self.norm2 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, d_ffn)
        self.linear2 = nn.Linear(d_ffn, d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt, query_pos, boxes, levels, mask=None):
        q = k = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, k, tgt, mask))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, boxes, levels))
        return self.norm3(tgt + self.linear2(F.relu(self.linear1(tgt))))


def _box_head(d_model):
    head = MLP(d_model, d_model, 4, 3)
    nn.init.zeros_(head.layers[-1].weight)
    nn.init.zeros_(head.layers[-1].bias)
    return head


class DecoderStack(nn.Module):
    """Anchor-conditioned decoder that refines its anchors after every layer.

    With ``extra_box_heads`` the stack also refines a second anchor set from
    its own embeddings (used when the subject decoder is ablated away).
    """

    def __init__(self, num_layers=2, d_model=64, n_heads=4, n_levels=2, n_points=4, d_ffn=128,
                 extra_box_heads=False):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(DecoderLayer(d_model, n_heads, n_levels, n_points, d_ffn)
                                    for _ in range(num_layers))
        self.ref_point_head = MLP(d_model, d_model, d_model, 2)
        self.box_embed = nn.ModuleList(_box_head(d_model) for _ in range(num_layers))
        self.extra_box_embed = (nn.ModuleList(_box_head(d_model) for _ in range(num_layers))
                                if extra_box_heads else None)

    @property
    def num_layers(self):
        return len(self.layers)

    def forward(self, tgt, anchors, levels, mask=None, extra_anchors=None):
        if anchors.shape[:2] != tgt.shape[:2]:
            raise ValueError(f"{anchors.shape[1]} anchors for {tgt.shape[1]} queries")
        embeds, boxes, extra_boxes = [], [], []
        out = tgt
        for lid, layer in enumerate(self.layers):
            query_pos = self.ref_point_head(positional_encode_box(anchors, self.d_model))
            out = layer(out, query_pos, anchors, levels, mask)
            refined = (self.box_embed[lid](out) + inverse_sigmoid(anchors)).sigmoid()
            embeds.append(out)
            boxes.append(refined)
            anchors = refined.detach()
            if self.extra_box_embed is not None:
                extra = (self.extra_box_embed[lid](out) + inverse_sigmoid(extra_anchors)).sigmoid()
                extra_boxes.append(extra)
                extra_anchors = extra.detach()
        extra_out = torch.stack(extra_boxes) if extra_boxes else None
        return torch.stack(embeds), torch.stack(boxes), extra_out


def clone_object_to_subject(object_stack: DecoderStack) -> DecoderStack:
    """Deep copy: identical at creation, trained independently afterwards."""
    return copy.deepcopy(object_stack)


@dataclass
class LayerEmbeddings:
    E_s: torch.Tensor | None    # (N_l, B, N, D); None when the subject decoder is ablated
    E_o: torch.Tensor
    sub_boxes: torch.Tensor     # refined anchors per layer, (N_l, B, N, 4)
    obj_boxes: torch.Tensor


class DetectionDecoders(nn.Module):
    """Subject and object stacks fed with the same queries.

    ``use_subject_decoder=False`` drops the subject stack; the object stack then
    refines the subject anchors too.
    """

    def __init__(self, num_layers=2, d_model=64, n_heads=4, n_levels=2, n_points=4, d_ffn=128,
                 use_subject_decoder=True):
        super().__init__()
        self.object_decoder = DecoderStack(num_layers, d_model, n_heads, n_levels, n_points, d_ffn,
                                           extra_box_heads=not use_subject_decoder)
        self.subject_decoder = clone_object_to_subject(self.object_decoder) if use_subject_decoder else None

    def forward(self, levels, queries, subject_anchors, object_anchors, mask=None) -> LayerEmbeddings:
        if subject_anchors.shape[:2] != queries.shape[:2] or object_anchors.shape[:2] != queries.shape[:2]:
            raise ValueError("need exactly one subject and one object anchor per query")
        if self.subject_decoder is None:
            E_o, obj_boxes, sub_boxes = self.object_decoder(queries, object_anchors, levels, mask,
                                                            extra_anchors=subject_anchors)
            return LayerEmbeddings(None, E_o, sub_boxes, obj_boxes)
        E_s, sub_boxes, _ = self.subject_decoder(queries, subject_anchors, levels, mask)
        E_o, obj_boxes, _ = self.object_decoder(queries, object_anchors, levels, mask)
        return LayerEmbeddings(E_s, E_o, sub_boxes, obj_boxes)


def run_detection_decoders(decoders: DetectionDecoders, features, queries, subject_anchors,
                           object_anchors, mask=None) -> LayerEmbeddings:
    return decoders(features.levels, queries, subject_anchors, object_anchors, mask)


class SOAttention(nn.Module):
    """Fuse per-layer subject/object embeddings into verb queries.

    ``e_so_i = (e_o_i + e_s_i) / 2``; each is enriched by cross-attention over the
    verb prior bank plus a residual, and layer ``i`` averages the enriched
    terms of layers ``i-1`` and ``i`` (layer 1 uses its own term alone).
    ``mode="sum"`` keeps only the averaging fusion.
    """

    def __init__(self, d_model=64, n_heads=4, mode="so"):
        super().__init__()
        if mode not in ("so", "sum"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.cross_attn = MultiHeadAttention(d_model, n_heads) if mode == "so" else None

    def forward(self, E_s, E_o, t_v):
        if E_s.shape != E_o.shape:
            raise ValueError(f"subject/object embeddings disagree: {tuple(E_s.shape)} vs {tuple(E_o.shape)}")
        e_so = (E_o + E_s) / 2
        if self.mode == "sum":
            return e_so
        if t_v.shape[-1] != e_so.shape[-1]:
            raise ValueError("verb prior width does not match embedding width")
        n_l, bsz, n, d = e_so.shape
        flat = e_so.reshape(n_l * bsz, n, d)
        r = (self.cross_attn(flat, t_v, t_v) + flat).reshape(n_l, bsz, n, d)
        out = [r[0]] + [(r[i - 1] + r[i]) / 2 for i in range(1, n_l)]
        return torch.stack(out)


def so_fuse(module: SOAttention, E_s, E_o, t_v):
    return module(E_s, E_o, t_v)


class VerbDecoder(nn.Module):
    """Decoder over fixed verb boxes; layer ``i`` decodes the fused verb query of layer ``i``."""

    def __init__(self, num_layers=2, d_model=64, n_heads=4, n_levels=2, n_points=4, d_ffn=128):
        super().__init__()
        self.d_model = d_model
        self.layers = nn.ModuleList(DecoderLayer(d_model, n_heads, n_levels, n_points, d_ffn)
                                    for _ in range(num_layers))
        self.ref_point_head = MLP(d_model, d_model, d_model, 2)

    def forward(self, verb_queries, levels, verb_boxes, mask=None):
        if verb_queries.shape[0] != len(self.layers):
            raise ValueError(f"{verb_queries.shape[0]} query layers for {len(self.layers)} decoder layers")
        if verb_boxes.shape[:2] != verb_queries.shape[1:3]:
            raise ValueError("need exactly one verb box per query")
        query_pos = self.ref_point_head(positional_encode_box(verb_boxes, self.d_model))
        return torch.stack([layer(verb_queries[i], query_pos, verb_boxes, levels, mask)
                            for i, layer in enumerate(self.layers)])


def run_verb_decoder(decoder: VerbDecoder, verb_queries, features, verb_boxes, mask=None):
    return decoder(verb_queries, features.levels, verb_boxes, mask)
