"""The full detector: features -> subject/object decoders -> fusion -> verb decoder (-> advisor)."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import nn

from .advisor import VHOIBridge, VisionAdvisorDecoder, hoi_prompt, hoi_text_weights, make_provider
from .attention import inverse_sigmoid
from .config import RunConfig
from .decoders import DetectionDecoders, SOAttention, VerbDecoder
from .denoising import DNPadded
from .features import FeatureExtractor
from .geometry import verb_box
from .priors import LabelPriors


@dataclass
class Vocabulary:
    object_names: list[str]
    verb_names: list[str]
    hoi_classes: list[tuple[int, int]]    # (object class, verb class)

    @property
    def num_objects(self):
        return len(self.object_names)

    @property
    def num_verbs(self):
        return len(self.verb_names)

    @property
    def hoi_index(self) -> dict[tuple[int, int], int]:
        return {c: i for i, c in enumerate(self.hoi_classes)}

    def hoi_phrases(self) -> list[str]:
        return [hoi_prompt(self.verb_names[v], self.object_names[o]) for o, v in self.hoi_classes]

    def to_dict(self):
        return {"object_names": self.object_names, "verb_names": self.verb_names,
                "hoi_classes": [list(c) for c in self.hoi_classes]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["object_names"]), list(d["verb_names"]), [tuple(c) for c in d["hoi_classes"]])


@dataclass
class PredictionSet:
    """Per-layer outputs over all queries; rows ``[:num_queries]`` are inference queries."""

    sub_boxes: torch.Tensor                 # (N_l, B, N, 4)
    obj_boxes: torch.Tensor
    obj_logits: torch.Tensor                # (N_l, B, N, C_o)
    verb_logits: torch.Tensor | None        # (N_l, B, N, C_v)
    hoi_logits: torch.Tensor | None         # (N_l, B, N, C_hoi)
    verb_boxes: torch.Tensor                # (B, N, 4)
    E_s: torch.Tensor | None
    E_o: torch.Tensor
    E_v: torch.Tensor                       # fused verb queries
    E_vp: torch.Tensor                      # verb decoder output
    E_va: torch.Tensor | None
    E_vt: torch.Tensor | None
    num_queries: int
    dn: DNPadded | None = None

    def _rows(self, sl):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, torch.Tensor):
                v = v[:, sl] if f.name == "verb_boxes" else v[..., sl, :]
            out[f.name] = v
        return out

    def inference(self) -> "PredictionSet":
        return PredictionSet(**{**self._rows(slice(0, self.num_queries)), "dn": None})

    def denoising(self) -> "PredictionSet":
        return PredictionSet(**self._rows(slice(self.num_queries, None)))

    @property
    def num_layers(self):
        return self.obj_logits.shape[0]


def _prior_bias(p=0.01):
    return -math.log((1 - p) / p)


class SOVSTG(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        d, nq = cfg.d_model, cfg.num_queries
        common = dict(d_model=d, n_heads=cfg.n_heads, n_levels=cfg.n_levels, n_points=cfg.n_points,
                      d_ffn=cfg.d_ffn)
        self.features = FeatureExtractor(n_levels=cfg.n_levels, n_heads=cfg.n_heads, n_points=cfg.n_points,
                                         d_model=d, encoder_layers=cfg.encoder_layers, d_ffn=cfg.d_ffn,
                                         backbone_width=cfg.backbone_width)
        self.priors = LabelPriors(vocab.num_objects, vocab.num_verbs, d, nq)
        self.query_embed = None if cfg.use_stg else nn.Parameter(torch.randn(nq, d) * 0.02)

        anchors = torch.cat([torch.rand(nq, 2), torch.full((nq, 2), 0.1)], -1)
        self.sub_anchors = nn.Parameter(inverse_sigmoid(anchors))
        self.obj_anchors = nn.Parameter(inverse_sigmoid(anchors.clone()))

        self.decoders = DetectionDecoders(cfg.num_layers, use_subject_decoder=cfg.use_subject_decoder, **common)
        self.fusion = (SOAttention(d, cfg.n_heads, cfg.fusion) if cfg.use_subject_decoder else None)
        self.verb_decoder = VerbDecoder(cfg.num_layers, **common) if cfg.use_verb_decoder else None

        self.obj_class_head = nn.Linear(d, vocab.num_objects)
        nn.init.constant_(self.obj_class_head.bias, _prior_bias())

        self.provider = None
        if cfg.use_vla:
            self.provider = make_provider(cfg.provider, cfg.provider_seed, cfg.advisor_dim)
            self.advisor = VisionAdvisorDecoder(cfg.num_layers, advisor_dim=cfg.advisor_dim,
                                                use_box_pe=cfg.use_box_pe, **common)
            self.bridge = VHOIBridge(d, vocab.num_verbs, len(vocab.hoi_classes), cfg.use_vla_verb_prediction)
            if self.bridge.verb_head is not None:
                nn.init.constant_(self.bridge.verb_head.bias, _prior_bias())
            if cfg.use_text_init:
                self.bridge.init_hoi_from_text(self.text_weights())
            else:
                nn.init.constant_(self.bridge.hoi_head.bias, _prior_bias())
            self.verb_head = None
        else:
            self.advisor = self.bridge = None
            self.verb_head = nn.Linear(d, vocab.num_verbs)
            nn.init.constant_(self.verb_head.bias, _prior_bias())

    def text_weights(self) -> torch.Tensor:
        return hoi_text_weights(self.provider, self.vocab.hoi_phrases(), self.advisor.input_proj.weight)

    def inference_queries(self) -> torch.Tensor:
        if self.query_embed is not None:
            return self.query_embed
        return self.priors.init_inference_queries()

    def forward(self, images: torch.Tensor, dn: DNPadded | None = None) -> PredictionSet:
        cfg = self.cfg
        levels = self.features(images).levels
        bsz, nq = images.shape[0], cfg.num_queries
        queries = self.inference_queries()[None].expand(bsz, -1, -1)
        sub_a = self.sub_anchors.sigmoid()[None].expand(bsz, -1, -1)
        obj_a = self.obj_anchors.sigmoid()[None].expand(bsz, -1, -1)
        mask = None
        if dn is not None and dn.size > 0:
            queries = torch.cat([queries, dn.queries.to(queries.dtype)], 1)
            sub_a = torch.cat([sub_a, dn.sub_anchors.to(sub_a.dtype)], 1)
            obj_a = torch.cat([obj_a, dn.obj_anchors.to(obj_a.dtype)], 1)
            mask = dn.mask
        else:
            dn = None

        emb = self.decoders(levels, queries, sub_a, obj_a, mask)
        obj_logits = self.obj_class_head(emb.E_o)
        E_v = self.fusion(emb.E_s, emb.E_o, self.priors.t_v) if self.fusion is not None else emb.E_o
        vboxes = verb_box(emb.sub_boxes[-1].detach(), emb.obj_boxes[-1].detach(), cfg.verb_box)
        E_vp = self.verb_decoder(E_v, levels, vboxes, mask) if self.verb_decoder is not None else E_v

        E_va = E_vt = hoi_logits = None
        if self.advisor is not None:
            f_ga = self.provider.extract_image_features(images)
            E_va = self.advisor(E_v[-1], f_ga, levels, vboxes, mask)
            E_vt, verb_logits, hoi_logits = self.bridge(E_vp, E_va)
        else:
            verb_logits = self.verb_head(E_vp)

        return PredictionSet(emb.sub_boxes, emb.obj_boxes, obj_logits, verb_logits, hoi_logits, vboxes,
                             emb.E_s, emb.E_o, E_v, E_vp, E_va, E_vt, nq, dn)


@torch.no_grad()
def prediction_records(pred: PredictionSet, image_ids: list) -> list[dict]:
    """Last-layer inference outputs as per-query prediction records."""
    inf = pred.inference()
    obj_prob = inf.obj_logits[-1].sigmoid()
    obj_score, obj_class = obj_prob.max(-1)
    verb = inf.verb_logits[-1].sigmoid() if inf.verb_logits is not None else None
    hoi = inf.hoi_logits[-1].sigmoid() if inf.hoi_logits is not None else None
    records = []
    for b, image_id in enumerate(image_ids):
        for q in range(inf.num_queries):
            records.append({
                "image_id": image_id,
                "subject_box": inf.sub_boxes[-1, b, q].tolist(),
                "object_box": inf.obj_boxes[-1, b, q].tolist(),
                "object_class": int(obj_class[b, q]),
                "object_score": float(obj_score[b, q]),
                "verb_scores": verb[b, q].tolist() if verb is not None else None,
                "hoi_scores": hoi[b, q].tolist() if hoi is not None else None,
            })
    return records
