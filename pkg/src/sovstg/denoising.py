"""Denoising (DN) query construction from noised ground-truth labels and boxes.

Per ground-truth instance ``k`` the DN block holds ``2 * num_groups`` rows:
rows ``[0, num_groups)`` encode flipped object labels, rows
``[num_groups, 2 * num_groups)`` encode flipped verb multi-labels. Object row
``j`` and verb row ``j`` of the same instance form one attention group.
Inference queries come first in every combined sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import noise_boxes
from .priors import LabelPriors
from .structures import HOIInstance, instances_to_targets

PAD_BOX = (0.5, 0.5, 0.1, 0.1)


@dataclass(frozen=True)
class DNConfig:
    eta_o: float = 0.3
    eta_v: float = 0.3
    lambda_v: float = 0.4
    delta_b: float = 0.4
    num_groups: int = 3

    def __post_init__(self):
        for name in ("eta_o", "eta_v", "lambda_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.delta_b < 0:
            raise ValueError(f"delta_b={self.delta_b} must be non-negative")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")


@dataclass
class DNGroupBatch:
    """Denoising block for one image."""

    queries: torch.Tensor          # (2*Np*K, D), differentiable w.r.t. the prior banks
    sub_anchors: torch.Tensor      # (2*Np*K, 4)
    obj_anchors: torch.Tensor      # (2*Np*K, 4)
    gt_index: torch.Tensor         # (2*Np*K,)
    obj_labels: torch.Tensor       # noised object labels, (K, Np)
    verb_labels: torch.Tensor      # noised verb multi-hots, (K, Np, C_v)
    num_instances: int
    num_groups: int

    def __len__(self) -> int:
        return self.queries.shape[0]

    def mask(self, num_queries: int) -> torch.Tensor:
        return build_attention_mask(num_queries, self.num_instances, self.num_groups)


def flip_object_labels(labels: torch.Tensor, eta_o: float, num_classes: int,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """With probability ``eta_o`` replace each label by a uniformly drawn different class."""
    if eta_o > 0 and num_classes < 2:
        raise ValueError("object-label flipping needs at least two classes")
    if eta_o == 0 or labels.numel() == 0:
        return labels.clone()
    flip = torch.rand(labels.shape, generator=generator) < eta_o
    # uniform over the other num_classes - 1 classes
    other = torch.randint(0, num_classes - 1, labels.shape, generator=generator)
    other = other + (other >= labels).long()
    return torch.where(flip, other, labels)


def flip_object_label(gt_class: int, eta_o: float, num_classes: int,
                      rng: torch.Generator | None = None) -> int:
    if not 0 <= gt_class < num_classes:
        raise IndexError(f"class {gt_class} out of range [0, {num_classes})")
    return int(flip_object_labels(torch.tensor([gt_class]), eta_o, num_classes, rng)[0])


def flip_verb_labels(multihot: torch.Tensor, eta_v: float, lambda_v: float,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Noise verb multi-hots (``(..., C_v)``) without ever dropping a ground-truth bit.

    A label is selected for noising with probability ``eta_v``; inside a selected
    label every non-ground-truth class switches on with probability ``lambda_v``.
    """
    gt = multihot > 0
    if multihot.numel() and not gt.any(-1).all():
        raise ValueError("verb label set is empty; every HOI instance has at least one verb")
    if eta_v == 0 or lambda_v == 0 or multihot.numel() == 0:
        return multihot.clone()
    selected = torch.rand(multihot.shape[:-1], generator=generator) < eta_v
    on = torch.rand(multihot.shape, generator=generator) < lambda_v
    noised = gt | (on & selected[..., None])
    return noised.to(multihot.dtype)


def flip_verb_label(gt: torch.Tensor, eta_v: float, lambda_v: float,
                    rng: torch.Generator | None = None) -> torch.Tensor:
    return flip_verb_labels(gt[None], eta_v, lambda_v, rng)[0]


def build_attention_mask(num_queries: int, num_instances: int, num_groups: int) -> torch.Tensor:
    """Boolean ``allowed[i, j]``: may query ``i`` attend to query ``j``.

    Inference queries only see inference queries. A DN query sees the
    inference queries plus its own group (same instance, same group index).
    """
    if min(num_queries, num_instances, num_groups) < 0:
        raise ValueError("sizes must be non-negative")
    n_dn = 2 * num_groups * num_instances
    total = num_queries + n_dn
    allowed = torch.zeros(total, total, dtype=torch.bool)
    allowed[:, :num_queries] = True
    if n_dn:
        r = torch.arange(n_dn)
        group = (r // (2 * num_groups)) * num_groups + (r % num_groups)
        allowed[num_queries:, num_queries:] = group[:, None] == group[None, :]
    return allowed


def build_dn_queries(gts: list[HOIInstance] | dict[str, torch.Tensor], priors: LabelPriors,
                     cfg: DNConfig, generator: torch.Generator | None = None) -> DNGroupBatch:
    """Build the denoising block for one image's ground truth."""
    if isinstance(gts, list):
        gts = instances_to_targets(gts, priors.num_verbs, dtype=priors.t_o.dtype)
    obj = gts["obj_labels"]
    verbs = gts["verb_labels"]
    k, np_ = obj.shape[0], cfg.num_groups
    dtype = priors.t_o.dtype

    obj_rep = obj[:, None].expand(k, np_)
    noised_obj = flip_object_labels(obj_rep, cfg.eta_o, priors.num_objects, generator)
    noised_verbs = flip_verb_labels(verbs[:, None, :].expand(k, np_, verbs.shape[-1]),
                                    cfg.eta_v, cfg.lambda_v, generator)

    q_obj = priors.encode_objects(noised_obj)                       # (K, Np, D)
    q_verb = priors.encode_verbs(noised_verbs.reshape(-1, verbs.shape[-1])).reshape(k, np_, priors.d_model)
    queries = torch.cat([q_obj, q_verb], dim=1).reshape(2 * np_ * k, priors.d_model)

    sub = gts["sub_boxes"].to(dtype).repeat_interleave(2 * np_, dim=0)
    objb = gts["obj_boxes"].to(dtype).repeat_interleave(2 * np_, dim=0)
    sub = noise_boxes(sub, cfg.delta_b, generator)
    objb = noise_boxes(objb, cfg.delta_b, generator)
    gt_index = torch.arange(k).repeat_interleave(2 * np_)
    return DNGroupBatch(queries, sub, objb, gt_index, noised_obj, noised_verbs, k, np_)


@dataclass
class DNPadded:
    """DN blocks of a batch padded to a common length; padding has ``gt_index == -1``."""

    queries: torch.Tensor      # (B, M, D)
    sub_anchors: torch.Tensor  # (B, M, 4)
    obj_anchors: torch.Tensor  # (B, M, 4)
    gt_index: torch.Tensor     # (B, M)
    mask: torch.Tensor         # (B, N_q + M, N_q + M)

    @property
    def size(self) -> int:
        return self.queries.shape[1]


def collate_dn(blocks: list[DNGroupBatch], num_queries: int, d_model: int,
               dtype=torch.float32) -> DNPadded:
    m = max((len(b) for b in blocks), default=0)
    bsz = len(blocks)
    total = num_queries + m
    pad_box = torch.tensor(PAD_BOX, dtype=dtype)
    # queries are gathered with cat so they keep their autograd link to the priors
    q_rows, sub, objb = [], pad_box.repeat(bsz, m, 1), pad_box.repeat(bsz, m, 1)
    gt_index = torch.full((bsz, m), -1, dtype=torch.long)
    mask = torch.zeros(bsz, total, total, dtype=torch.bool)
    for i, b in enumerate(blocks):
        n = len(b)
        pad = torch.zeros(m - n, d_model, dtype=dtype)
        q_rows.append(torch.cat([b.queries.to(dtype), pad], dim=0))
        sub[i, :n] = b.sub_anchors.to(dtype)
        objb[i, :n] = b.obj_anchors.to(dtype)
        gt_index[i, :n] = b.gt_index
        mask[i, :num_queries + n, :num_queries + n] = b.mask(num_queries)
        # padding rows see only themselves and are never attended to
        idx = torch.arange(num_queries + n, total)
        mask[i, idx, idx] = True
    queries = torch.stack(q_rows) if q_rows else torch.zeros(0, m, d_model, dtype=dtype)
    return DNPadded(queries, sub, objb, gt_index, mask)
