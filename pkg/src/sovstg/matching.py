"""Set-prediction supervision: Hungarian matching for inference queries,
fixed index matching for denoising queries, focal + L1 + GIoU losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .geometry import elementwise_giou, pairwise_giou
from .model import PredictionSet

LOSS_NAMES = ("obj_class", "verb_class", "hoi_class", "box_l1", "box_giou")


class MatchingError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]          # (query index, ground-truth index)

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]

    def total_cost(self, cost) -> float:
        return float(sum(cost[q][g] for q, g in self.pairs))


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment covering every ground truth (columns)."""
    cost = torch.as_tensor(cost, dtype=torch.float64)
    if cost.dim() != 2:
        raise MatchingError("cost must be a (queries x ground-truths) matrix")
    n_q, k = cost.shape
    if k == 0:
        return MatchResult([])
    if k > n_q:
        raise MatchingError(f"{k} ground truths exceed the query budget of {n_q}")
    if not torch.isfinite(cost).all():
        raise MatchingError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost.numpy())
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    return MatchResult(pairs)


def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Elementwise binary focal loss."""
    p = logits.sigmoid()
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _multilabel_cost(prob, target):
    # mean agreement on positive and on negative classes, negated
    pos = prob @ target.T / (target.sum(-1)[None] + 1e-6)
    neg = (1 - prob) @ (1 - target).T / ((1 - target).sum(-1)[None] + 1e-6)
    return -(pos + neg) / 2


def match_cost_matrix(sub_boxes, obj_boxes, obj_prob, verb_prob, hoi_prob, targets, w: LossWeights):
    """Cost (N, K) of N predictions against K ground truths."""
    k = targets["obj_labels"].shape[0]
    n = sub_boxes.shape[0]
    if k == 0:
        return sub_boxes.new_zeros(n, 0)
    t_sub = targets["sub_boxes"].to(sub_boxes.dtype)
    t_obj = targets["obj_boxes"].to(sub_boxes.dtype)
    cost = -w.obj * obj_prob[:, targets["obj_labels"]]
    if verb_prob is not None:
        cost = cost + w.verb * _multilabel_cost(verb_prob, targets["verb_labels"].to(verb_prob.dtype))
    if hoi_prob is not None and "hoi_labels" in targets:
        cost = cost + w.hoi * _multilabel_cost(hoi_prob, targets["hoi_labels"].to(hoi_prob.dtype))
    cost = cost + w.l1 * (torch.cdist(sub_boxes, t_sub, p=1) + torch.cdist(obj_boxes, t_obj, p=1))
    cost = cost - w.giou * (pairwise_giou(sub_boxes, t_sub) + pairwise_giou(obj_boxes, t_obj))
    return cost


def hoi_match_cost(prediction: dict, gt: dict, w: LossWeights) -> float:
    """Cost of one prediction (dict of 1-D tensors) against one ground truth (dict of 1-row tensors)."""
    def row(name):
        v = prediction.get(name)
        return None if v is None else v[None]
    c = match_cost_matrix(row("sub_box"), row("obj_box"), row("obj_prob"), row("verb_prob"),
                          row("hoi_prob"), gt, w)
    return float(c[0, 0])


def match_layer(pred: PredictionSet, targets: list[dict], layer: int, w: LossWeights) -> list[MatchResult]:
    """Per-image Hungarian matches; the cost is computed once for the whole batch
    against all ground truths and the per-image blocks are read off."""
    bsz, n = pred.obj_logits.shape[1:3]
    sizes = [int(t["obj_labels"].shape[0]) for t in targets]
    with torch.no_grad():
        flat = lambda x: None if x is None else x[layer].flatten(0, 1)
        keys = [k for k in ("obj_labels", "verb_labels", "hoi_labels", "sub_boxes", "obj_boxes")
                if all(k in t for t in targets)]
        cat = {k: torch.cat([t[k] for t in targets]) for k in keys}
        cost = match_cost_matrix(flat(pred.sub_boxes), flat(pred.obj_boxes), flat(pred.obj_logits).sigmoid(),
                                 _sig(flat(pred.verb_logits)), _sig(flat(pred.hoi_logits)), cat, w)
        cost = cost.view(bsz, n, -1).split(sizes, -1)
        return [hungarian_match(c[b]) for b, c in enumerate(cost)]


def _sig(x):
    return None if x is None else x.sigmoid()


def _layer_losses(obj_logits, verb_logits, hoi_logits, sub_boxes, obj_boxes, b_idx, q_idx, tgt,
                  n_norm, w: LossWeights):
    """Losses for one layer; inputs are (B, N, ...) and ``(b_idx, q_idx)`` are the supervised rows.

    Every other row is background: all-zero class targets, no box loss.
    """
    dtype = obj_logits.dtype
    zero = obj_logits.new_zeros(())

    def focal(logits, rows_target):
        if logits is None or rows_target is None:
            return zero
        t = torch.zeros_like(logits)
        t[b_idx, q_idx] = rows_target.to(dtype)
        return sigmoid_focal_loss(logits, t, w.focal_alpha, w.focal_gamma).sum() / n_norm

    obj_rows = torch.nn.functional.one_hot(tgt["obj_labels"], obj_logits.shape[-1])
    ps, po = sub_boxes[b_idx, q_idx], obj_boxes[b_idx, q_idx]
    ts, to = tgt["sub_boxes"].to(dtype), tgt["obj_boxes"].to(dtype)
    return {
        "obj_class": focal(obj_logits, obj_rows),
        "verb_class": focal(verb_logits, tgt["verb_labels"]),
        "hoi_class": focal(hoi_logits, tgt.get("hoi_labels")),
        "box_l1": ((ps - ts).abs().sum() + (po - to).abs().sum()) / n_norm,
        "box_giou": ((1 - elementwise_giou(ps, ts)).sum() + (1 - elementwise_giou(po, to)).sum()) / n_norm,
    }


def _at(x, layer):
    return None if x is None else x[layer]


def _stack_targets(targets, per_image_gt_idx):
    keys = [k for k in ("obj_labels", "verb_labels", "hoi_labels", "sub_boxes", "obj_boxes")
            if all(k in t for t in targets)]
    return {k: torch.cat([t[k][g] for t, g in zip(targets, per_image_gt_idx)]) for k in keys}


def _weighted(raw: dict, w: LossWeights) -> dict:
    scale = {"obj_class": w.obj, "verb_class": w.verb, "hoi_class": w.hoi, "box_l1": w.l1, "box_giou": w.giou}
    return {k: scale[k] * v for k, v in raw.items()}


def _accumulate(total: dict | None, layer: dict) -> dict:
    if total is None:
        return dict(layer)
    return {k: total[k] + layer[k] for k in total}


def _finish(acc: dict | None, zero) -> dict:
    if acc is None:
        acc = {k: zero for k in LOSS_NAMES}
    acc["total"] = sum(acc[k] for k in LOSS_NAMES)
    return acc


def compute_losses(pred: PredictionSet, targets: list[dict], w: LossWeights,
                   matches: list[list[MatchResult]] | None = None) -> dict[str, torch.Tensor]:
    """Weighted loss components summed over every decoder layer, plus ``total``.

    ``pred`` must hold inference rows only. ``matches[layer][image]`` may be
    supplied; otherwise each layer is Hungarian-matched independently.
    """
    n_norm = max(1, sum(int(t["obj_labels"].shape[0]) for t in targets))
    acc = None
    for layer in range(pred.num_layers):
        m = matches[layer] if matches is not None else match_layer(pred, targets, layer, w)
        b_idx = torch.tensor([b for b, r in enumerate(m) for _ in r.pairs], dtype=torch.long)
        q_idx = torch.tensor([q for r in m for q in r.query_indices], dtype=torch.long)
        tgt = _stack_targets(targets, [torch.tensor(r.gt_indices, dtype=torch.long) for r in m])
        raw = _layer_losses(pred.obj_logits[layer], _at(pred.verb_logits, layer), _at(pred.hoi_logits, layer),
                            pred.sub_boxes[layer], pred.obj_boxes[layer], b_idx, q_idx, tgt, n_norm, w)
        acc = _accumulate(acc, _weighted(raw, w))
    return _finish(acc, pred.obj_logits.new_zeros(()))


def dn_losses(pred: PredictionSet, targets: list[dict], gt_index: torch.Tensor,
              w: LossWeights) -> dict[str, torch.Tensor]:
    """Same terms as :func:`compute_losses` for denoising rows, matched by ``gt_index``.

    ``pred`` holds DN rows only; ``gt_index`` is (B, M) with -1 marking padding.
    """
    zero = pred.obj_logits.new_zeros(())
    if gt_index.numel() == 0 or (gt_index < 0).all():
        return _finish(None, zero)
    for b, t in enumerate(targets):
        g = gt_index[b][gt_index[b] >= 0]
        if g.numel() and int(g.max()) >= t["obj_labels"].shape[0]:
            raise MatchingError(f"DN gt_index {int(g.max())} out of range for image {b}")
    b_idx, q_idx = (gt_index >= 0).nonzero(as_tuple=True)
    per_image = [gt_index[b][gt_index[b] >= 0] for b in range(len(targets))]
    tgt = _stack_targets(targets, per_image)
    n = b_idx.numel()
    rows0, rows = torch.zeros(n, dtype=torch.long), torch.arange(n)

    def pick(x, layer):
        # DN rows that carry a ground truth, as a batch of one
        return None if x is None else x[layer][b_idx, q_idx][None]

    acc = None
    for layer in range(pred.num_layers):
        raw = _layer_losses(pick(pred.obj_logits, layer), pick(pred.verb_logits, layer),
                            pick(pred.hoi_logits, layer), pick(pred.sub_boxes, layer),
                            pick(pred.obj_boxes, layer), rows0, rows, tgt, max(1, n), w)
        acc = _accumulate(acc, _weighted(raw, w))
    return _finish(acc, zero)
