"""HOI detection mAP: Default / Known-Object settings, Full / Rare / Non-Rare splits.

A triplet is (subject box, object box, HOI class). A detection matches a
ground-truth triplet of the same class when both the subject IoU and the
object IoU reach the threshold.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from .config import EvalConfig
from .geometry import Box, iou
from .structures import HOIInstance

CATEGORIES = ("full", "rare", "non_rare")


@dataclass(frozen=True)
class Triplet:
    image_id: str | int
    hoi_class: int
    subject: Box
    object: Box
    score: float = 1.0


def triplet_match(pred: Triplet, gt: Triplet, iou_thr: float = 0.5) -> bool:
    return (pred.hoi_class == gt.hoi_class
            and min(iou(pred.subject, gt.subject), iou(pred.object, gt.object)) >= iou_thr)


def gt_triplets(image_id, instances: Iterable[HOIInstance], hoi_index: dict[tuple[int, int], int]) -> list[Triplet]:
    out = []
    for inst in instances:
        for v in inst.verbs:
            c = hoi_index.get((inst.object_class, v))
            if c is not None:
                out.append(Triplet(image_id, c, inst.subject, inst.object))
    return out


def records_to_triplets(records: Iterable[dict], hoi_classes: list[tuple[int, int]],
                        score_mode: str = "verb", top_k: int = 64) -> list[Triplet]:
    """Expand per-query prediction records into scored triplets, keeping ``top_k`` per image.

    ``verb`` scoring: object score x verb score for every (predicted object, verb)
    pair in the vocabulary. ``hoi`` scoring: HOI score x object score for HOI
    classes of the predicted object.
    """
    by_obj = defaultdict(list)
    for c, (o, v) in enumerate(hoi_classes):
        by_obj[o].append((c, v))
    per_image = defaultdict(list)
    for r in records:
        o = r["object_class"]
        sub, obj = Box(*r["subject_box"]), Box(*r["object_box"])
        for c, v in by_obj.get(o, ()):
            if score_mode == "hoi":
                score = r["hoi_scores"][c] * r["object_score"]
            else:
                score = r["verb_scores"][v] * r["object_score"]
            per_image[r["image_id"]].append(Triplet(r["image_id"], c, sub, obj, float(score)))
    out = []
    for image_id in per_image:
        ranked = sorted(per_image[image_id], key=lambda t: -t.score)
        out.extend(ranked[:top_k])
    return out


def average_precision(tp: np.ndarray, n_gt: int, mode: str = "all-point") -> float:
    """AP from a score-sorted TP indicator vector."""
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=float)
    fp = 1 - tp
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    rec = tp_c / n_gt
    prec = tp_c / np.maximum(tp_c + fp_c, np.finfo(float).eps)
    if mode == "11-point":
        return float(np.mean([prec[rec >= t].max() if (rec >= t).any() else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _as_array(boxes: list[Box]) -> np.ndarray:
    return np.array([b.as_list() for b in boxes], dtype=float).reshape(-1, 4)


def _iou_many(box: Box, others: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = box.corners()
    ox0, oy0 = others[:, 0] - others[:, 2] / 2, others[:, 1] - others[:, 3] / 2
    ox1, oy1 = others[:, 0] + others[:, 2] / 2, others[:, 1] + others[:, 3] / 2
    inter = (np.clip(np.minimum(x1, ox1) - np.maximum(x0, ox0), 0, None)
             * np.clip(np.minimum(y1, oy1) - np.maximum(y0, oy0), 0, None))
    union = box.area() + others[:, 2] * others[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def class_ap(dets: list[Triplet], gts: list[Triplet], iou_thr: float, mode: str = "all-point") -> float:
    """Greedy matching in descending score order to the highest-IoU unmatched ground truth."""
    if not gts:
        return float("nan")
    gts_by_img = defaultdict(list)
    for g in gts:
        gts_by_img[g.image_id].append(g)
    gt_boxes = {k: (_as_array([g.subject for g in v]), _as_array([g.object for g in v]))
                for k, v in gts_by_img.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts_by_img.items()}
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        d = dets[i]
        if d.image_id not in gts_by_img:
            continue
        gs, go = gt_boxes[d.image_id]
        ov = np.minimum(_iou_many(d.subject, gs), _iou_many(d.object, go))
        ov[used[d.image_id]] = -1.0
        j = int(ov.argmax())
        if ov[j] >= iou_thr:
            used[d.image_id][j] = True
            tp[rank] = 1
    return average_precision(tp, len(gts), mode)


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluation_pool(hoi_class: int, hoi_classes, gt_by_image: dict, setting: str) -> set:
    """Image ids over which a class is evaluated."""
    if setting == "default":
        return set(gt_by_image)
    obj = hoi_classes[hoi_class][0]
    return {img for img, insts in gt_by_image.items() if any(i.object_class == obj for i in insts)}


def evaluate_map(predictions: list[Triplet], ground_truths: dict, hoi_classes: list[tuple[int, int]],
                 rare_classes: set[int], cfg: EvalConfig = EvalConfig()) -> dict:
    """mAP over HOI classes with at least one ground truth.

    ``ground_truths`` maps image id -> list of :class:`HOIInstance`. Returns
    ``{"full", "rare", "non_rare", "per_class"}``; a split with no evaluated
    class reports NaN.
    """
    hoi_index = {c: i for i, c in enumerate(hoi_classes)}
    gts_by_class = defaultdict(list)
    for img, insts in ground_truths.items():
        for t in gt_triplets(img, insts, hoi_index):
            gts_by_class[t.hoi_class].append(t)
    dets_by_class = defaultdict(list)
    for p in predictions:
        dets_by_class[p.hoi_class].append(p)

    per_class = {}
    for c in sorted(gts_by_class):
        pool = evaluation_pool(c, hoi_classes, ground_truths, cfg.setting)
        dets = [d for d in dets_by_class[c] if d.image_id in pool]
        gts = [g for g in gts_by_class[c] if g.image_id in pool]
        per_class[c] = class_ap(dets, gts, cfg.iou_threshold, cfg.ap_mode)
    return {
        "full": _nanmean(per_class.values()),
        "rare": _nanmean(v for c, v in per_class.items() if c in rare_classes),
        "non_rare": _nanmean(v for c, v in per_class.items() if c not in rare_classes),
        "per_class": per_class,
    }


def rare_classes_from_counts(counts: dict[int, int], threshold: int) -> set[int]:
    return {c for c, n in counts.items() if n < threshold}


def read_prediction_records(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_prediction_records(records: list[dict], path: str | Path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def write_metrics_csv(results: dict[str, dict], path: str | Path):
    """``results`` maps setting -> evaluate_map output; columns setting, category, mAP."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "category", "mAP"])
        for setting, res in results.items():
            for cat in CATEGORIES:
                w.writerow([setting, cat, f"{res[cat]:.6f}"])
