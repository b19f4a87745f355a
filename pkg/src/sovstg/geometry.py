"""Box arithmetic in normalized center-size form.

Tensor functions take boxes shaped ``(..., 4)`` as ``(cx, cy, w, h)``; the
``make_*`` / ``iou`` / ``giou`` / ``noise_box`` helpers wrap them for single
:class:`Box` values.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

MIN_SIZE = 1e-4


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return 0 <= self.cx <= 1 and 0 <= self.cy <= 1 and self.w > 0 and self.h > 0

    def to_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=dtype)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Box":
        cx, cy, w, h = (float(v) for v in t.tolist())
        return cls(cx, cy, w, h)


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def clamp_boxes(boxes: torch.Tensor) -> torch.Tensor:
    """Clamp centers into [0, 1] and sizes into [MIN_SIZE, 1]."""
    center = boxes[..., :2].clamp(0.0, 1.0)
    size = boxes[..., 2:].clamp(MIN_SIZE, 1.0)
    return torch.cat([center, size], dim=-1)


def asmbr(subject: torch.Tensor, obj: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """Adaptive shifted minimum bounding rectangle of a subject/object pair.

    The center is the midpoint of the two centers; each side is the mean of
    the two sides plus the center distance along that axis.
    """
    center = (subject[..., :2] + obj[..., :2]) / 2
    size = (subject[..., 2:] + obj[..., 2:]) / 2 + (subject[..., :2] - obj[..., :2]).abs()
    out = torch.cat([center, size], dim=-1)
    return clamp_boxes(out) if clamp else out


def mbr(subject: torch.Tensor, obj: torch.Tensor) -> torch.Tensor:
    a, b = cxcywh_to_xyxy(subject), cxcywh_to_xyxy(obj)
    lt = torch.minimum(a[..., :2], b[..., :2])
    rb = torch.maximum(a[..., 2:], b[..., 2:])
    return xyxy_to_cxcywh(torch.cat([lt, rb], dim=-1))


def smbr(subject: torch.Tensor, obj: torch.Tensor) -> torch.Tensor:
    """MBR size, centered on the midpoint of the two input centers."""
    size = mbr(subject, obj)[..., 2:]
    center = (subject[..., :2] + obj[..., :2]) / 2
    return clamp_boxes(torch.cat([center, size], dim=-1))


VERB_BOX_VARIANTS = ("object", "subject", "mbr", "smbr", "asmbr")


def verb_box(subject: torch.Tensor, obj: torch.Tensor, variant: str = "asmbr") -> torch.Tensor:
    if variant == "asmbr":
        return asmbr(subject, obj)
    if variant == "smbr":
        return smbr(subject, obj)
    if variant == "mbr":
        return clamp_boxes(mbr(subject, obj))
    if variant == "subject":
        return subject
    if variant == "object":
        return obj
    raise ValueError(f"unknown verb-box variant {variant!r}; expected one of {VERB_BOX_VARIANTS}")


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return boxes[..., 2].clamp(min=0) * boxes[..., 3].clamp(min=0)


def _intersection_union(a: torch.Tensor, b: torch.Tensor):
    ca, cb = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return inter, union


def elementwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union = _intersection_union(a, b)
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union = _intersection_union(a, b)
    safe_u = torch.where(union > 0, union, torch.ones_like(union))
    iou_ = torch.where(union > 0, inter / safe_u, torch.zeros_like(inter))
    ca, cb = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = torch.minimum(ca[..., :2], cb[..., :2])
    rb = torch.maximum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    safe_h = torch.where(hull > 0, hull, torch.ones_like(hull))
    penalty = torch.where(hull > 0, (hull - union) / safe_h, torch.zeros_like(hull))
    return iou_ - penalty


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix between ``a`` (N, 4) and ``b`` (M, 4)."""
    return elementwise_iou(a[:, None, :], b[None, :, :])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return elementwise_giou(a[:, None, :], b[None, :, :])


def noise_boxes(boxes: torch.Tensor, delta: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Shift centers by up to ``delta * size / 2`` and scale sizes by ``[1-delta, 1+delta]``."""
    if delta < 0:
        raise ValueError("box noise scale must be non-negative")
    if delta == 0 or boxes.numel() == 0:
        return boxes.clone()
    u = torch.rand(boxes.shape, generator=generator, dtype=boxes.dtype) * 2 - 1
    center = boxes[..., :2] + u[..., :2] * delta * boxes[..., 2:] / 2
    size = boxes[..., 2:] * (1 + u[..., 2:] * delta)
    return clamp_boxes(torch.cat([center, size], dim=-1))


# Single-box wrappers ------------------------------------------------------

def _pair(fn, a: Box, b: Box, **kw) -> Box:
    return Box.from_tensor(fn(a.to_tensor(), b.to_tensor(), **kw))


def _clamp_box(cx, cy, w, h) -> Box:
    return Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(max(w, MIN_SIZE), 1.0), min(max(h, MIN_SIZE), 1.0))


def make_asmbr(subject: Box, obj: Box) -> Box:
    # scalar form of :func:`asmbr`, kept in plain floats for per-box callers
    return _clamp_box((subject.cx + obj.cx) / 2, (subject.cy + obj.cy) / 2,
                      (subject.w + obj.w) / 2 + abs(subject.cx - obj.cx),
                      (subject.h + obj.h) / 2 + abs(subject.cy - obj.cy))


def make_mbr(subject: Box, obj: Box) -> Box:
    return _pair(mbr, subject, obj)


def make_smbr(subject: Box, obj: Box) -> Box:
    return _pair(smbr, subject, obj)


def iou(a: Box, b: Box) -> float:
    return float(elementwise_iou(a.to_tensor(), b.to_tensor()))


def giou(a: Box, b: Box) -> float:
    return float(elementwise_giou(a.to_tensor(), b.to_tensor()))


def noise_box(gt: Box, delta: float, rng: torch.Generator) -> Box:
    return Box.from_tensor(noise_boxes(gt.to_tensor(), delta, rng))
