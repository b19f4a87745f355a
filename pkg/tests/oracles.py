"""Independent reference implementations, written without the package's tensor code."""
from __future__ import annotations

import itertools
import math

import numpy as np


def asmbr_direct(s, o):
    xs, ys, ws, hs = s
    xo, yo, wo, ho = o
    return ((xs + xo) / 2, (ys + yo) / 2, (ws + wo) / 2 + abs(xs - xo), (hs + ho) / 2 + abs(ys - yo))


def brute_force_assignment(cost):
    """Minimum total cost over every injective map ground truth -> query."""
    cost = np.asarray(cost)
    n, k = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(n), k):
        total = sum(cost[r, c] for c, r in enumerate(rows))
        best = min(best, total)
    return best


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def reference_ap(dets, gts, thr=0.5):
    """dets: list of (image, sub, obj, score); gts: list of (image, sub, obj).

    Plain loops: walk detections by descending score, claim the best unclaimed
    ground truth in the same image, then integrate the precision envelope
    point by point over recall.
    """
    if not gts:
        return float("nan")
    claimed = [False] * len(gts)
    hits = []
    for img, sub, obj, _ in sorted(dets, key=lambda d: -d[3]):
        best, best_j = -1.0, None
        for j, (gimg, gsub, gobj) in enumerate(gts):
            if gimg != img or claimed[j]:
                continue
            ov = min(box_iou(sub, gsub), box_iou(obj, gobj))
            if ov > best:
                best, best_j = ov, j
        if best_j is not None and best >= thr:
            claimed[best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    precisions, recalls = [], []
    tp = 0
    for i, h in enumerate(hits):
        tp += h
        precisions.append(tp / (i + 1))
        recalls.append(tp / len(gts))
    ap, prev_r = 0.0, 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * max(precisions[i:])
            prev_r = r
    return ap


def bilinear_numpy(feat, x, y):
    """feat (C, H, W); (x, y) normalized with pixel centers at (j + .5) / W; zero outside."""
    c, h, w = feat.shape
    px, py = x * w - 0.5, y * h - 0.5
    x0, y0 = math.floor(px), math.floor(py)
    out = np.zeros(c)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wt = (1 - abs(px - xi)) * (1 - abs(py - yi))
            if 0 <= xi < w and 0 <= yi < h:
                out += wt * feat[:, yi, xi]
    return out


def mask_by_enumeration(nq, k, np_):
    """Allowed-attention matrix built entry by entry from the group rules."""
    n = nq + 2 * np_ * k

    def group(i):
        if i < nq:
            return None
        r = i - nq
        inst, j = divmod(r, 2 * np_)
        return (inst, j % np_)

    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            if j < nq:
                m[i, j] = True
            elif i >= nq:
                m[i, j] = group(i) == group(j)
    return m


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar f at x (numpy float64) by central differences."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def relations_oracle(sub, obj, gap=0.05):
    """Verb names that hold between two (cx, cy, w, h) boxes, from corner arithmetic."""
    sx0, sx1 = sub[0] - sub[2] / 2, sub[0] + sub[2] / 2
    sy0, sy1 = sub[1] - sub[3] / 2, sub[1] + sub[3] / 2
    ox0, ox1 = obj[0] - obj[2] / 2, obj[0] + obj[2] / 2
    oy0, oy1 = obj[1] - obj[3] / 2, obj[1] + obj[3] / 2
    share_x = min(sx1, ox1) > max(sx0, ox0)
    share_y = min(sy1, oy1) > max(sy0, oy0)
    out = set()
    if share_x and sy1 <= oy0:
        out.add("above")
    if share_x and sy0 >= oy1:
        out.add("below")
    if share_y and not share_x:
        out.add("beside")
    if share_x and share_y:
        out.add("overlapping")
    else:
        dx = max(ox0 - sx1, sx0 - ox1)
        dy = max(oy0 - sy1, sy0 - oy1)
        if max(dx, dy) <= gap:
            out.add("holding")
    return out
