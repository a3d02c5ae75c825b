"""Independent reference implementations: Monte-Carlo IoU and brute-force AP."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from lidar_nsm.bev import OrientedBox

# ---------------------------------------------------------------------------
# IoU by rasterization


def mc_iou(a: OrientedBox, b: OrientedBox, n: int, rng: np.random.Generator, chunk: int = 250_000) -> float:
    """IoU from ``n`` uniform samples over the joint bounding rectangle."""
    pts = np.concatenate([a.corners(), b.corners()])
    lo, hi = pts.min(0), pts.max(0)
    both = either = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = rng.uniform(lo[0], hi[0], m)
        y = rng.uniform(lo[1], hi[1], m)
        ia, ib = a.contains(x, y), b.contains(x, y)
        both += int(np.count_nonzero(ia & ib))
        either += int(np.count_nonzero(ia | ib))
        done += m
    return both / either if either else 0.0


def random_box_pair(rng: np.random.Generator) -> tuple[OrientedBox, OrientedBox]:
    """Overlapping-ish pairs with random sizes and headings."""
    a = OrientedBox(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 3), rng.uniform(0.5, 6),
                    rng.uniform(-math.pi, math.pi))
    reach = (a.width + a.length) / 2
    b = OrientedBox(a.cx + rng.uniform(-reach, reach), a.cy + rng.uniform(-reach, reach),
                    rng.uniform(0.5, 3), rng.uniform(0.5, 6), rng.uniform(-math.pi, math.pi))
    return a, b


# ---------------------------------------------------------------------------
# AP by exhaustive enumeration over cut-offs


def _aa_iou(a: OrientedBox, b: OrientedBox) -> Fraction:
    """Exact IoU of two yaw-0 boxes (length along x, width along y)."""
    def span(c, ext):
        return Fraction(c) - Fraction(ext) / 2, Fraction(c) + Fraction(ext) / 2

    ax0, ax1 = span(a.cx, a.length)
    bx0, bx1 = span(b.cx, b.length)
    ay0, ay1 = span(a.cy, a.width)
    by0, by1 = span(b.cy, b.width)
    ix = max(Fraction(0), min(ax1, bx1) - max(ax0, bx0))
    iy = max(Fraction(0), min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def ap_bruteforce(dets: list[tuple[str, OrientedBox]], gts: dict[str, list[OrientedBox]],
                  thr: float) -> Fraction:
    n_gt = sum(len(g) for g in gts.values())
    if n_gt == 0:
        return Fraction(1) if not dets else Fraction(0)
    if not dets:
        return Fraction(0)
    ranked = [dets[i] for i in sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, dets[i][0], i))]

    def tp_count(k: int) -> int:
        # re-run the matching from scratch on the first k detections
        used = {f: [False] * len(g) for f, g in gts.items()}
        tp = 0
        for fid, d in ranked[:k]:
            best, best_iou = -1, Fraction(-1)
            for j, g in enumerate(gts.get(fid, [])):
                if used[fid][j] or g.class_id != d.class_id:
                    continue
                iou = _aa_iou(d, g)
                if iou > best_iou:
                    best, best_iou = j, iou
            if best >= 0 and best_iou >= Fraction(thr):
                used[fid][best] = True
                tp += 1
        return tp

    n = len(ranked)
    prec = [Fraction(tp_count(k), k) for k in range(1, n + 1)]
    rec = [Fraction(tp_count(k), n_gt) for k in range(1, n + 1)]
    ap = Fraction(0)
    prev = Fraction(0)
    for k in range(n):
        if rec[k] > prev:
            ap += (rec[k] - prev) * max(prec[k:])
            prev = rec[k]
    return ap


def random_ap_instance(seed: int, max_det: int = 8, max_gt: int = 5):
    """Yaw-0 boxes in up to two frames, near-copies and decoys of the GT, some tied scores."""
    rng = np.random.default_rng(seed)
    frames = ["f0", "f1"][: int(rng.integers(1, 3))]
    n_gt = int(rng.integers(0, max_gt + 1))
    gts: dict[str, list[OrientedBox]] = {f: [] for f in frames}
    for k in range(n_gt):
        f = frames[int(rng.integers(len(frames)))]
        # GT boxes sit on separate lanes so they never overlap each other
        gts[f].append(OrientedBox(rng.uniform(0, 30), 6.0 * len(gts[f]) + rng.uniform(-0.5, 0.5),
                                  rng.uniform(1.5, 2.2), rng.uniform(3.5, 5.0), 0.0, 0))
    flat = [(f, g) for f in frames for g in gts[f]]
    dets = []
    levels = np.round(np.linspace(0.1, 0.9, 5), 2)
    for _ in range(int(rng.integers(0, max_det + 1))):
        score = float(levels[rng.integers(5)]) if rng.random() < 0.3 else float(rng.uniform(0.01, 1))
        if flat and rng.random() < 0.75:
            f, g = flat[int(rng.integers(len(flat)))]
            d = OrientedBox(g.cx + rng.normal(0, 0.8), g.cy + rng.normal(0, 0.3),
                            g.width * rng.uniform(0.8, 1.2), g.length * rng.uniform(0.8, 1.2), 0.0, 0, score)
        else:
            f = frames[int(rng.integers(len(frames)))]
            d = OrientedBox(rng.uniform(0, 30), rng.uniform(-2, 26), 1.8, 4.2, 0.0, 0, score)
        dets.append((f, d))
    return dets, gts
