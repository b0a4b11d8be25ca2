"""Slow, independent reference implementations used to cross-check the evaluator and IoU."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def rank(preds):
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))


def greedy_match(preds, gts, threshold):
    """Recursive form of greedy matching: the top remaining prediction claims its nearest free GT."""

    def go(order, free):
        if not order:
            return [], []
        i, rest = order[0], order[1:]
        p = preds[i]
        cands = [
            (math.hypot(p.box[0] - gts[j].box[0], p.box[1] - gts[j].box[1]), j)
            for j in free
            if gts[j].class_id == p.class_id
        ]
        cands = [c for c in cands if c[0] <= threshold]
        if not cands:
            m, f = go(rest, free)
            return m, [i] + f
        _, j = min(cands)
        m, f = go(rest, free - {j})
        return [(i, j)] + m, f

    matches, fps = go(rank(preds), frozenset(range(len(gts))))
    matched_gt = {j for _, j in matches}
    return matches, sorted(fps), [j for j in range(len(gts)) if j not in matched_gt]


def exact_ap(confidences, is_tp, n_gt):
    """AP from the PR curve with exact rational arithmetic.

    Recall levels are visited in rank order; each recall increase contributes
    its width times the best precision reached at that recall or beyond.
    """
    order = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    points = []
    tp = 0
    for k, i in enumerate(order, start=1):
        tp += bool(is_tp[i])
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    ap = Fraction(0)
    prev = Fraction(0)
    for r, _ in points:
        if r > prev:
            best = max(p for r2, p in points if r2 >= r)
            ap += (r - prev) * best
            prev = r
    return ap


def suppress(dets, radius):
    """Pairwise suppression: repeatedly keep the most confident detection and drop its same-class neighbours."""
    pool = [dets[i] for i in rank(dets)]
    kept = []
    while pool:
        top, pool = pool[0], pool[1:]
        kept.append(top)
        pool = [d for d in pool if d.class_id != top.class_id or math.hypot(d.box[0] - top.box[0], d.box[1] - top.box[1]) >= radius]
    return kept


def voxel_iou(b1, b2, res=0.01):
    """IoU of two yaw-ignored boxes by counting voxel centers on a ``res`` grid."""
    c1, s1 = np.array([b1.x, b1.y, b1.z]), np.array([b1.w, b1.l, b1.h])
    c2, s2 = np.array([b2.x, b2.y, b2.z]), np.array([b2.w, b2.l, b2.h])
    lo = np.minimum(c1 - s1 / 2, c2 - s2 / 2)
    hi = np.maximum(c1 + s1 / 2, c2 + s2 / 2)
    axes = [np.arange(a + res / 2, b, res) for a, b in zip(lo, hi)]
    masks = []
    for c, s in ((c1, s1), (c2, s2)):
        mx, my, mz = (np.abs(ax - ci) <= si / 2 for ax, ci, si in zip(axes, c, s))
        masks.append(mx[:, None, None] & my[None, :, None] & mz[None, None, :])
    return (masks[0] & masks[1]).sum() / (masks[0] | masks[1]).sum()
