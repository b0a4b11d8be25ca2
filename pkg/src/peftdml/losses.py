"""Detection, triplet-metric, and temporal-consistency objectives and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossConfig
from .errors import ConfigError, ContractError, NumericDomainError, ShapeError
from .tensor import Tensor
from .world import Box3D


def focal_ce(logits, targets, gamma: float = 2.0, reduce: bool = True) -> Tensor:
    """``-(1 - p_t)^gamma * log p_t`` with softmax probabilities; no alpha balancing.

    ``logits`` is ``(n, C + 1)`` (or a single vector), ``targets`` class indices.
    """
    logits = T.as_tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise NumericDomainError("non-finite logits")
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, -1))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape[0] != logits.shape[0] or np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ContractError("targets must index the logit columns, one per row")
    logp = T.pick(T.log_softmax(logits), targets)
    if gamma == 0:
        per = T.neg(logp)
    else:
        per = T.neg(T.power(1.0 - T.exp(logp), gamma) * logp)
    if single:
        return T.reshape(per, ())
    return T.mean(per) if reduce else per


def iou_3d(b1: Box3D, b2: Box3D) -> float:
    """Axis-aligned IoU of two boxes with yaw ignored (w along x, l along y, h along z)."""
    s1 = (b1.w, b1.l, b1.h)
    s2 = (b2.w, b2.l, b2.h)
    if min(s1) <= 0 or min(s2) <= 0:
        raise ShapeError("box sizes must be positive")
    c1 = (b1.x, b1.y, b1.z)
    c2 = (b2.x, b2.y, b2.z)
    inter = 1.0
    for a, sa, b, sb in zip(c1, s1, c2, s2):
        lo = max(a - sa / 2, b - sb / 2)
        hi = min(a + sa / 2, b + sb / 2)
        inter *= max(0.0, hi - lo)
    v1 = s1[0] * s1[1] * s1[2]
    v2 = s2[0] * s2[1] * s2[2]
    return inter / (v1 + v2 - inter)


def iou_3d_tensor(c1: Tensor, s1: Tensor, c2, s2) -> Tensor:
    """Differentiable row-wise version of :func:`iou_3d` on ``(n, 3)`` centers and sizes."""
    c2, s2 = T.as_tensor(c2), T.as_tensor(s2)
    half1, half2 = s1 * 0.5, s2 * 0.5
    overlap = T.relu(T.minimum(c1 + half1, c2 + half2) - T.maximum(c1 - half1, c2 - half2))
    inter = T.column(overlap, 0) * T.column(overlap, 1) * T.column(overlap, 2)
    v1 = T.column(s1, 0) * T.column(s1, 1) * T.column(s1, 2)
    v2 = T.column(s2, 0) * T.column(s2, 1) * T.column(s2, 2)
    return T.div(inter, v1 + v2 - inter)


@dataclass
class DetTargets:
    labels: np.ndarray  # (n,) class index, C for background
    anchors: np.ndarray  # (n, 7)
    gt_boxes: np.ndarray  # (n, 9) rows for assigned candidates, ignored otherwise
    assigned: np.ndarray  # (n,) bool


def det_loss(logits, box_residuals, targets: DetTargets, gamma: float = 2.0) -> tuple[Tensor, Tensor, Tensor]:
    """(focal classification, mean 1 - IoU, mean L1 on (sin, cos) yaw residual).

    Classification averages over every candidate; the two regression terms
    average over assigned candidates and are 0 when there are none.
    """
    logits, box_residuals = T.as_tensor(logits), T.as_tensor(box_residuals)
    n = logits.shape[0]
    if box_residuals.shape[0] != n or len(targets.labels) != n:
        raise ContractError("output and target counts differ")
    cls = focal_ce(logits, targets.labels, gamma)
    idx = np.flatnonzero(targets.assigned)
    if idx.size == 0:
        zero = T.Tensor(np.array(0.0))
        return cls, zero, zero
    res = T.take_rows(box_residuals, idx)
    anchors = targets.anchors[idx]
    gt = targets.gt_boxes[idx]
    sel = np.zeros((8, 3))
    sel[0, 0] = sel[1, 1] = sel[2, 2] = 1.0
    sel_log = np.zeros((8, 3))
    sel_log[3, 0] = sel_log[4, 1] = sel_log[5, 2] = 1.0
    center = T.matmul(res, T.Tensor(sel)) + T.Tensor(anchors[:, 0:3])
    size = T.mul(T.exp(T.matmul(res, T.Tensor(sel_log))), T.Tensor(anchors[:, 3:6]))
    iou = iou_3d_tensor(center, size, gt[:, 0:3], gt[:, 3:6])
    iou_term = T.mean(1.0 - iou)
    dyaw = gt[:, 6] - anchors[:, 6]
    target_sc = np.column_stack([np.sin(dyaw), np.cos(dyaw)])
    sel_sc = np.zeros((8, 2))
    sel_sc[6, 0] = sel_sc[7, 1] = 1.0
    pred_sc = T.matmul(res, T.Tensor(sel_sc))
    orient = T.mean(T.sum(T.absolute(pred_sc - T.Tensor(target_sc)), axis=1))
    return cls, iou_term, orient


def _check_unit(z: Tensor, name: str) -> None:
    norms = np.linalg.norm(np.atleast_2d(z.data), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ContractError(f"{name} must be unit-norm embeddings")


def _row_dist(a: Tensor, b: Tensor) -> Tensor:
    return T.sqrt(T.sum(T.square(a - b), axis=-1 if a.ndim == 1 else 1))


def triplet_loss(z_a, z_p, z_n, margin: float = 0.3, reduce: bool = True) -> Tensor:
    """Hinge ``max(0, d(a, p) - d(a, n) + margin)`` on Euclidean distances between unit vectors."""
    z_a, z_p, z_n = T.as_tensor(z_a), T.as_tensor(z_p), T.as_tensor(z_n)
    for z, name in ((z_a, "anchor"), (z_p, "positive"), (z_n, "negative")):
        _check_unit(z, name)
    per = T.relu(_row_dist(z_a, z_p) - _row_dist(z_a, z_n) + margin)
    if per.ndim == 0 or not reduce:
        return per
    return T.mean(per)


def mine_triplets(embeddings: np.ndarray, labels, modalities) -> list[tuple[int, int, int]]:
    """Batch-hard cross-modal mining.

    For every anchor: the positive is the farthest same-class embedding from a
    different modality, the negative the nearest different-class embedding.
    Anchors without a cross-modal positive or without any negative are skipped.
    Ties resolve to the lowest index.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    mods = np.asarray(modalities)
    n = len(labels)
    if n == 0:
        return []
    sq = np.sum(z * z, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0))
    same = labels[:, None] == labels[None, :]
    cross = mods[:, None] != mods[None, :]
    pos_ok = same & cross
    neg_ok = ~same
    out = []
    for i in range(n):
        if not pos_ok[i].any() or not neg_ok[i].any():
            continue
        p = int(np.argmax(np.where(pos_ok[i], dist[i], -np.inf)))
        k = int(np.argmin(np.where(neg_ok[i], dist[i], np.inf)))
        out.append((i, p, k))
    return out


def consistency_loss(z_t, z_t1) -> Tensor:
    """Mean squared distance between matched embedding pairs; 0 when there are none.

    ``z_t`` and ``z_t1`` are row-aligned ``(n, d)`` tensors (one row per matched
    instance pair, possibly stacked over modalities).
    """
    z_t, z_t1 = T.as_tensor(z_t), T.as_tensor(z_t1)
    if z_t.shape != z_t1.shape:
        raise ShapeError("consistency pairs must be row-aligned")
    if z_t.data.size == 0:
        return T.Tensor(np.array(0.0))
    if z_t.ndim == 1:
        return T.sum(T.square(z_t - z_t1))
    return T.mean(T.sum(T.square(z_t - z_t1), axis=1))


def match_instances(ids_t: np.ndarray, ids_t1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row indices pairing equal non-negative instance ids; restricted to the intersection."""
    pos_t1 = {int(i): k for k, i in enumerate(ids_t1) if i >= 0}
    a, b = [], []
    for k, i in enumerate(ids_t):
        if i >= 0 and int(i) in pos_t1:
            a.append(k)
            b.append(pos_t1[int(i)])
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


@dataclass
class LossBreakdown:
    det_cls: Tensor
    det_iou: Tensor
    det_orient: Tensor
    metric: Tensor
    consistency: Tensor
    total: Tensor

    FIELDS = ("det_cls", "det_iou", "det_orient", "metric", "consistency", "total")

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in self.FIELDS}


def total_loss(det_cls, det_iou, det_orient, metric, consistency, config: LossConfig) -> LossBreakdown:
    """``lambda_det * (cls + iou + orient) + lambda_met * metric + lambda_cons * consistency``."""
    if min(config.lambda_det, config.lambda_met, config.lambda_cons) < 0:
        raise ConfigError("loss weights must be non-negative")
    terms = [T.as_tensor(t) for t in (det_cls, det_iou, det_orient, metric, consistency)]
    det = terms[0] + terms[1] + terms[2]
    total = det * config.lambda_det + terms[3] * config.lambda_met + terms[4] * config.lambda_cons
    return LossBreakdown(*terms, total)

