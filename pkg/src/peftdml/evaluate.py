"""Inference, center-distance matching, AP / true-positive errors, and the evaluation protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

from . import tensor as T
from .config import MODALITIES, WEATHERS, EvalConfig, RunConfig
from .errors import AvailabilityError, ConfigError, ContractError, ManifestError
from .fusion import decode_boxes
from .model import PeftDmlModel, forward, make_batch
from .peft import trainability_report
from .world import DatasetManifest, FrameRecord, wrap_angle

EVAL_CHUNK = 16  # frames per forward pass; fixed so results never depend on split size


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    box: tuple[float, ...]  # x, y, z, w, l, h, yaw
    velocity: tuple[float, float] = (0.0, 0.0)
    moving: float = 0.0  # probability that the object moves
    candidate: int = -1


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple[float, ...]
    velocity: tuple[float, float]
    moving: bool


# ------------------------------------------------------------------ inference


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dedup(dets: list[Detection], radius: float = 1.0) -> list[Detection]:
    """Greedy same-class suppression: keep the most confident of any pair closer than ``radius``."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or math.hypot(k.box[0] - d.box[0], k.box[1] - d.box[1]) >= radius for k in kept):
            kept.append(d)
    return kept


def _frame_detections(frame: FrameRecord, rows: np.ndarray, logits, box, vel, attr, n_classes: int, radius: float):
    if rows.size == 0:
        return []
    probs = _softmax(logits)
    cls = np.argmax(probs, axis=1)
    boxes = decode_boxes(frame.anchors[rows], box)
    moving = 1.0 / (1.0 + np.exp(-attr[:, 0]))
    dets = [
        Detection(int(cls[k]), float(probs[k, cls[k]]), tuple(boxes[k].tolist()), (float(vel[k, 0]), float(vel[k, 1])), float(moving[k]), int(rows[k]))
        for k in range(rows.size)
        if cls[k] < n_classes
    ]
    return dedup(dets, radius)


def _check_mask(mask) -> np.ndarray:
    mask = np.ones(len(MODALITIES), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (len(MODALITIES),):
        raise ContractError("modality mask must have one flag per modality")
    if not mask.any():
        raise AvailabilityError("empty modality mask")
    return mask


def predict_frames(model: PeftDmlModel, frames: list[FrameRecord], mask=None, radius: float = 1.0) -> list[list[Detection]]:
    """Detections per frame. Candidates with no available modality under ``mask`` produce none."""
    mask = _check_mask(mask)
    out: list[list[Detection]] = []
    for start in range(0, len(frames), EVAL_CHUNK):
        chunk = frames[start : start + EVAL_CHUNK]
        batch = make_batch(chunk, [mask] * len(chunk))
        valid_mask = batch.available.any(axis=1)
        if not valid_mask.any():
            out.extend([] for _ in chunk)
            continue
        keep = np.flatnonzero(valid_mask)
        with T.no_grad():
            res = _forward_rows(model, batch, keep)
        logits, box, vel, attr = (t.data for t in (res.output.logits, res.output.box, res.output.velocity, res.output.attribute))
        offsets = np.cumsum([0] + [len(f.labels) for f in chunk])
        for j, f in enumerate(chunk):
            sel = np.flatnonzero((keep >= offsets[j]) & (keep < offsets[j + 1]))
            rows = keep[sel] - offsets[j]
            out.append(_frame_detections(f, rows, logits[sel], box[sel], vel[sel], attr[sel], model.n_classes, radius))
    return out


def _forward_rows(model: PeftDmlModel, batch, keep: np.ndarray):
    # forward() drops rows with nothing available; ``keep`` lists exactly those it retains
    res = forward(model, batch)
    if not np.array_equal(res.valid, keep):
        raise ContractError("forward dropped an unexpected set of candidates")
    return res


def predict_frame(model: PeftDmlModel, frame: FrameRecord, mask=None, radius: float = 1.0) -> list[Detection]:
    return predict_frames(model, [frame], mask, radius)[0]


def ground_truth(frame: FrameRecord) -> list[GroundTruth]:
    return [
        GroundTruth(o.class_id, (o.box.x, o.box.y, o.box.z, o.box.w, o.box.l, o.box.h, o.box.yaw), (o.box.vx, o.box.vy), bool(o.attribute))
        for o in frame.objects
    ]


# ------------------------------------------------------------------ matching and AP


@dataclass
class MatchingResult:
    threshold: float
    matches: list[tuple[int, int]]  # (prediction index, gt index)
    false_positives: list[int]
    false_negatives: list[int]


def match_detections(preds: list[Detection], gts: list[GroundTruth], threshold: float) -> MatchingResult:
    """Greedy matching in descending confidence to the nearest unmatched same-class GT within ``threshold``."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    taken = [False] * len(gts)
    matches, fps = [], []
    for i in order:
        p = preds[i]
        best, best_d = -1, math.inf
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            d = math.hypot(p.box[0] - g.box[0], p.box[1] - g.box[1])
            if d <= threshold and d < best_d:
                best, best_d = j, d
        if best < 0:
            fps.append(i)
        else:
            taken[best] = True
            matches.append((i, best))
    fns = [j for j, t in enumerate(taken) if not t]
    return MatchingResult(threshold, matches, sorted(fps), fns)


@dataclass
class FrameEval:
    preds: list[Detection]
    gts: list[GroundTruth]
    matchings: dict[float, MatchingResult]


def evaluate_frames(preds: list[list[Detection]], gts: list[list[GroundTruth]], thresholds) -> list[FrameEval]:
    return [FrameEval(p, g, {t: match_detections(p, g, t) for t in thresholds}) for p, g in zip(preds, gts)]


def ap_from_ranked(confidences, is_tp, n_gt: int) -> float:
    """All-point AP: sum over recall steps of the max precision at equal or higher recall."""
    if n_gt <= 0:
        raise ContractError("AP is undefined without ground truth")
    conf = np.asarray(confidences, dtype=np.float64)
    tp = np.asarray(is_tp, dtype=bool)
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    # max-interpolate from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    # every interpolated value is some ctp_j / j; summing those as rationals makes
    # the result the correctly rounded AP rather than an accumulation of roundings
    levels, counts = np.unique(interp[tp], return_counts=True)
    total = Fraction(0)
    for value, count in zip(levels, counts):
        j = int(np.flatnonzero(precision == value)[0])
        total += int(count) * Fraction(int(ctp[j]), j + 1)
    return float(total / n_gt)


def average_precision(frames: list[FrameEval], class_id: int, threshold: float) -> float | None:
    """AP of one class at one threshold over all frames; None when the class has no ground truth."""
    conf, tp = [], []
    n_gt = 0
    for fe in frames:
        n_gt += sum(1 for g in fe.gts if g.class_id == class_id)
        matched = {i for i, _ in fe.matchings[threshold].matches}
        for i, p in enumerate(fe.preds):
            if p.class_id == class_id:
                conf.append(p.confidence)
                tp.append(i in matched)
    if n_gt == 0:
        return None
    return ap_from_ranked(conf, tp, n_gt)


def class_ap(frames: list[FrameEval], n_classes: int, thresholds) -> dict[int, float]:
    """Per-class AP averaged over thresholds, for classes with ground truth."""
    out = {}
    for c in range(n_classes):
        aps = [average_precision(frames, c, t) for t in thresholds]
        if aps[0] is not None:
            out[c] = float(np.mean(aps))
    return out


def mean_ap(frames: list[FrameEval], n_classes: int, thresholds) -> float:
    per = class_ap(frames, n_classes, thresholds)
    return float(np.mean(list(per.values()))) if per else 0.0


# ------------------------------------------------------------------ true-positive errors

ERROR_NAMES = ("mate", "mase", "maoe", "mave", "maae")


def aligned_iou(size_a, size_b) -> float:
    """IoU of two boxes sharing center and yaw: only the sizes matter."""
    a, b = np.asarray(size_a, dtype=np.float64), np.asarray(size_b, dtype=np.float64)
    inter = float(np.prod(np.minimum(a, b)))
    return inter / (float(np.prod(a)) + float(np.prod(b)) - inter)


def pair_errors(p: Detection, g: GroundTruth) -> tuple[float, float, float, float, float]:
    ate = math.hypot(p.box[0] - g.box[0], p.box[1] - g.box[1])
    ase = 1.0 - aligned_iou(p.box[3:6], g.box[3:6])
    aoe = abs(float(wrap_angle(p.box[6] - g.box[6])))
    ave = math.hypot(p.velocity[0] - g.velocity[0], p.velocity[1] - g.velocity[1])
    aae = 0.0 if (p.moving > 0.5) == g.moving else 1.0
    return ate, ase, aoe, ave, aae


@dataclass
class TPErrors:
    values: dict[str, float]
    no_matches: bool = False


def tp_error_means(frames: list[FrameEval], threshold: float = 1.0, n_classes: int | None = None) -> TPErrors:
    """Per-class mean errors over matched pairs at ``threshold``, averaged over classes with matches."""
    by_class: dict[int, list[tuple[float, ...]]] = {}
    for fe in frames:
        for i, j in fe.matchings[threshold].matches:
            p, g = fe.preds[i], fe.gts[j]
            by_class.setdefault(p.class_id, []).append(pair_errors(p, g))
    if not by_class:
        return TPErrors({k: 1.0 for k in ERROR_NAMES}, no_matches=True)
    classes = sorted(by_class)
    means = np.array([np.mean(np.array(by_class[c]), axis=0) for c in classes])
    return TPErrors(dict(zip(ERROR_NAMES, (float(v) for v in means.mean(axis=0)))))


def composite_score(map_value: float, errors: dict[str, float] | TPErrors) -> float:
    errs = errors.values if isinstance(errors, TPErrors) else errors
    return (5.0 * map_value + sum(max(0.0, 1.0 - errs[k]) for k in ERROR_NAMES)) / 10.0


# ------------------------------------------------------------------ reports


@dataclass
class MetricsReport:
    protocol: str
    seed: int
    config_hash: str
    map: float | None = None
    composite: float | None = None
    errors: dict[str, float] | None = None
    no_matches: bool = False
    per_class: dict[str, float] = field(default_factory=dict)
    per_threshold: dict[str, float] = field(default_factory=dict)
    per_condition: dict[str, float] = field(default_factory=dict)
    per_subset: dict[str, float] = field(default_factory=dict)
    zero_shot_acc: float | None = None
    trainable_fraction: float | None = None

    def to_json(self) -> dict:
        errs = self.errors or {}
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "map": self.map,
            "composite": self.composite,
            **{k: errs.get(k) for k in ERROR_NAMES},
            "no_matches": self.no_matches,
            "per_class": self.per_class,
            "per_threshold": self.per_threshold,
            "per_condition": self.per_condition,
            "per_subset": self.per_subset,
            "zero_shot_acc": self.zero_shot_acc,
            "trainable_fraction": self.trainable_fraction,
        }


def _check_manifest(cfg: RunConfig, manifest: DatasetManifest) -> None:
    if manifest.config_hash != cfg.dataset_hash():
        raise ManifestError(
            f"manifest {manifest.split} was generated with dataset hash {manifest.config_hash}, "
            f"checkpoint expects {cfg.dataset_hash()}"
        )


def _frames(manifest: DatasetManifest) -> list[FrameRecord]:
    return [f for r in manifest.records for f in r.frames]


def score_frames(model: PeftDmlModel, frames: list[FrameRecord], mask, ecfg: EvalConfig) -> list[FrameEval]:
    preds = predict_frames(model, frames, mask, ecfg.dedup_radius)
    return evaluate_frames(preds, [ground_truth(f) for f in frames], ecfg.thresholds)


def _trainable_fraction(model: PeftDmlModel) -> float:
    return trainability_report(model.params).fraction


def eval_standard(model: PeftDmlModel, cfg: RunConfig, manifest: DatasetManifest) -> MetricsReport:
    _check_manifest(cfg, manifest)
    ecfg = cfg.eval
    frames = score_frames(model, _frames(manifest), None, ecfg)
    n = model.n_classes
    m = mean_ap(frames, n, ecfg.thresholds)
    errs = tp_error_means(frames, ecfg.tp_threshold)
    return MetricsReport(
        "standard",
        cfg.seed,
        cfg.hash(),
        map=m,
        composite=composite_score(m, errs),
        errors=errs.values,
        no_matches=errs.no_matches,
        per_class={str(c): v for c, v in class_ap(frames, n, ecfg.thresholds).items()},
        per_threshold={f"{t:g}": mean_ap(frames, n, [t]) for t in ecfg.thresholds},
        trainable_fraction=_trainable_fraction(model),
    )


def subset_name(subset) -> str:
    return "+".join(m for m in MODALITIES if m in subset)


def subset_mask(subset) -> np.ndarray:
    unknown = set(subset) - set(MODALITIES)
    if unknown or not subset:
        raise ConfigError(f"invalid modality subset {sorted(subset)}")
    return np.array([m in subset for m in MODALITIES])


def eval_dropout(model: PeftDmlModel, cfg: RunConfig, manifest: DatasetManifest, subsets=None) -> MetricsReport:
    """mAP for each modality subset, with every other modality masked out."""
    _check_manifest(cfg, manifest)
    ecfg = cfg.eval
    subsets = ecfg.subsets if subsets is None else subsets
    frames = _frames(manifest)
    per = {}
    for s in subsets:
        fe = score_frames(model, frames, subset_mask(s), ecfg)
        per[subset_name(s)] = mean_ap(fe, model.n_classes, ecfg.thresholds)
    return MetricsReport("dropout", cfg.seed, cfg.hash(), per_subset=per, trainable_fraction=_trainable_fraction(model))


def eval_weather(model: PeftDmlModel, cfg: RunConfig, manifest: DatasetManifest) -> MetricsReport:
    """mAP at the weather threshold per condition bucket, plus the total."""
    _check_manifest(cfg, manifest)
    ecfg = cfg.eval
    thr = [ecfg.weather_threshold]
    evals = score_frames(model, _frames(manifest), None, EvalConfig(thr, ecfg.weather_threshold, thr[0], ecfg.dedup_radius))
    weathers = [r.weather for r in manifest.records for _ in r.frames]
    per = {}
    for w in WEATHERS:
        bucket = [fe for fe, wf in zip(evals, weathers) if wf == w]
        per[w] = mean_ap(bucket, model.n_classes, thr) if bucket else 0.0
    per["total"] = mean_ap(evals, model.n_classes, thr)
    return MetricsReport("weather", cfg.seed, cfg.hash(), per_condition=per, trainable_fraction=_trainable_fraction(model))


# ------------------------------------------------------------------ zero-shot


def _embeddings(model: PeftDmlModel, frames: list[FrameRecord], modality: str):
    """Shared-space embeddings of every available, object-assigned candidate in one modality."""
    j = MODALITIES.index(modality)
    zs, labels = [], []
    for start in range(0, len(frames), EVAL_CHUNK):
        chunk = frames[start : start + EVAL_CHUNK]
        batch = make_batch(chunk)
        rows = np.flatnonzero(batch.available[:, j] & (batch.labels < model.n_classes))
        if rows.size == 0:
            continue
        with T.no_grad():
            z = model.embed(modality, batch.features[modality][rows]).data
        zs.append(z)
        labels.append(batch.labels[rows])
    if not zs:
        return np.zeros((0, model.config.embed_dim)), np.zeros(0, dtype=np.int64)
    return np.concatenate(zs), np.concatenate(labels)


def class_prototypes(embeddings: dict[str, tuple[np.ndarray, np.ndarray]], n_classes: int) -> dict[int, np.ndarray]:
    """Unit-norm mean embedding per class over every modality that observed it."""
    protos = {}
    for c in range(n_classes):
        parts = [z[y == c] for z, y in embeddings.values() if np.any(y == c)]
        if not parts:
            continue
        mean = np.concatenate(parts).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            continue
        protos[c] = mean / norm
    return protos


def nearest_prototype(z: np.ndarray, protos: dict[int, np.ndarray]) -> np.ndarray:
    classes = np.array(sorted(protos))
    mat = np.stack([protos[c] for c in classes])
    d = np.linalg.norm(z[:, None, :] - mat[None, :, :], axis=2)
    return classes[np.argmin(d, axis=1)]


def eval_zero_shot(model: PeftDmlModel, cfg: RunConfig, train: DatasetManifest, test: DatasetManifest) -> MetricsReport:
    """Nearest-prototype accuracy on held-out (modality, class) combinations of the test split."""
    _check_manifest(cfg, train)
    _check_manifest(cfg, test)
    if not train.holdout:
        raise ConfigError("zero-shot protocol needs at least one held-out (modality, class) pair")
    mods = [m for m in MODALITIES if m in cfg.loss.metric_modalities]
    train_frames = _frames(train)
    protos = class_prototypes({m: _embeddings(model, train_frames, m) for m in mods}, model.n_classes)
    correct = total = 0
    test_frames = _frames(test)
    for m, c in train.holdout:
        z, y = _embeddings(model, test_frames, m)
        z = z[y == c]
        if z.shape[0] == 0:
            continue
        correct += int(np.sum(nearest_prototype(z, protos) == c))
        total += z.shape[0]
    if total == 0:
        raise ContractError("no held-out samples in the test split")
    return MetricsReport(
        "zeroshot", cfg.seed, cfg.hash(), zero_shot_acc=correct / total, trainable_fraction=_trainable_fraction(model)
    )


def all_subsets() -> list[tuple[str, ...]]:
    return [s for k in range(1, len(MODALITIES) + 1) for s in combinations(MODALITIES, k)]
