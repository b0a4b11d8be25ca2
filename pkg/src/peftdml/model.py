"""Model assembly and the batched forward pass over candidate frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import EGO_MODALITIES, FEATURE_DIMS, MODALITIES, LossConfig, ModelConfig
from .encoders import ModalityEncoder, ProjectionHead, add_peft, backbone, project, projection_head
from .fusion import DetectionHead, DetectionOutput, FusionModule, detect, detection_head, fuse, fusion_module
from .losses import DetTargets, LossBreakdown, consistency_loss, det_loss, match_instances, mine_triplets, total_loss, triplet_loss
from .params import ParameterSet
from .tensor import Tensor
from .world import FrameRecord


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def build_backbones(cfg: ModelConfig, seed: int) -> tuple[ParameterSet, dict[str, ModalityEncoder]]:
    """Fresh, trainable backbone MLPs for every modality (the pretraining target)."""
    params = ParameterSet()
    rng = _rng(seed, 1)
    encoders = {m: backbone(params, m, FEATURE_DIMS[m], cfg.hidden, rng) for m in MODALITIES}
    return params, encoders


@dataclass
class PeftDmlModel:
    params: ParameterSet
    config: ModelConfig
    n_classes: int
    encoders: dict[str, ModalityEncoder]
    heads: dict[str, ProjectionHead]
    fusion: FusionModule
    detector: DetectionHead

    def embed(self, modality: str, x, peft: bool = True) -> Tensor:
        return project(self.encoders[modality](x, peft=peft), self.heads[modality])


def build_model(
    cfg: ModelConfig, n_classes: int, pretrained: ParameterSet | None = None, seed: int | None = None
) -> PeftDmlModel:
    """Backbones (copied from ``pretrained`` when given, then frozen), PEFT layers, heads."""
    seed = cfg.init_seed if seed is None else seed
    params, encoders = build_backbones(cfg, seed)
    if pretrained is not None:
        params.update_from(pretrained, "encoder.")
    for k, m in enumerate(MODALITIES):
        add_peft(params, encoders[m], cfg.lora_rank, cfg.lora_alpha, cfg.adapter_bottleneck, seed * 1000 + k)
    rng = _rng(seed, 2)
    heads = {m: projection_head(params, m, cfg.hidden, cfg.embed_dim, rng) for m in MODALITIES}
    fusion = fusion_module(params, cfg.embed_dim, rng)
    detector = detection_head(params, cfg.embed_dim, cfg.head_hidden, n_classes, rng)
    return PeftDmlModel(params, cfg, n_classes, encoders, heads, fusion, detector)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    features: dict[str, np.ndarray]  # (N, dim) per modality
    available: np.ndarray  # (N, 5) effective availability
    anchors: np.ndarray  # (N, 7)
    labels: np.ndarray  # (N,)
    instance_ids: np.ndarray  # (N,) -1 for background
    gt_boxes: np.ndarray  # (N, 9)
    attributes: np.ndarray  # (N,) bool
    frame_index: np.ndarray  # (N,)
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (frame a, frame b) temporal pairs

    @property
    def size(self) -> int:
        return len(self.labels)

    def targets(self, n_classes: int) -> DetTargets:
        return DetTargets(self.labels, self.anchors, self.gt_boxes, self.labels < n_classes)


def make_batch(frames: list[FrameRecord], masks=None, pairs=None) -> Batch:
    """Stack frames into one candidate batch. ``masks`` holds an optional (5,) bool per frame."""
    feats = {m: np.concatenate([f.features[m] for f in frames]) for m in MODALITIES}
    avail = []
    for i, f in enumerate(frames):
        a = np.column_stack([f.available[m] for m in MODALITIES])
        if masks is not None and masks[i] is not None:
            a = a & np.asarray(masks[i], dtype=bool)[None, :]
        avail.append(a)
    return Batch(
        feats,
        np.concatenate(avail),
        np.concatenate([f.anchors for f in frames]),
        np.concatenate([f.labels for f in frames]),
        np.concatenate([f.assigned for f in frames]),
        np.concatenate([f.gt_boxes() for f in frames]),
        np.concatenate([f.attributes() for f in frames]),
        np.concatenate([np.full(len(f.labels), i) for i, f in enumerate(frames)]),
        list(pairs or []),
    )


@dataclass
class ForwardResult:
    embeddings: dict[str, Tensor]  # (N, d) per modality, zero rows where unavailable
    fused: Tensor  # (n_valid, d)
    output: DetectionOutput  # rows aligned with ``valid``
    valid: np.ndarray  # indices of candidates with at least one available modality


def embed_batch(model: PeftDmlModel, batch: Batch, peft: bool = True) -> dict[str, Tensor]:
    out = {}
    n = batch.size
    for j, m in enumerate(MODALITIES):
        rows = np.flatnonzero(batch.available[:, j])
        if rows.size == 0:
            continue
        x = batch.features[m]
        if m in EGO_MODALITIES:
            # ego signals are identical within a frame: encode one row per frame
            _, first, inverse = np.unique(batch.frame_index[rows], return_index=True, return_inverse=True)
            z = T.take_rows(model.embed(m, x[rows[first]], peft), inverse)
        else:
            z = model.embed(m, x[rows], peft)
        out[m] = T.scatter_rows(z, rows, n)
    return out


def forward(model: PeftDmlModel, batch: Batch, peft: bool = True) -> ForwardResult:
    emb = embed_batch(model, batch, peft)
    valid = np.flatnonzero(batch.available.any(axis=1))
    if valid.size == batch.size:
        sub_emb, mask = emb, batch.available
    else:
        sub_emb = {m: T.take_rows(z, valid) for m, z in emb.items()}
        mask = batch.available[valid]
    fused = fuse(sub_emb, mask, model.fusion)
    output = detect(fused, batch.anchors[valid], model.detector)
    return ForwardResult(emb, fused, output, valid)


# ------------------------------------------------------------------ objective


def metric_term(model: PeftDmlModel, batch: Batch, emb: dict[str, Tensor], cfg: LossConfig) -> Tensor:
    parts, labels, mods = [], [], []
    for j, m in enumerate(MODALITIES):
        if m not in cfg.metric_modalities or m not in emb:
            continue
        rows = np.flatnonzero(batch.available[:, j] & (batch.labels < model.n_classes))
        if rows.size == 0:
            continue
        parts.append(T.take_rows(emb[m], rows))
        labels.append(batch.labels[rows])
        mods.append(np.full(rows.size, j))
    if not parts:
        return T.Tensor(np.array(0.0))
    e = T.concat(parts, axis=0)
    triplets = mine_triplets(e.data, np.concatenate(labels), np.concatenate(mods))
    if not triplets:
        return T.Tensor(np.array(0.0))
    a, p, k = (np.array(c) for c in zip(*triplets))
    return triplet_loss(T.take_rows(e, a), T.take_rows(e, p), T.take_rows(e, k), cfg.margin)


def consistency_term(batch: Batch, emb: dict[str, Tensor], fused_full: Tensor, cfg: LossConfig) -> Tensor:
    left, right = [], []
    sources = [(j, m, emb[m]) for j, m in enumerate(MODALITIES) if m in emb] + [(None, "fused", fused_full)]
    for fa, fb in batch.pairs:
        ra = np.flatnonzero(batch.frame_index == fa)
        rb = np.flatnonzero(batch.frame_index == fb)
        ia, ib = match_instances(batch.instance_ids[ra], batch.instance_ids[rb])
        ga, gb = ra[ia], rb[ib]
        for j, _, z in sources:
            if j is None:
                ok = batch.available[ga].any(axis=1) & batch.available[gb].any(axis=1)
            else:
                ok = batch.available[ga, j] & batch.available[gb, j]
            if ok.any():
                left.append(T.take_rows(z, ga[ok]))
                right.append(T.take_rows(z, gb[ok]))
    if cfg.cross_modal_consistency:
        idx = [j for j, m in enumerate(MODALITIES) if m in cfg.metric_modalities and m in emb]
        fg = np.flatnonzero(batch.instance_ids >= 0)
        for x, j1 in enumerate(idx):
            for j2 in idx[x + 1 :]:
                rows = fg[batch.available[fg, j1] & batch.available[fg, j2]]
                if rows.size:
                    left.append(T.take_rows(emb[MODALITIES[j1]], rows))
                    right.append(T.take_rows(emb[MODALITIES[j2]], rows))
    if not left:
        return T.Tensor(np.array(0.0))
    return consistency_loss(T.concat(left, axis=0), T.concat(right, axis=0))


def compute_loss(model: PeftDmlModel, batch: Batch, cfg: LossConfig) -> LossBreakdown:
    res = forward(model, batch)
    if res.valid.size != batch.size:
        raise ValueError("training batches need at least one available modality per candidate")
    cls, iou, orient = det_loss(res.output.logits, res.output.box, batch.targets(model.n_classes), cfg.focal_gamma)
    metric = metric_term(model, batch, res.embeddings, cfg)
    cons = consistency_term(batch, res.embeddings, res.fused, cfg)
    return total_loss(cls, iou, orient, metric, cons, cfg)
