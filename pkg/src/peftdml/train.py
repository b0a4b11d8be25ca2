"""Backbone warm-up pretraining, the joint PEFT training loop, and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import EGO_MODALITIES, FEATURE_DIMS, MODALITIES, RunConfig, load_config, to_jsonable
from .encoders import ModalityEncoder, backbone
from .errors import ConfigError, ContractError, ManifestError, NumericDomainError, TrainingError
from .losses import LossBreakdown, focal_ce
from .model import PeftDmlModel, build_model, compute_loss, make_batch
from .params import AdamState, ParameterSet, optimizer_step
from .peft import LinearLayer, linear, trainability_report
from .world import DatasetManifest, FrameRecord, sample_dropout_mask


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def model_seed(cfg: RunConfig) -> int:
    """Initialization seed shared by pretraining and PEFT layers for one run."""
    return cfg.seed * 1000 + cfg.model.init_seed


# ------------------------------------------------------------------ pretraining


def _modality_rows(frames: list[FrameRecord], modality: str, n_classes: int):
    """Inputs and targets for one modality over a frame batch.

    Candidate modalities give one row per available candidate with a hard
    label. Ego modalities see the same signal for every candidate in a frame,
    so they give one row per frame with the frame's label histogram as a soft
    target.
    """
    if modality in EGO_MODALITIES:
        xs, targets = [], []
        for f in frames:
            avail = f.available[modality]
            if not avail.any():
                continue
            xs.append(f.features[modality][np.flatnonzero(avail)[0]])
            targets.append(np.bincount(f.labels[avail], minlength=n_classes + 1) / avail.sum())
        if not xs:
            return None, None
        return np.array(xs), np.array(targets)
    xs = np.concatenate([f.features[modality][f.available[modality]] for f in frames])
    ys = np.concatenate([f.labels[f.available[modality]] for f in frames])
    if ys.size == 0:
        return None, None
    return xs, ys


def _probe_loss(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    if targets.ndim == 2:
        return T.neg(T.mean(T.sum(T.mul(T.log_softmax(logits), T.Tensor(targets)), axis=1)))
    return focal_ce(logits, targets, gamma=0.0)


@dataclass
class ProbedBackbone:
    params: ParameterSet
    encoder: ModalityEncoder
    probe: LinearLayer
    curve: list[float] = field(default_factory=list)


def pretrain_modality(manifest: DatasetManifest, cfg: RunConfig, modality: str) -> ProbedBackbone:
    """Train one backbone plus a linear probe on single-modality candidate classification."""
    n_classes = manifest.world.n_classes
    seed = model_seed(cfg)
    k = MODALITIES.index(modality)
    params = ParameterSet()
    init = _rng(seed, 1, k)
    enc = backbone(params, modality, FEATURE_DIMS[modality], cfg.model.hidden, init)
    probe = linear(params, f"probe.{modality}", cfg.model.hidden, n_classes + 1, init)
    state = AdamState(lr=cfg.pretrain.lr)
    order_rng = _rng(seed, 7, k)
    result = ProbedBackbone(params, enc, probe)
    n = len(manifest.records)
    for _ in range(cfg.pretrain.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.pretrain.batch_pairs):
            frames = [f for i in order[start : start + cfg.pretrain.batch_pairs] for f in manifest.records[i].frames]
            x, y = _modality_rows(frames, modality, n_classes)
            if x is None:
                continue
            params.zero_grad()
            loss = _probe_loss(probe(enc(x, peft=False)), y)
            T.backward(loss)
            optimizer_step(params, params.grads(), state)
            result.curve.append(float(loss.data))
    return result


def probe_accuracy(probed: ProbedBackbone, manifest: DatasetManifest) -> float:
    """Top-1 accuracy of the pretraining probe on the candidate rows of ``manifest``."""
    frames = [f for r in manifest.records for f in r.frames]
    m = probed.encoder.modality
    if m in EGO_MODALITIES:
        raise ContractError("probe accuracy is defined for candidate modalities only")
    x, y = _modality_rows(frames, m, manifest.world.n_classes)
    if x is None:
        raise ContractError(f"no available {m} rows")
    with T.no_grad():
        logits = probed.probe(probed.encoder(x, peft=False)).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


def pretrain_backbones(manifest: DatasetManifest, cfg: RunConfig) -> ParameterSet:
    """Pretrain every backbone separately, drop the probes, and freeze the result."""
    if not manifest.records:
        raise ManifestError("cannot pretrain on an empty manifest")
    out = ParameterSet()
    for m in MODALITIES:
        probed = pretrain_modality(manifest, cfg, m)
        for path in probed.params.paths("encoder."):
            out.add(path, probed.params[path].data.copy(), frozen=True)
    return out


# ------------------------------------------------------------------ joint training


@dataclass
class Checkpoint:
    params: ParameterSet
    config: RunConfig
    dataset_hash: str
    n_classes: int
    curve: list[dict[str, float]] = field(default_factory=list)

    def model(self) -> PeftDmlModel:
        model = build_model(self.config.model, self.n_classes, seed=model_seed(self.config))
        model.params.update_from(self.params)
        return model

    def to_dict(self) -> dict:
        return {
            "config": to_jsonable(self.config),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "dataset_hash": self.dataset_hash,
            "n_classes": self.n_classes,
            "curve": self.curve,
            "params": self.params.to_dict(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read checkpoint {path}: {exc}") from exc
        cfg = load_config(payload["config"])
        if cfg.hash() != payload.get("config_hash"):
            raise ManifestError(f"checkpoint {path}: stored config hash does not match its config")
        return cls(ParameterSet.from_dict(payload["params"]), cfg, payload["dataset_hash"], payload["n_classes"], payload["curve"])


def pair_mask(frames: list[FrameRecord], rng: np.random.Generator, probs, max_tries: int = 100) -> np.ndarray:
    """Dropout mask for a frame pair, resampled until every candidate keeps a modality."""
    native = np.concatenate([np.column_stack([f.available[m] for m in MODALITIES]) for f in frames])
    for _ in range(max_tries):
        mask = sample_dropout_mask(rng, probs)
        if np.all((native & mask[None, :]).any(axis=1)):
            return mask
    return np.ones(len(MODALITIES), dtype=bool)


def _check_finite(lb: LossBreakdown, step: int) -> None:
    vals = lb.values()
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingError(f"non-finite loss at step {step}: {vals}", {"step": step, **vals})


def train(
    cfg: RunConfig, manifest: DatasetManifest, pretrained: ParameterSet, max_steps: int | None = None
) -> Checkpoint:
    """Joint PEFT training on frame pairs; deterministic given the config and seed."""
    if not manifest.records:
        raise ManifestError("cannot train on an empty manifest")
    if cfg.train.epochs < 1 or cfg.train.batch_pairs < 1 or cfg.train.lr <= 0:
        raise ConfigError("train: epochs, batch_pairs and lr must be positive")
    n_classes = manifest.world.n_classes
    model = build_model(cfg.model, n_classes, pretrained, seed=model_seed(cfg))
    params = model.params
    state = AdamState(lr=cfg.train.lr)
    rng = _rng(cfg.seed, 11)
    limit = max_steps if max_steps is not None else cfg.train.max_steps
    curve: list[dict[str, float]] = []
    n = len(manifest.records)
    step = 0
    for _ in range(cfg.train.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.train.batch_pairs):
            if limit is not None and step >= limit:
                break
            frames, masks, pairs = [], [], []
            for i in order[start : start + cfg.train.batch_pairs]:
                pair = manifest.records[i].frames
                mask = pair_mask(pair, rng, cfg.train.dropout_prob)
                pairs.append((len(frames), len(frames) + 1))
                frames.extend(pair)
                masks.extend([mask, mask])
            batch = make_batch(frames, masks, pairs)
            params.zero_grad()
            step += 1
            try:
                lb = compute_loss(model, batch, cfg.loss)
            except NumericDomainError as exc:
                raise TrainingError(f"numeric failure at step {step}: {exc}", {"step": step}) from exc
            _check_finite(lb, step)
            T.backward(lb.total)
            optimizer_step(params, params.grads(), state)
            curve.append({"step": step, **lb.values()})
    params.zero_grad()
    return Checkpoint(params, cfg, manifest.config_hash, n_classes, curve)


def trainable_fraction(cfg: RunConfig, n_classes: int) -> float:
    return trainability_report(build_model(cfg.model, n_classes).params).fraction
