"""Masked cross-attention + gated fusion of modality embeddings, and the detection head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import MODALITIES
from .errors import AvailabilityError, ContractError, NumericDomainError
from .params import ParameterSet
from .peft import LinearLayer, linear
from .tensor import Tensor
from .world import Box3D, wrap_angle

ANCHOR_GEOM_DIM = 8
BOX_DIM = 8  # dx, dy, dz, dlog w, dlog l, dlog h, sin dyaw, cos dyaw


@dataclass
class FusionModule:
    query: Tensor  # (d,)
    key: Tensor  # (d, d)
    value: Tensor  # (d, d)
    gate_w: dict[str, Tensor]  # (d,) per modality
    gate_b: dict[str, Tensor]  # scalar per modality

    @property
    def dim(self) -> int:
        return self.query.shape[0]


def fusion_module(params: ParameterSet, dim: int, rng: np.random.Generator, modalities=MODALITIES) -> FusionModule:
    s = 1.0 / math.sqrt(dim)
    q = params.add("fusion.query", rng.normal(0, s, size=dim))
    k = params.add("fusion.key", rng.normal(0, s, size=(dim, dim)))
    v = params.add("fusion.value", rng.normal(0, s, size=(dim, dim)))
    gw = {m: params.add(f"fusion.gate.{m}.w", rng.normal(0, 0.1 * s, size=dim)) for m in modalities}
    gb = {m: params.add(f"fusion.gate.{m}.b", np.array(0.0)) for m in modalities}
    return FusionModule(q, k, v, gw, gb)


def _prepare(embeddings: dict, mask):
    mask = np.asarray(mask, dtype=bool)
    single = mask.ndim == 1
    if single:
        mask = mask[None, :]
        embeddings = {m: T.reshape(T.as_tensor(z), (1, -1)) for m, z in embeddings.items()}
    else:
        embeddings = {m: T.as_tensor(z) for m, z in embeddings.items()}
    if mask.shape[1] != len(MODALITIES):
        raise ContractError(f"mask must have {len(MODALITIES)} columns")
    if not np.all(mask.any(axis=1)):
        raise AvailabilityError("every sample needs at least one available modality")
    for j, m in enumerate(MODALITIES):
        if mask[:, j].any() and m not in embeddings:
            raise ContractError(f"modality {m} is unmasked but has no embedding")
    return embeddings, mask, single


def _active(mask: np.ndarray) -> list[tuple[int, str]]:
    return [(j, m) for j, m in enumerate(MODALITIES) if mask[:, j].any()]


def _gates(embeddings, mask, fusion: FusionModule) -> Tensor:
    n = mask.shape[0]
    cols = []
    for j, m in enumerate(MODALITIES):
        if mask[:, j].any():
            cols.append(T.sigmoid(T.matmul(embeddings[m], fusion.gate_w[m]) + fusion.gate_b[m]))
        else:
            cols.append(T.Tensor(np.zeros(n)))
    g = T.mul(T.stack_cols(cols), T.Tensor(mask.astype(np.float64)))
    return T.div_rows(g, T.sum(g, axis=1))


def gate_weights(embeddings: dict, mask, fusion: FusionModule) -> Tensor:
    """Masked, normalized gates ``mask_m * g_m / sum(surviving g)`` with ``g_m = sigmoid(w_m . z_m + b_m)``."""
    embeddings, mask, single = _prepare(embeddings, mask)
    out = _gates(embeddings, mask, fusion)
    return T.reshape(out, (-1,)) if single else out


def attention_weights(embeddings: dict, mask, fusion: FusionModule) -> Tensor:
    embeddings, mask, single = _prepare(embeddings, mask)
    out = _attention(embeddings, mask, fusion)
    return T.reshape(out, (-1,)) if single else out


def _attention(embeddings, mask, fusion: FusionModule) -> Tensor:
    n = mask.shape[0]
    kq = T.matmul(T.transpose(fusion.key), fusion.query) * (1.0 / math.sqrt(fusion.dim))
    cols = [
        T.matmul(embeddings[m], kq) if mask[:, j].any() else T.Tensor(np.zeros(n)) for j, m in enumerate(MODALITIES)
    ]
    return T.masked_softmax(T.stack_cols(cols), mask)


def fuse(embeddings: dict, mask, fusion: FusionModule) -> Tensor:
    """Fused unit-norm embedding per sample.

    Attention scores ``q . (K z_m) / sqrt(d)`` go through a masked softmax; the
    context ``sum a_m V z_m`` is added to the gated sum ``sum g~_m z_m`` and the
    result is renormalized. Masked modalities contribute exact zeros, so their
    embeddings (if present at all) never affect the output.
    """
    embeddings, mask, single = _prepare(embeddings, mask)
    att = _attention(embeddings, mask, fusion)
    gates = _gates(embeddings, mask, fusion)
    acc = None
    for j, m in _active(mask):
        z = embeddings[m]
        term = T.mul_rows(T.matmul(z, T.transpose(fusion.value)), T.column(att, j)) + T.mul_rows(z, T.column(gates, j))
        acc = term if acc is None else acc + term
    out = T.normalize_rows(acc)
    return T.reshape(out, (-1,)) if single else out


# ------------------------------------------------------------------ detection head


@dataclass
class DetectionHead:
    hidden: LinearLayer
    cls: LinearLayer
    box: LinearLayer
    vel: LinearLayer
    attr: LinearLayer


def detection_head(params: ParameterSet, dim: int, hidden: int, n_classes: int, rng: np.random.Generator) -> DetectionHead:
    h = linear(params, "detect.hidden", dim + ANCHOR_GEOM_DIM, hidden, rng)
    cls = linear(params, "detect.cls", hidden, n_classes + 1, rng, std=0.01)
    box = linear(params, "detect.box", hidden, BOX_DIM, rng, std=0.01)
    vel = linear(params, "detect.vel", hidden, 2, rng, std=0.01)
    attr = linear(params, "detect.attr", hidden, 1, rng, std=0.01)
    # start from "mostly background" and "no yaw change"
    cls.bias.data[-1] = 2.0
    box.bias.data[7] = 1.0
    return DetectionHead(h, cls, box, vel, attr)


@dataclass
class DetectionOutput:
    logits: Tensor  # (n, C + 1), last column is background
    box: Tensor  # (n, 8)
    velocity: Tensor  # (n, 2)
    attribute: Tensor  # (n, 1) moving logit


def anchor_geometry(anchors: np.ndarray) -> np.ndarray:
    """(n, 7) anchors -> (n, 8) head inputs (x, y scaled; yaw as sin/cos)."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    return np.column_stack([a[:, 0] / 20.0, a[:, 1] / 20.0, a[:, 2], a[:, 3], a[:, 4], a[:, 5], np.sin(a[:, 6]), np.cos(a[:, 6])])


def detect(fused, anchors, head: DetectionHead) -> DetectionOutput:
    """Per-candidate class logits, box residuals, velocity and moving logit."""
    fused = T.as_tensor(fused)
    single = fused.ndim == 1
    if single:
        fused = T.reshape(fused, (1, -1))
    x = T.concat([fused, T.Tensor(anchor_geometry(anchors))], axis=1)
    h = T.relu(head.hidden(x))
    return DetectionOutput(head.cls(h), head.box(h), head.vel(h), head.attr(h))


def decode_box(anchor: Box3D, residuals, velocity=(0.0, 0.0)) -> Box3D:
    r = np.asarray(residuals, dtype=np.float64)
    if r.shape != (BOX_DIM,) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(velocity)):
        raise NumericDomainError("box residuals must be 8 finite values")
    yaw = float(wrap_angle(anchor.yaw + math.atan2(r[6], r[7])))
    return Box3D(
        anchor.x + r[0],
        anchor.y + r[1],
        anchor.z + r[2],
        anchor.w * math.exp(r[3]),
        anchor.l * math.exp(r[4]),
        anchor.h * math.exp(r[5]),
        yaw,
        float(velocity[0]),
        float(velocity[1]),
    )


def decode_boxes(anchors: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Vectorized decode: (n, 7) anchors + (n, 8) residuals -> (n, 7) boxes."""
    a = np.asarray(anchors).reshape(-1, 7)
    r = np.asarray(residuals).reshape(-1, BOX_DIM)
    out = np.empty_like(a)
    out[:, 0:3] = a[:, 0:3] + r[:, 0:3]
    out[:, 3:6] = a[:, 3:6] * np.exp(r[:, 3:6])
    out[:, 6] = wrap_angle(a[:, 6] + np.arctan2(r[:, 6], r[:, 7]))
    return out
