"""Per-modality backbone encoders with LoRA/adapters, and normalizing projection heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AvailabilityError, ShapeError
from .params import ParameterSet
from .peft import AdapterBlock, LinearLayer, LoRALinear, adapter, linear, lora_forward, lora_wrap
from .tensor import Tensor


@dataclass
class ModalityEncoder:
    """Two-layer ReLU MLP. Each layer may carry a LoRA update and a serial adapter."""

    modality: str
    l1: LinearLayer
    l2: LinearLayer
    lora1: LoRALinear | None = None
    lora2: LoRALinear | None = None
    adapter1: AdapterBlock | None = None
    adapter2: AdapterBlock | None = None

    @property
    def in_features(self) -> int:
        return self.l1.in_features

    @property
    def out_features(self) -> int:
        return self.l2.out_features

    def __call__(self, x, peft: bool = True) -> Tensor:
        h = self._layer(x, self.l1, self.lora1, self.adapter1, peft)
        return self._layer(h, self.l2, self.lora2, self.adapter2, peft)

    @staticmethod
    def _layer(x, base, lora, adp, peft):
        h = lora_forward(lora, x, relu=True) if (peft and lora is not None) else T.relu(base(x))
        if peft and adp is not None:
            h = adp(h)
        return h


def backbone(params: ParameterSet, modality: str, n_in: int, hidden: int, rng: np.random.Generator) -> ModalityEncoder:
    prefix = f"encoder.{modality}"
    l1 = linear(params, f"{prefix}.l1", n_in, hidden, rng)
    l2 = linear(params, f"{prefix}.l2", hidden, hidden, rng)
    return ModalityEncoder(modality, l1, l2)


def add_peft(
    params: ParameterSet, enc: ModalityEncoder, rank: int, alpha: float | None, bottleneck: int, seed: int
) -> ModalityEncoder:
    """Freeze the backbone and attach LoRA + adapters to both layers.

    The rank is capped per layer at ``min(in, out)`` so narrow inputs (gnss has
    3 features) still accept the configured rank on the wide layer.
    """
    prefix = f"encoder.{enc.modality}"
    params.freeze(prefix)
    rng = np.random.Generator(np.random.PCG64(seed))
    for name in ("l1", "l2"):
        base = getattr(enc, name)
        r = min(rank, base.in_features, base.out_features)
        # keep alpha / r == 2 when alpha is left at its default
        a = None if alpha is None else alpha * r / rank
        setattr(enc, f"lora{name[1]}", lora_wrap(base, r, a, int(rng.integers(2**31)), params))
        setattr(enc, f"adapter{name[1]}", adapter(params, f"{prefix}.{name}.adapter", base.out_features, bottleneck, rng))
    return enc


def encode(features, encoder: ModalityEncoder, available=None, peft: bool = True) -> Tensor:
    """Latent vector(s) for available candidates; masked ones must be filtered by the caller."""
    x = T.as_tensor(features)
    if x.shape[-1] != encoder.in_features:
        raise ShapeError(f"{encoder.modality}: expected {encoder.in_features} features, got {x.shape[-1]}")
    if available is not None and not np.all(available):
        raise AvailabilityError(f"{encoder.modality} features are unavailable; mask them instead of encoding")
    return encoder(x, peft=peft)


@dataclass
class ProjectionHead:
    layer: LinearLayer

    def __call__(self, latent) -> Tensor:
        return project(latent, self)


def projection_head(params: ParameterSet, modality: str, n_in: int, dim: int, rng: np.random.Generator) -> ProjectionHead:
    return ProjectionHead(linear(params, f"projection.{modality}", n_in, dim, rng, std=np.sqrt(1.0 / n_in)))


def project(latent, head: ProjectionHead) -> Tensor:
    """Affine map followed by L2 normalization onto the unit sphere."""
    return T.normalize_rows(head.layer(latent))
