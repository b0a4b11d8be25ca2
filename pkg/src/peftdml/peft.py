"""LoRA-wrapped linear layers, bottleneck adapters, and trainability accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .params import ParameterSet
from .tensor import Tensor


@dataclass
class LinearLayer:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)
    prefix: str = ""

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.prefix}: expected {self.in_features} inputs, got {x.shape}")
        if x.ndim == 1:
            return T.matmul(self.weight, x) + self.bias
        return T.linear(x, self.weight, self.bias)


def linear(
    params: ParameterSet,
    prefix: str,
    n_in: int,
    n_out: int,
    rng: np.random.Generator,
    frozen: bool = False,
    std: float | None = None,
) -> LinearLayer:
    """Register a He-initialized linear layer under ``prefix``."""
    std = np.sqrt(2.0 / n_in) if std is None else std
    w = params.add(f"{prefix}.weight", rng.normal(0.0, std, size=(n_out, n_in)), frozen=frozen)
    b = params.add(f"{prefix}.bias", np.zeros(n_out), frozen=frozen)
    return LinearLayer(w, b, prefix)


@dataclass
class LoRALinear:
    base: LinearLayer
    A: Tensor  # (r, in)
    B: Tensor  # (out, r)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x) -> Tensor:
        return lora_forward(self, x)


def lora_wrap(
    base: LinearLayer,
    r: int,
    alpha: float | None = None,
    init_seed: int = 0,
    params: ParameterSet | None = None,
) -> LoRALinear:
    """Freeze ``base`` and attach trainable low-rank factors (A Gaussian, B zero).

    With ``params`` given, A and B are registered at ``<base.prefix>.lora.{A,B}``
    and the base paths are frozen in that set.
    """
    if not 1 <= r <= min(base.in_features, base.out_features):
        raise ConfigError(f"LoRA rank {r} outside [1, {min(base.in_features, base.out_features)}]")
    alpha = 2.0 * r if alpha is None else float(alpha)
    if alpha <= 0:
        raise ConfigError("LoRA alpha must be positive")
    rng = np.random.Generator(np.random.PCG64(init_seed))
    a = rng.normal(0.0, np.sqrt(1.0 / r), size=(r, base.in_features))
    b = np.zeros((base.out_features, r))
    if params is not None:
        params.freeze(f"{base.prefix}.weight")
        params.freeze(f"{base.prefix}.bias")
        A = params.add(f"{base.prefix}.lora.A", a)
        B = params.add(f"{base.prefix}.lora.B", b)
    else:
        A, B = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    base.weight.requires_grad = False
    base.bias.requires_grad = False
    return LoRALinear(base, A, B, alpha)


def lora_forward(layer: LoRALinear, x, relu: bool = False) -> Tensor:
    """``base(x) + (alpha / r) * B A x`` for a vector or a row batch, optionally rectified."""
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.lora_linear(x, layer.base.weight, layer.base.bias, layer.A, layer.B, layer.scale, relu)
    out = layer.base(x) + T.matmul(layer.B, T.matmul(layer.A, x)) * layer.scale
    return T.relu(out) if relu else out


def merge_lora(layer: LoRALinear) -> LinearLayer:
    """Fold the low-rank update into a plain layer with fresh tensors."""
    w = layer.base.weight.data + layer.scale * (layer.B.data @ layer.A.data)
    return LinearLayer(Tensor(w), Tensor(layer.base.bias.data.copy()), layer.base.prefix)


@dataclass
class AdapterBlock:
    down: LinearLayer  # (bottleneck, in)
    up: LinearLayer  # (in, bottleneck), zero at init

    def __call__(self, x) -> Tensor:
        return adapter_forward(self, x)


def adapter(params: ParameterSet, prefix: str, n: int, bottleneck: int, rng: np.random.Generator) -> AdapterBlock:
    down = linear(params, f"{prefix}.down", n, bottleneck, rng)
    up = linear(params, f"{prefix}.up", bottleneck, n, rng, std=0.0)
    return AdapterBlock(down, up)


def adapter_forward(block: AdapterBlock, x) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != block.down.in_features:
        raise ShapeError(f"adapter expects width {block.down.in_features}, got {x.shape}")
    if x.ndim == 2:
        return T.adapter(x, block.down.weight, block.down.bias, block.up.weight, block.up.bias)
    return x + block.up(T.relu(block.down(x)))


GROUPS = ("backbone", "lora", "adapter", "projection", "fusion", "detection", "other")


def parameter_group(path: str) -> str:
    if ".lora." in path:
        return "lora"
    if ".adapter" in path:
        return "adapter"
    if path.startswith("encoder."):
        return "backbone"
    if path.startswith("projection."):
        return "projection"
    if path.startswith("fusion."):
        return "fusion"
    if path.startswith("detect."):
        return "detection"
    return "other"


@dataclass
class TrainabilityReport:
    total: int
    trainable: int
    fraction: float
    groups: dict[str, dict[str, int]] = field(default_factory=dict)


def trainability_report(params: ParameterSet) -> TrainabilityReport:
    """Exact parameter counts by enumeration, split by group and frozen status."""
    groups = {g: {"total": 0, "trainable": 0} for g in GROUPS}
    total = trainable = 0
    for path, t in params.items():
        n = int(t.data.size)
        g = groups[parameter_group(path)]
        g["total"] += n
        total += n
        if path not in params.frozen:
            g["trainable"] += n
            trainable += n
    groups = {k: v for k, v in groups.items() if v["total"]}
    return TrainabilityReport(total, trainable, trainable / total if total else 0.0, groups)
