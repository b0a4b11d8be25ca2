"""Named parameter storage, freezing, Adam updates, checkpoints and gradient checks."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, ManifestError
from .tensor import Tensor, backward, no_grad

CHECKPOINT_VERSION = 1


def encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_array(text: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)
    return arr.reshape(tuple(shape))


class ParameterSet:
    """Ordered map from parameter path to :class:`Tensor` plus the set of frozen paths.

    Frozen tensors have ``requires_grad=False`` so gradients never reach them,
    and :func:`optimizer_step` skips them.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, path: str, value: np.ndarray, frozen: bool = False) -> Tensor:
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self._params[path] = t
        if frozen:
            self.frozen.add(path)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._params if p.startswith(prefix)]

    def freeze(self, prefix: str) -> None:
        """Freeze every path starting with ``prefix``."""
        for path in self.paths(prefix):
            self.frozen.add(path)
            self._params[path].requires_grad = False
            self._params[path].grad = None

    def unfreeze(self, prefix: str) -> None:
        for path in self.paths(prefix):
            self.frozen.discard(path)
            self._params[path].requires_grad = True

    def trainable(self) -> list[str]:
        return [p for p in self._params if p not in self.frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of trainable paths; paths that did not participate get zeros."""
        return {
            p: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for p, t in self._params.items()
            if p not in self.frozen
        }

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {p: self._params[p].data.copy() for p in self.paths(prefix)}

    def update_from(self, other: "ParameterSet", prefix: str = "") -> None:
        """Copy values (and frozen status) of ``other``'s paths under ``prefix`` into this set."""
        for path in other.paths(prefix):
            if path not in self._params:
                raise ContractError(f"unknown parameter path {path!r}")
            if self._params[path].shape != other[path].shape:
                raise ContractError(f"shape mismatch for {path!r}")
            self._params[path].data = other[path].data.copy()
            if path in other.frozen:
                self.freeze(path)

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": {p: {"shape": list(t.shape), "data": encode_array(t.data)} for p, t in self._params.items()},
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParameterSet":
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ManifestError(f"unsupported checkpoint version {payload.get('version')!r}")
        ps = cls()
        frozen = set(payload.get("frozen", []))
        for path, rec in payload["params"].items():
            ps.add(path, decode_array(rec["data"], rec["shape"]), frozen=path in frozen)
        unknown = frozen - set(ps._params)
        if unknown:
            raise ManifestError(f"frozen paths not in params: {sorted(unknown)[:3]}")
        return ps

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ParameterSet":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_dict(payload)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update over the trainable paths, in place."""
    trainable = params.trainable()
    missing = [p for p in trainable if p not in grads]
    if missing:
        raise ContractError(f"missing gradients for trainable parameters: {missing[:3]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for path in trainable:
        g = grads[path]
        t = params[path]
        if g.shape != t.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {t.shape} for {path!r}")
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(t.data)
            state.v[path] = np.zeros_like(t.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        sq = np.multiply(g, g, out=np.empty_like(v))
        sq *= 1.0 - b2
        v += sq
        # lr * m_hat / (sqrt(v_hat) + eps), computed with in-place temporaries
        denom = np.sqrt(v, out=sq)
        denom *= 1.0 / np.sqrt(c2)
        denom += state.eps
        upd = np.divide(m, denom, out=denom)
        upd *= state.lr / c1
        t.data = t.data - upd
    return state


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    eps: float
    tol: float
    floor: float
    n_coords: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    objective: Callable[[ParameterSet], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    paths: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from turning rounding noise into large ratios.
    Frozen paths are never checked.
    """
    params.zero_grad()
    backward(objective(params))
    analytic = params.grads()
    check = [p for p in (paths or params.trainable()) if p not in params.frozen]
    report: dict[str, float] = {}
    n = 0
    with no_grad():
        for path in check:
            t = params[path]
            flat = t.data.reshape(-1)
            a = analytic[path].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = objective(params).item()
                flat[i] = orig - eps
                fm = objective(params).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(a[i] - num) / max(abs(a[i]), abs(num), floor)
                worst = max(worst, err)
                n += 1
            report[path] = worst
    params.zero_grad()
    return GradCheckReport(report, all(v < tol for v in report.values()), eps, tol, floor, n)
