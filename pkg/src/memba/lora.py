"""Low-rank adapters on frozen linear maps.

An adapted map computes ``W x + s * up (down x)``.  ``up`` starts at zero, so
attaching an adapter never changes a model's output until it is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import tensor as tn
from .rng import stream
from .tensor import Parameter, ShapeError, Tensor

SITES = ("in_proj", "out_proj", "x_proj", "dt_proj", "gate_in", "gate_out")


class PlacementConfig(BaseModel):
    """Which projections carry adapters, and at what rank."""

    model_config = ConfigDict(extra="forbid")

    in_proj: bool = True
    out_proj: bool = True
    x_proj: bool = False
    dt_proj: bool = False
    gate_in: bool = False
    gate_out: bool = False
    rank: dict[str, int] = {}
    default_rank: int = 4
    scale: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        unknown = set(self.rank) - set(SITES)
        if unknown:
            raise ValueError(f"rank given for unknown sites: {sorted(unknown)}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        return self

    def enabled(self) -> list[str]:
        return [s for s in SITES if getattr(self, s)]

    def rank_for(self, site: str) -> int:
        return self.rank.get(site, self.default_rank)

    def require_any(self) -> None:
        if not self.enabled():
            raise ValueError("PEFT mode needs at least one adapter site enabled")


@dataclass
class LoRAAdapter:
    down: Parameter  # (r, d_in)
    up: Parameter  # (d_out, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    def delta(self) -> np.ndarray:
        return self.scale * (self.up.data @ self.down.data)

    def parameters(self) -> list[Parameter]:
        return [self.down, self.up]


def make_adapter(name: str, d_in: int, d_out: int, rank: int, scale: float, seed: int, dtype=np.float64) -> LoRAAdapter:
    if rank < 1 or rank >= min(d_in, d_out):
        raise ValueError(f"LoRA rank {rank} is not low-rank for a {d_out}x{d_in} map")
    g = stream(seed, name, "lora")
    bound = 1.0 / math.sqrt(d_in)
    down = Parameter(f"{name}.lora.down", Tensor(g.uniform(-bound, bound, (rank, d_in)).astype(dtype)))
    up = Parameter(f"{name}.lora.up", Tensor(np.zeros((d_out, rank), dtype=dtype)))
    return LoRAAdapter(down, up, scale)


def adapted_forward(base_weight, adapter: LoRAAdapter | None, x) -> Tensor:
    """``x @ W^T + s * (x @ down^T) @ up^T`` for ``W`` of shape (d_out, d_in)."""
    w = tn.as_tensor(base_weight)
    x = tn.as_tensor(x)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    y = tn.matmul(x, tn.transpose(w))
    if adapter is None:
        return y
    if adapter.down.shape[1] != w.shape[1] or adapter.up.shape[0] != w.shape[0]:
        raise ShapeError(f"adapter {adapter.up.shape}x{adapter.down.shape} does not fit weight {w.shape}")
    low = tn.matmul(tn.matmul(x, tn.transpose(adapter.down.value)), tn.transpose(adapter.up.value))
    return tn.add(y, tn.mul(low, adapter.scale)) if adapter.scale != 1.0 else tn.add(y, low)


def merge(base_weight, adapter: LoRAAdapter) -> np.ndarray:
    """New array ``W + s * up @ down``; ``base_weight`` is left untouched."""
    w = base_weight.data if isinstance(base_weight, (Tensor, Parameter)) else np.asarray(base_weight)
    return w + adapter.delta()


class Linear:
    """Dense map with optional bias and optional adapter."""

    def __init__(self, name: str, d_in: int, d_out: int, seed: int, bias: bool = False,
                 zero_init: bool = False, dtype=np.float64):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            bound = 1.0 / math.sqrt(d_in)  # Kaiming-uniform with a = sqrt(5)
            w = stream(seed, name, "weight").uniform(-bound, bound, (d_out, d_in))
        self.weight = Parameter(f"{name}.weight", Tensor(w.astype(dtype)))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(d_out, dtype=dtype))) if bias else None
        self.adapter: LoRAAdapter | None = None

    def attach(self, rank: int, scale: float, seed: int) -> LoRAAdapter:
        self.adapter = make_adapter(self.name, self.d_in, self.d_out, rank, scale, seed, self.weight.data.dtype)
        return self.adapter

    def __call__(self, x) -> Tensor:
        y = adapted_forward(self.weight.value, self.adapter, x)
        if self.bias is not None:
            y = tn.add(y, self.bias.value)
        return y

    def base_parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def parameters(self) -> list[Parameter]:
        extra = self.adapter.parameters() if self.adapter else []
        return self.base_parameters() + extra

    def merged(self) -> np.ndarray:
        return merge(self.weight, self.adapter) if self.adapter else self.weight.data.copy()


def count_trainable(params: Iterable[Parameter]) -> tuple[int, float]:
    """(trainable scalar count, percent of all scalars)."""
    params = list(params)
    total = int(np.sum([p.size for p in params])) if params else 0
    count = int(np.sum([p.size for p in params if p.trainable])) if params else 0
    return count, (100.0 * count / total if total else 0.0)


def iter_adapters(linears: Iterable[Linear]) -> Iterator[LoRAAdapter]:
    for lin in linears:
        if lin.adapter is not None:
            yield lin.adapter
