"""Leaky Integrate Membrane (LIM) gating.

The sequence is trimmed to ``T * floor(L / T)`` tokens and cut into ``T``
chunks.  The membrane steps once per chunk, so token ``j`` of chunk ``i + 1``
integrates token ``j`` of chunk ``i``::

    u <- reset(tau * u + x_chunk, v_th)

The chunk membranes are concatenated (zero-padded back to ``L``) and their
mean over chunks is handed to the next layer as its starting membrane.  LIM
has no learnable parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LIMConfig:
    num_chunks: int = 4
    tau: float = 0.5
    v_th: float = 1.0

    def __post_init__(self):
        if int(self.num_chunks) != self.num_chunks or self.num_chunks < 1:
            raise ValueError(f"num_chunks must be a positive integer, got {self.num_chunks}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")

    @classmethod
    def from_leak(cls, num_chunks: int, leak: float, v_th: float) -> "LIMConfig":
        """Accept a leak given either as tau or as its reciprocal (values > 1)."""
        if leak > 1.0:
            log.info("leak factor %g > 1 read as reciprocal: tau = %g", leak, 1.0 / leak)
            leak = 1.0 / leak
        return cls(num_chunks=num_chunks, tau=leak, v_th=v_th)


@dataclass(frozen=True)
class ChunkPlan:
    seq_len: int
    num_chunks: int
    chunk_len: int
    remainder: int

    @property
    def padded(self) -> bool:
        return self.remainder > 0

    @property
    def used_len(self) -> int:
        return self.chunk_len * self.num_chunks


@dataclass
class LIMState:
    u: Tensor  # (batch, chunk_len, D)
    source: Literal["zero", "transferred"] = "zero"


def chunk_plan(seq_len: int, num_chunks: int) -> ChunkPlan:
    if num_chunks < 1:
        raise ValueError(f"num_chunks must be >= 1, got {num_chunks}")
    if seq_len < num_chunks:
        raise ValueError(f"sequence length {seq_len} is shorter than the chunk count {num_chunks}")
    chunk_len = seq_len // num_chunks
    return ChunkPlan(seq_len, num_chunks, chunk_len, seq_len - chunk_len * num_chunks)


def reset(x, v_th: float) -> Tensor:
    """0 where x > v_th, x elsewhere (ties kept)."""
    return tn.reset(x, v_th)


def lim_forward(x: Tensor, cfg: LIMConfig, prev: LIMState | None = None) -> tuple[Tensor, LIMState]:
    """Run the membrane over ``x`` (batch, L, D).

    Returns the membrane sequence (batch, L, D) and the chunk-mean state
    (batch, floor(L/T), D).
    """
    x = tn.as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"LIM expects (batch, L, D) input, got {x.shape}")
    batch, length, dim = x.shape
    plan = chunk_plan(length, cfg.num_chunks)
    l = plan.chunk_len
    if prev is None:
        u = tn.Tensor(np.zeros((batch, l, dim), dtype=x.dtype))
    else:
        if prev.u.shape != (batch, l, dim):
            raise ShapeError(f"previous membrane shape {prev.u.shape} does not match chunk plan {(batch, l, dim)}")
        u = prev.u

    membranes = []
    for i in range(cfg.num_chunks):
        chunk = x[:, i * l:(i + 1) * l, :]
        u = reset(tn.add(tn.mul(u, cfg.tau), chunk), cfg.v_th)
        membranes.append(u)

    pieces = list(membranes)
    if plan.remainder:
        pieces.append(tn.Tensor(np.zeros((batch, plan.remainder, dim), dtype=x.dtype)))
    out = tn.concatenate(pieces, axis=1) if len(pieces) > 1 else pieces[0]
    avg = membranes[0]
    for m in membranes[1:]:
        avg = tn.add(avg, m)
    if cfg.num_chunks > 1:
        avg = tn.mul(avg, 1.0 / cfg.num_chunks)
    return out, LIMState(avg, "zero")


def transfer(avg: LIMState, expect_shape: tuple[int, ...] | None = None) -> LIMState:
    """Hand a layer's chunk-mean membrane to the next layer."""
    if expect_shape is not None and tuple(avg.u.shape) != tuple(expect_shape):
        raise ShapeError(f"cannot transfer membrane of shape {avg.u.shape} into a layer expecting {expect_shape}")
    return LIMState(avg.u, "transferred")


def count_lim_parameters(cfg: LIMConfig) -> int:
    return 0


def lstm_gate_parameters(hidden: int) -> int:
    return 8 * hidden * hidden + 4 * hidden


def gru_gate_parameters(hidden: int) -> int:
    return 6 * hidden * hidden + 3 * hidden
