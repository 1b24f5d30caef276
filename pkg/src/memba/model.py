"""The Memba block and a stacked sequence model.

Block (pre-norm, residual added by the model)::

    x_ssm, x_gate = split(in_proj(rmsnorm(x)))
    y_ssm  = scan(x_ssm)
    y_gate = silu(gate_out(LIM(gate_in(x_gate))))      # use_lim
           = silu(x_gate)                              # plain Mamba gate
    out    = out_proj(y_ssm * y_gate)

With ``gate_residual`` the LIM branch is added to the plain gate before the
activation, ``silu(x_gate + gate_out(m))``, and ``gate_out`` starts at zero so a
freshly attached gate path leaves a pretrained block's output unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import tensor as tn
from .lim import LIMConfig, LIMState, chunk_plan, lim_forward, transfer
from .lora import Linear, PlacementConfig, count_trainable
from .rng import stream
from .ssm import SSMParams, compute_ssm_inputs, init_ssm_params, selective_scan
from .tensor import Parameter, ShapeError, Tensor

NORM_EPS = 1e-6


class LIMSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_chunks: int = 4
    leak: float = 0.5
    v_th: float = 1.0

    def to_config(self) -> LIMConfig:
        return LIMConfig.from_leak(self.num_chunks, self.leak, self.v_th)


class ModelConfig(BaseModel):
    """Architecture of a stacked Memba model."""

    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(64, gt=0)
    expand: int = Field(2, gt=0)
    state_dim: int = Field(16, gt=0)
    dt_rank: int | None = None
    d_gate: int | None = None
    n_layers: int = Field(2, ge=1)
    use_lim: bool = True
    use_membrane_transfer: bool = True
    gate_residual: bool = False
    lim: LIMSettings = LIMSettings()
    lora: PlacementConfig | None = None
    vocab_size: int | None = None
    in_features: int | None = None
    num_outputs: int = Field(2, gt=0)
    head: Literal["token", "pool"] = "pool"
    scan_chunk: int | None = None
    dtype: Literal["float64", "float32"] = "float64"
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.d_gate is not None and not 0 < self.d_gate <= self.d_inner:
            raise ValueError(f"d_gate must lie in [1, d_inner={self.d_inner}]")
        if self.scan_chunk is not None and self.scan_chunk < 1:
            raise ValueError("scan_chunk must be positive")
        self.lim.to_config()
        return self

    def require_io(self) -> None:
        if (self.vocab_size is None) == (self.in_features is None):
            raise ValueError("exactly one of vocab_size / in_features must be set")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or math.ceil(self.d_model / 16)

    @property
    def resolved_d_gate(self) -> int:
        return self.d_gate or max(1, self.d_inner // 4)


def rmsnorm(x, gain) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps) over the last axis."""
    x = tn.as_tensor(x)
    gain = gain.value if isinstance(gain, Parameter) else tn.as_tensor(gain)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match feature axis of {x.shape}")
    ms = tn.mean(tn.mul(x, x), axis=-1, keepdims=True)
    inv = tn.power(tn.add(ms, NORM_EPS), -0.5)
    return tn.mul(tn.mul(x, inv), gain)


@dataclass
class BlockTrace:
    membrane: Tensor | None = None
    avg: LIMState | None = None
    gate_input: Tensor | None = None


class MembaBlock:
    def __init__(self, cfg: ModelConfig, index: int, seed: int):
        self.cfg = cfg
        self.prefix = p = f"layers.{index}"
        d, di, n, r = cfg.d_model, cfg.d_inner, cfg.state_dim, cfg.resolved_dt_rank
        self.norm = Parameter(f"{p}.norm.gain", Tensor(np.ones(d)))
        self.in_proj = Linear(f"{p}.in_proj", d, 2 * di, seed)
        self.x_proj = Linear(f"{p}.x_proj", di, r + 2 * n, seed)
        self.dt_proj = Linear(f"{p}.dt_proj", r, di, seed, bias=True)
        self.out_proj = Linear(f"{p}.out_proj", di, d, seed)
        init = init_ssm_params(di, n, r, seed, prefix=p)
        self.x_proj.weight.value.data[...] = init["x_proj_weight"]
        self.dt_proj.weight.value.data[...] = init["dt_proj_weight"]
        self.dt_proj.bias.value.data[...] = init["dt_proj_bias"]
        self.a_log = Parameter(f"{p}.a_log", Tensor(init["a_log"]))
        self.d_skip = Parameter(f"{p}.d_skip", Tensor(init["d_skip"]))
        self.lim_cfg = cfg.lim.to_config()
        self.gate_in = self.gate_out = None
        if cfg.use_lim:
            dg = cfg.resolved_d_gate
            self.gate_in = Linear(f"{p}.gate_in", di, dg, seed)
            self.gate_out = Linear(f"{p}.gate_out", dg, di, seed, zero_init=cfg.gate_residual)

    def linears(self) -> list[Linear]:
        out = [self.in_proj, self.x_proj, self.dt_proj, self.out_proj]
        if self.gate_in is not None:
            out += [self.gate_in, self.gate_out]
        return out

    def site(self, name: str) -> Linear | None:
        return getattr(self, name, None)

    def base_parameters(self) -> list[Parameter]:
        out = [self.norm, self.a_log, self.d_skip]
        for lin in (self.in_proj, self.x_proj, self.dt_proj, self.out_proj):
            out += lin.base_parameters()
        return out

    def gate_parameters(self) -> list[Parameter]:
        if self.gate_in is None:
            return []
        return self.gate_in.base_parameters() + self.gate_out.base_parameters()

    def parameters(self) -> list[Parameter]:
        out = [self.norm, self.a_log, self.d_skip]
        for lin in self.linears():
            out += lin.parameters()
        return out

    def ssm_params(self) -> SSMParams:
        return SSMParams(
            a_log=self.a_log.value,
            d_skip=self.d_skip.value,
            x_proj_weight=self.x_proj.weight.value,
            dt_proj_weight=self.dt_proj.weight.value,
            dt_proj_bias=self.dt_proj.bias.value,
            state_dim=self.cfg.state_dim,
        )

    def membrane_shape(self, batch: int, seq_len: int) -> tuple[int, int, int]:
        return (batch, chunk_plan(seq_len, self.lim_cfg.num_chunks).chunk_len, self.cfg.resolved_d_gate)

    def __call__(self, x: Tensor, prev: LIMState | None = None, trace: BlockTrace | None = None):
        """Returns (block output without residual, chunk-mean membrane or None)."""
        di = self.cfg.d_inner
        h = self.in_proj(rmsnorm(x, self.norm))
        x_ssm, x_gate = tn.split(h, [di, di], axis=-1)
        params = self.ssm_params()
        inputs = compute_ssm_inputs(x_ssm, params, x_proj=self.x_proj, dt_proj=self.dt_proj)
        y_ssm = selective_scan(inputs, params, self.cfg.scan_chunk)
        avg = None
        if self.gate_in is None:
            y_gate = tn.silu(x_gate)
        else:
            g = self.gate_in(x_gate)
            m, avg = lim_forward(g, self.lim_cfg, prev)
            z = self.gate_out(m)
            if self.cfg.gate_residual:
                z = tn.add(x_gate, z)
            y_gate = tn.silu(z)
            if trace is not None:
                trace.membrane, trace.avg, trace.gate_input = m, avg, g
        return self.out_proj(tn.mul(y_ssm, y_gate)), avg


class MembaModel:
    """Embedding, residual stack of Memba blocks, final norm and a readout head."""

    def __init__(self, cfg: ModelConfig):
        cfg.require_io()
        self.cfg = cfg
        seed = cfg.seed
        d = cfg.d_model
        if cfg.vocab_size is not None:
            emb = stream(seed, "embedding").normal(0.0, 1.0, (cfg.vocab_size, d))
            self.embedding = Parameter("embedding.weight", Tensor(emb))
            self.embed_proj = None
        else:
            self.embedding = None
            self.embed_proj = Linear("embedding.proj", cfg.in_features, d, seed, bias=True)
        self.blocks = [MembaBlock(cfg, i, seed) for i in range(cfg.n_layers)]
        self.norm_f = Parameter("norm_f.gain", Tensor(np.ones(d)))
        self.head = Linear("head", d, cfg.num_outputs, seed, bias=True)
        if cfg.dtype != "float64":
            for p in self.parameters():
                p.value.data = p.value.data.astype(cfg.dtype)
        if cfg.lora is not None:
            self.attach_adapters(cfg.lora)
        self._check_names()

    # -- parameters -------------------------------------------------------
    def attach_adapters(self, placement: PlacementConfig) -> None:
        for block in self.blocks:
            for site in placement.enabled():
                lin = block.site(site)
                if lin is None:
                    continue  # gate sites on a block without LIM
                lin.attach(placement.rank_for(site), placement.scale, self.cfg.seed)

    def parameters(self) -> list[Parameter]:
        out = [self.embedding] if self.embedding is not None else self.embed_proj.parameters()
        for block in self.blocks:
            out += block.parameters()
        out += [self.norm_f] + self.head.parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def _check_names(self) -> None:
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    def base_parameters(self) -> list[Parameter]:
        """Everything a pretrained plain model has: no adapters, no gate path, no head."""
        out = [self.embedding] if self.embedding is not None else self.embed_proj.base_parameters()
        for block in self.blocks:
            out += block.base_parameters()
        return out + [self.norm_f]

    def set_mode(self, mode: str) -> None:
        """``full``: everything trains.  ``peft``: adapters, gate path and head only."""
        if mode == "full":
            for p in self.parameters():
                p.set_trainable(True)
            return
        if mode != "peft":
            raise ValueError(f"unknown training mode {mode!r}")
        for p in self.parameters():
            p.set_trainable(False)
        for block in self.blocks:
            for p in block.gate_parameters():
                p.set_trainable(True)
            for lin in block.linears():
                if lin.adapter is not None:
                    for p in lin.adapter.parameters():
                        p.set_trainable(True)
        for p in self.head.parameters():
            p.set_trainable(True)

    def merged(self) -> "MembaModel":
        """Adapter-free copy whose weights have the adapter updates folded in."""
        plain = MembaModel(self.cfg.model_copy(update={"lora": None}))
        new = plain.named_parameters()
        for name, p in self.named_parameters().items():
            if name in new:
                new[name].value.data = p.data.copy()
        for mine, theirs in zip(self.blocks, plain.blocks):
            for a, b in zip(mine.linears(), theirs.linears()):
                b.weight.value.data = a.merged().astype(a.weight.data.dtype)
        return plain

    def count_trainable(self) -> tuple[int, float]:
        return count_trainable(self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward ----------------------------------------------------------
    def embed(self, inputs: np.ndarray) -> Tensor:
        if self.embedding is not None:
            return tn.take_rows(self.embedding.value, inputs)
        if not isinstance(inputs, Tensor):
            inputs = Tensor(np.asarray(inputs, dtype=self.cfg.dtype))
        return self.embed_proj(inputs)

    def body(self, x: Tensor, traces: list[BlockTrace] | None = None) -> Tensor:
        prev = None
        for i, block in enumerate(self.blocks):
            tr = BlockTrace() if traces is not None else None
            y, avg = block(x, prev, tr)
            x = tn.add(x, y)
            if traces is not None:
                traces.append(tr)
            prev = None
            if avg is not None and self.cfg.use_membrane_transfer and i + 1 < len(self.blocks):
                prev = transfer(avg, self.blocks[i + 1].membrane_shape(x.shape[0], x.shape[1]))
        return x

    def readout(self, x: Tensor) -> Tensor:
        x = rmsnorm(x, self.norm_f)
        if self.cfg.head == "pool":
            x = tn.mean(x, axis=1)
        return self.head(x)

    def forward(self, inputs: np.ndarray, traces: list[BlockTrace] | None = None) -> Tensor:
        return self.readout(self.body(self.embed(inputs), traces))

    __call__ = forward
