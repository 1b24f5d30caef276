"""Run configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .model import ModelConfig
from .tasks import TaskSpec


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    clip_norm: float = Field(1.0, ge=0)
    warmup_frac: float = Field(0.1, ge=0, lt=1)
    schedule: Literal["cosine", "constant"] = "cosine"


class TrainConfig(BaseModel):
    """Everything a training or fine-tuning run needs.

    The model's input/output fields (``vocab_size``, ``in_features``,
    ``num_outputs``, ``head``) are filled in from the task when left unset.
    """

    model_config = ConfigDict(extra="forbid")

    task: TaskSpec = TaskSpec()
    model: ModelConfig = ModelConfig()
    mode: Literal["pretrain_full", "finetune_peft", "finetune_full"] = "pretrain_full"
    optim: OptimConfig = OptimConfig()
    steps: int = Field(1000, ge=1)
    batch_size: int = Field(16, ge=1)
    eval_every: int = Field(250, ge=1)
    eval_size: int | None = Field(None, ge=1)
    eval_batch: int = Field(50, ge=1)
    target_accuracy: float | None = Field(None, gt=0, le=1)
    seed: int = 0
    out_dir: str = "runs/default"
    source_checkpoint: str | None = None

    @model_validator(mode="before")
    @classmethod
    def _fill_io(cls, data: Any):
        if not isinstance(data, dict):
            return data
        task = data.get("task", {})
        task = task if isinstance(task, TaskSpec) else TaskSpec(**task)
        model = data.get("model", {})
        if isinstance(model, ModelConfig):
            model = model.model_dump()
        model = dict(model)
        if "vocab_size" not in model and "in_features" not in model:
            model["vocab_size"] = task.input_vocab
            model["in_features"] = task.in_features
        model.setdefault("num_outputs", task.num_outputs)
        model.setdefault("head", task.head)
        return {**data, "task": task, "model": model}

    @model_validator(mode="after")
    def _check(self):
        self.model.require_io()
        if self.mode != "pretrain_full" and not self.source_checkpoint:
            raise ValueError(f"mode {self.mode} needs source_checkpoint")
        if self.mode == "finetune_peft" and self.model.lora is None and not self.model.use_lim:
            raise ValueError("finetune_peft needs LoRA adapters or the LIM gate path to train")
        if self.model.lora is not None:
            self.model.lora.require_any()
        if self.model.vocab_size is not None and self.task.input_vocab is None:
            raise ValueError(f"task {self.task.kind} has real-valued inputs; set model.in_features")
        if self.model.vocab_size is not None and self.model.vocab_size < self.task.input_vocab:
            raise ValueError("model.vocab_size is smaller than the task vocabulary")
        if self.model.in_features is not None and self.model.in_features != self.task.in_features:
            raise ValueError(f"model.in_features={self.model.in_features} but the task has {self.task.in_features}")
        if self.model.num_outputs != self.task.num_outputs:
            raise ValueError(f"model.num_outputs={self.model.num_outputs} but the task needs {self.task.num_outputs}")
        return self


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if overrides:
        data = deep_update(data, overrides)
    return TrainConfig(**data)


def deep_update(base: dict, patch: dict) -> dict:
    out = dict(base)
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], val)
        else:
            out[key] = val
    return out


def config_schema() -> dict:
    return TrainConfig.model_json_schema()
