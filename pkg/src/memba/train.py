"""Training loop, evaluation and the fine-tuning protocol."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import TrainConfig
from .model import MembaModel
from .optim import AdamW, clip_grad_norm, lr_at
from .tasks import Batch, TaskSpec, generate, train_batches

log = logging.getLogger(__name__)

METRICS_SCHEMA = "memba.metrics/1"
ADDING_TOLERANCE = 0.04


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record['step']}")
        self.record = record


def task_loss(out: tn.Tensor, batch: Batch, kind: str) -> tn.Tensor:
    if kind == "adding":
        return tn.mse(tn.reshape(out, (out.shape[0],)), batch.labels)
    if kind == "selective_copy":
        return tn.cross_entropy(out, batch.labels, batch.mask)
    return tn.cross_entropy(out, batch.labels)


def _score(out: np.ndarray, batch: Batch, kind: str) -> tuple[float, float, int]:
    """(summed loss, number correct, number counted) for one batch."""
    if kind == "adding":
        err = out[:, 0] - batch.labels
        return float(np.sum(err * err)), float(np.sum(np.abs(err) < ADDING_TOLERANCE)), len(err)
    z = out - out.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, batch.labels[..., None], axis=-1)[..., 0]
    hit = out.argmax(axis=-1) == batch.labels
    if kind == "selective_copy":
        m = batch.mask
        return float(nll[m].sum()), float(hit[m].sum()), int(m.sum())
    return float(nll.sum()), float(hit.sum()), len(hit)


def evaluate(model: MembaModel, task: TaskSpec, size: int | None = None, batch_size: int = 50,
             data: Batch | None = None) -> dict:
    """Loss and accuracy over the validation split; no state is touched."""
    data = data if data is not None else generate(task, "val", size)
    total, correct, count = 0.0, 0.0, 0
    with tn.no_record():
        for i in range(0, len(data), batch_size):
            part = Batch(data.inputs[i:i + batch_size], data.labels[i:i + batch_size], data.mask[i:i + batch_size])
            l, c, n = _score(model(part.inputs).data.astype(np.float64), part, task.kind)
            total, correct, count = total + l, correct + c, count + n
    return {"val_loss": total / count, "val_accuracy": correct / count, "val_count": count}


@dataclass
class TrainResult:
    model: MembaModel
    records: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final(self) -> dict:
        return self.records[-1]


def build_model(cfg: TrainConfig) -> MembaModel:
    """Fresh model, or one warm-started from ``source_checkpoint`` for fine-tuning."""
    model = MembaModel(cfg.model)
    if cfg.mode == "pretrain_full":
        model.set_mode("full")
        return model
    src = load_checkpoint(cfg.source_checkpoint)
    need = [p.name for p in model.base_parameters()]
    missing = [n for n in need if n not in src.arrays]
    if missing:
        raise CheckpointError(f"source checkpoint lacks base parameter {missing[0]}")
    load_into(model, src.arrays, strict=False)
    model.set_mode("peft" if cfg.mode == "finetune_peft" else "full")
    return model


def frozen_digest(model: MembaModel) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        if not p.trainable:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def train(cfg: TrainConfig, out_dir: str | Path | None = None, write: bool = True) -> TrainResult:
    out = Path(out_dir or cfg.out_dir)
    model = build_model(cfg)
    count, pct = model.count_trainable()
    opt = AdamW(model.parameters(), betas=cfg.optim.betas, eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    val = generate(cfg.task, "val", cfg.eval_size)
    result = TrainResult(model)
    metrics = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.model_dump_json(indent=2))
        metrics = (out / "metrics.jsonl").open("w")

    def emit(rec: dict) -> dict:
        rec = {"schema": METRICS_SCHEMA, **rec}
        result.records.append(rec)
        if metrics:
            metrics.write(json.dumps(rec, sort_keys=True) + "\n")
            metrics.flush()
        return rec

    t0 = time.perf_counter()
    losses: list[float] = []
    batches = train_batches(cfg.task, cfg.batch_size)
    try:
        for step in range(cfg.steps):
            batch = next(batches)
            try:
                with tn.GradRecord():
                    loss = task_loss(model(batch.inputs), batch, cfg.task.kind)
                lv = loss.item()
            except tn.NumericalError:
                lv = math.nan
            model.zero_grad()
            if not math.isfinite(lv):
                bad = [p.name for p in model.parameters() if not np.all(np.isfinite(p.data))]
                rec = {"event": "diverged", "step": step, "train_loss": repr(lv), "lr": lr_at(step, cfg.steps, cfg.optim.lr,
                       cfg.optim.warmup_frac, cfg.optim.schedule), "nonfinite_params": bad}
                raise TrainingDiverged(emit(rec))
            tn.backward(loss)
            gnorm = clip_grad_norm(opt.params, cfg.optim.clip_norm)
            opt.step(lr_at(step, cfg.steps, cfg.optim.lr, cfg.optim.warmup_frac, cfg.optim.schedule))
            losses.append(lv)
            last = step + 1 == cfg.steps
            if (step + 1) % cfg.eval_every == 0 or last:
                ev = evaluate(model, cfg.task, data=val, batch_size=cfg.eval_batch)
                done = cfg.target_accuracy is not None and ev["val_accuracy"] >= cfg.target_accuracy
                emit({"event": "eval", "step": step + 1, "train_loss": float(np.mean(losses)), **ev,
                      "grad_norm": gnorm, "trainable_params": count, "trainable_pct": pct,
                      "wall_time": time.perf_counter() - t0, "final": bool(last or done)})
                losses = []
                if done:
                    break
    finally:
        if metrics:
            metrics.close()
    if write:
        result.checkpoint = save_checkpoint(out / "model.ckpt", model, cfg.seed, {"mode": cfg.mode, "task": cfg.task.model_dump(mode="json")})
    return result
