"""Component toggle grid: LIM gate, LoRA adapters, membrane transfer.

Every row fine-tunes the same pretrained base; only the three switches
change between rows.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict

from .analysis import write_csv
from .config import TrainConfig, deep_update
from .train import train


class Toggle(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lim: bool
    lora: bool
    transfer: bool

    @property
    def label(self) -> str:
        return "+".join(n for n, on in (("LIM", self.lim), ("LoRA", self.lora), ("transfer", self.transfer)) if on)


DEFAULT_ROWS = [
    Toggle(lim=True, lora=False, transfer=False),
    Toggle(lim=True, lora=False, transfer=True),
    Toggle(lim=False, lora=True, transfer=False),
    Toggle(lim=True, lora=True, transfer=False),
    Toggle(lim=True, lora=True, transfer=True),
]


class AblationConfig(BaseModel):
    """``pretrain`` builds the shared base unless ``finetune.source_checkpoint``
    already names one; ``finetune`` is the PEFT run each row starts from."""

    model_config = ConfigDict(extra="forbid")

    pretrain: dict[str, Any] | None = None
    finetune: dict[str, Any]
    rows: list[Toggle] = DEFAULT_ROWS
    out_dir: str = "runs/ablation"


def row_config(base: dict, row: Toggle, source: str, out_dir: Path) -> TrainConfig:
    model = dict(base.get("model", {}))
    model["use_lim"] = row.lim
    model["use_membrane_transfer"] = row.transfer
    if not row.lora:
        model["lora"] = None
    elif model.get("lora") is None:
        model["lora"] = {"in_proj": True, "out_proj": True}
    data = deep_update(base, {"mode": "finetune_peft", "source_checkpoint": source, "out_dir": str(out_dir)})
    data["model"] = model
    return TrainConfig(**data)


COLUMNS = ["LIM", "LoRA", "transfer", "val_accuracy", "val_loss", "trainable_params", "trainable_pct"]


def run_ablation(cfg: AblationConfig, out_dir: str | Path | None = None) -> list[dict]:
    out = Path(out_dir or cfg.out_dir)
    source = cfg.finetune.get("source_checkpoint")
    if not source:
        if cfg.pretrain is None:
            raise ValueError("ablation needs finetune.source_checkpoint or a pretrain section")
        pre = TrainConfig(**deep_update(cfg.pretrain, {"mode": "pretrain_full"}))
        source = str(train(pre, out / "base").checkpoint)
    results = []
    for i, row in enumerate(cfg.rows):
        rc = row_config(cfg.finetune, row, source, out / f"row{i}")
        final = train(rc).final
        results.append({"LIM": row.lim, "LoRA": row.lora, "transfer": row.transfer,
                        "val_accuracy": final["val_accuracy"], "val_loss": final["val_loss"],
                        "trainable_params": final["trainable_params"], "trainable_pct": final["trainable_pct"]})
    write_csv(out / "ablation.csv", COLUMNS, [[r[c] for c in COLUMNS] for r in results])
    return results


def format_table(results: list[dict]) -> str:
    mark = {True: "yes", False: "no"}
    lines = ["| LIM | LoRA | transfer | val acc | val loss | trainable (%) |", "|---|---|---|---|---|---|"]
    for r in results:
        lines.append(f"| {mark[r['LIM']]} | {mark[r['LoRA']]} | {mark[r['transfer']]} | {r['val_accuracy']:.4f} "
                     f"| {r['val_loss']:.4f} | {r['trainable_params']} ({r['trainable_pct']:.2f}) |")
    return "\n".join(lines)
