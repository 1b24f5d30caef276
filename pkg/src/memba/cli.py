"""Command-line entry point.

Every subcommand takes ``--config <json file>``, ``--seed`` and repeatable
``--set key.path=value`` overrides (value parsed as JSON, else kept as a
string).  Results go to stdout as JSON.  Failures print one JSON line
``{"error": ..., "message": ...}`` to stderr; usage and config errors exit 2,
anything else exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from . import ablation, analysis, gradcheck, ssm, tasks
from .checkpoint import load_checkpoint
from .config import TrainConfig, config_schema, deep_update
from .model import MembaModel
from .train import evaluate, task_loss, train

SCAN_EQUIV_TOL = 1e-10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("UsageError", message, 2)


def _fail(kind: str, message: str, code: int):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    raise SystemExit(code)


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# config plumbing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _overrides(args) -> dict:
    out: dict = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    if args.seed is not None:
        out = deep_update(out, {"seed": args.seed, "model": {"seed": args.seed}, "task": {"seed": args.seed}})
    return out


def _raw_config(args) -> dict:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError as err:
            raise UsageError(f"config file not found: {args.config}") from err
        except ValueError as err:
            raise UsageError(f"malformed JSON in {args.config}: {err}") from err
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
    return deep_update(data, _overrides(args))


def _train_config(args, extra: dict | None = None) -> TrainConfig:
    data = _raw_config(args)
    if extra:
        data = deep_update(data, {k: v for k, v in extra.items() if v is not None})
    return TrainConfig(**data)


def _model_and_task(args) -> tuple[MembaModel, tasks.TaskSpec, TrainConfig]:
    """Model from ``--checkpoint`` if given (task from the config or the
    checkpoint), else a freshly initialised model from the config."""
    if getattr(args, "checkpoint", None):
        ck = load_checkpoint(args.checkpoint)
        data = _raw_config(args)
        if "task" not in data and ck.extra and "task" in ck.extra:
            data["task"] = ck.extra["task"]
        data["model"] = ck.config.model_dump(mode="json")
        cfg = TrainConfig(**data)
        return ck.build(), cfg.task, cfg
    cfg = _train_config(args)
    return MembaModel(cfg.model), cfg.task, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _train_config(args, {"steps": args.steps, "batch_size": args.batch_size, "out_dir": args.out_dir})
    if args.lr is not None:
        cfg = cfg.model_copy(update={"optim": cfg.optim.model_copy(update={"lr": args.lr})})
    if cfg.mode != "pretrain_full" and args.command == "train":
        raise UsageError("train runs pretrain_full; use the finetune command for fine-tuning")
    res = train(cfg)
    _emit({"final": res.final, "checkpoint": str(res.checkpoint), "metrics": str(Path(cfg.out_dir) / "metrics.jsonl")})
    return 0


def cmd_finetune(args) -> int:
    extra = {"steps": args.steps, "batch_size": args.batch_size, "out_dir": args.out_dir,
             "source_checkpoint": args.source}
    data = _raw_config(args)
    data.setdefault("mode", "finetune_peft")
    data = deep_update(data, {k: v for k, v in extra.items() if v is not None})
    if args.lr is not None:
        data = deep_update(data, {"optim": {"lr": args.lr}})
    cfg = TrainConfig(**data)
    if cfg.mode == "pretrain_full":
        raise UsageError("finetune needs mode finetune_peft or finetune_full")
    res = train(cfg)
    _emit({"final": res.final, "checkpoint": str(res.checkpoint)})
    return 0


def cmd_eval(args) -> int:
    model, task, cfg = _model_and_task(args)
    _emit(evaluate(model, task, args.size, cfg.eval_batch))
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(seed=args.seed or 0, include_models=not args.primitives_only)
    print(gradcheck.format_table(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_scan_equiv(args) -> int:
    cases = ssm.equivalence_sweep(args.cases, args.seed or 0, args.max_len)
    worst = max(cases, key=lambda c: c.max_abs_diff)
    ok = worst.max_abs_diff < SCAN_EQUIV_TOL
    _emit({"cases": len(cases), "max_abs_diff": worst.max_abs_diff, "worst_case": worst.__dict__,
           "tolerance": SCAN_EQUIV_TOL, "passed": ok})
    return 0 if ok else 1


def cmd_theorem_check(args) -> int:
    seed = args.seed or 0
    if args.instance:
        inst = json.loads(Path(args.instance).read_text())
        y, u_bar = np.asarray(inst["y"], float), np.asarray(inst["u_bar"], float)
        if "label" in inst:
            loss = analysis.SoftmaxCELoss(int(inst["label"]))
        else:
            loss = analysis.QuadraticLoss(np.asarray(inst["q"], float), np.asarray(inst["target"], float))
    else:
        y, u_bar, loss = analysis.random_instance(seed, args.dim, args.v_th, args.saturated)
    report = analysis.theorem_check(y, u_bar, loss, args.scales, args.samples, seed, args.v_th, args.law)
    out = report.to_dict()
    out["r_bound_holds"] = analysis.r_bound_check(report)
    out["y"], out["u_bar"] = y.tolist(), u_bar.tolist()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit(out)
    return 0


def _fixed_batch(task: tasks.TaskSpec, size: int) -> tasks.Batch:
    return tasks.generate(task, "val", size)


def cmd_landscape(args) -> int:
    model, task, _ = _model_and_task(args)
    batch = _fixed_batch(task, args.batch)

    def loss_fn(m):
        return float(task_loss(m(batch.inputs), batch, task.kind).item())

    grid = analysis.loss_landscape(model, loss_fn, args.radius, args.steps, args.seed or 0)
    grid.to_csv(args.out)
    val, a, b = grid.minimum
    _emit({"csv": args.out, "center_loss": float(grid.values[args.steps // 2, args.steps // 2]),
           "min_loss": val, "min_alpha": a, "min_beta": b})
    return 0


def cmd_trace(args) -> int:
    model, task, _ = _model_and_task(args)
    inputs, _, _ = tasks.sample(task, "val", args.index)
    tr = analysis.membrane_trace(model, inputs, args.layers)
    tr.to_csv(args.out)
    _emit({"csv": args.out, "rows": len(tr.rows), "peak_membrane": tr.peak, "v_th": tr.v_th})
    return 0


def cmd_saliency(args) -> int:
    model, task, _ = _model_and_task(args)
    inputs, labels, mask = tasks.sample(task, "val", args.index)
    if task.kind == "selective_copy":
        sal = analysis.model_saliency(model, inputs, labels=np.where(mask, labels, -1))
    else:
        target = args.target if args.target is not None else (int(labels) if task.kind == "pathfinder_lite" else 0)
        sal = analysis.model_saliency(model, inputs, target=target)
    grid = None
    if task.kind == "pathfinder_lite":
        side = task.grid_size // task.patch
        grid = (side, side)
    header, rows = analysis.saliency_rows(sal, grid)
    analysis.write_csv(args.out, header, rows)
    if args.svg:
        Path(args.svg).write_text(analysis.heatmap_svg(sal.reshape(grid) if grid else sal[None]))
    _emit({"csv": args.out, "svg": args.svg, "rows": len(rows), "max": float(sal.max())})
    return 0


def cmd_param_count(args) -> int:
    cfg = _train_config(args) if args.config or args.set else None
    if cfg is None:
        raise UsageError("param-count needs --config")
    model = MembaModel(cfg.model)
    model.set_mode("peft" if cfg.mode == "finetune_peft" else "full")
    count, pct = model.count_trainable()
    total = sum(p.size for p in model.parameters())
    _emit({"mode": cfg.mode, "trainable": count, "total": total, "percent": pct})
    return 0


def cmd_export_task(args) -> int:
    cfg = _train_config(args)
    batch = tasks.generate(cfg.task, args.split, args.size)
    tasks.write_mbtk(args.out, cfg.task.kind, batch)
    _emit({"path": args.out, "kind": cfg.task.kind, "split": args.split, "samples": len(batch)})
    return 0


def cmd_ablation(args) -> int:
    seed, args.seed = args.seed, None
    cfg = ablation.AblationConfig(**_raw_config(args))
    args.seed = seed
    if args.seed is not None:
        seed_patch = {"seed": args.seed, "model": {"seed": args.seed}, "task": {"seed": args.seed}}
        cfg.finetune = deep_update(cfg.finetune, seed_patch)
        if cfg.pretrain is not None:
            cfg.pretrain = deep_update(cfg.pretrain, seed_patch)
    results = ablation.run_ablation(cfg, args.out_dir)
    print(ablation.format_table(results))
    return 0


def cmd_schema(args) -> int:
    schema = config_schema()
    if args.out:
        Path(args.out).write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    _emit(schema)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (unknown keys are errors)")
    p.add_argument("--seed", type=int, help="seed for model init, task data and sampling")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set model.d_model=32 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="load the model from this checkpoint instead of initialising one")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memba", description="Memba sequence models: training, checks and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("train", "pretrain a model from scratch"),
                           ("finetune", "fine-tune from a checkpoint (PEFT by default)")):
        p = sub.add_parser(name, help=helptext, description=helptext)
        _common(p)
        p.add_argument("--steps", type=int, help="optimizer steps")
        p.add_argument("--batch-size", type=int, help="sequences per step")
        p.add_argument("--lr", type=float, help="peak learning rate")
        p.add_argument("--out-dir", help="directory for metrics.jsonl, config.json and model.ckpt")
        if name == "finetune":
            p.add_argument("--source", help="checkpoint to start from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    _common(p)
    _model_source(p)
    p.add_argument("--size", type=int, help="validation samples (default: task val_size)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation and the models")
    _common(p)
    p.add_argument("--primitives-only", action="store_true", help="skip the block and model cases")

    p = sub.add_parser("scan-equiv", help="randomised chunked-vs-sequential scan sweep")
    _common(p)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--max-len", type=int, default=257)

    p = sub.add_parser("theorem-check", help="Monte-Carlo check of the membrane-fluctuation expansion")
    _common(p)
    p.add_argument("--dim", type=int, default=4, help="instance dimension for random instances")
    p.add_argument("--saturated", type=int, default=2, help="instance dimensions placed at the threshold")
    p.add_argument("--instance", help="JSON file with y, u_bar and either label or q/target")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--scales", type=float, nargs="+", default=list(analysis.DEFAULT_SCALES))
    p.add_argument("--v-th", type=float, default=1.0)
    p.add_argument("--law", choices=["truncated_gaussian", "uniform"], default="truncated_gaussian")
    p.add_argument("--out", help="write the report JSON here")

    p = sub.add_parser("landscape", help="2-D loss landscape along filter-normalised directions (CSV)")
    _common(p)
    _model_source(p)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--batch", type=int, default=16, help="validation samples in the fixed batch")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("trace", help="per-token membrane statistics (CSV)")
    _common(p)
    _model_source(p)
    p.add_argument("--index", type=int, default=0, help="validation sample index")
    p.add_argument("--layers", type=int, nargs="+", help="layers to trace (default: all)")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("saliency", help="per-token input saliency (CSV, optional SVG)")
    _common(p)
    _model_source(p)
    p.add_argument("--index", type=int, default=0, help="validation sample index")
    p.add_argument("--target", type=int, help="class whose logit is differentiated (pooled heads)")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--svg", help="optional SVG heatmap path")

    p = sub.add_parser("param-count", help="trainable and total parameter counts")
    _common(p)

    p = sub.add_parser("export-task", help="write a generated split to an MBTK file")
    _common(p)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--size", type=int, help="samples (default: val_size; required for train)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablation", help="LIM / LoRA / transfer toggle grid")
    _common(p)
    p.add_argument("--out-dir", help="output directory (default from config)")

    p = sub.add_parser("schema", help="print the JSON schema of the run config")
    _common(p)
    p.add_argument("--out", help="also write it to this file")
    return parser


COMMANDS = {
    "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "scan-equiv": cmd_scan_equiv, "theorem-check": cmd_theorem_check, "landscape": cmd_landscape,
    "trace": cmd_trace, "saliency": cmd_saliency, "param-count": cmd_param_count,
    "export-task": cmd_export_task, "ablation": cmd_ablation, "schema": cmd_schema,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        _fail("UsageError", str(err), 2)
    except ValidationError as err:
        _fail("ConfigError", str(err).replace("\n", "; "), 2)
    except Exception as err:  # noqa: BLE001 - reported as a machine-readable line
        _fail(type(err).__name__, str(err), 1)


if __name__ == "__main__":
    sys.exit(main())
