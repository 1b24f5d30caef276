import json
import subprocess
import sys

import pytest

from memba import analysis, tasks
from memba.cli import main
from memba.config import TrainConfig
from memba.model import MembaModel


def run(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


def _write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def _error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.mark.parametrize("command", ["train", "finetune", "eval", "gradcheck", "scan-equiv", "theorem-check",
                                     "landscape", "trace", "saliency", "param-count", "export-task", "ablation"])
def test_help_documents_flags(command):
    res = subprocess.run([sys.executable, "-m", "memba.cli", command, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--config", "--seed", "--set"):
        assert flag in res.stdout


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(["train", "--bogus"], capsys)
    assert code == 2 and _error_line(err)["error"] == "UsageError"


def test_malformed_json_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run(["param-count", "--config", str(bad)], capsys)
    assert code == 2 and "malformed JSON" in _error_line(err)["message"]


def test_unknown_config_key_is_rejected(tmp_path, capsys, tiny):
    tiny["modle"] = {}
    code, _, err = run(["param-count", "--config", _write(tmp_path / "c.json", tiny)], capsys)
    assert code == 2 and _error_line(err)["error"] == "ConfigError"


def test_param_count_matches_model(tmp_path, capsys, peft):
    peft["source_checkpoint"] = "unused.ckpt"
    code, out, _ = run(["param-count", "--config", _write(tmp_path / "p.json", peft)], capsys)
    got = json.loads(out)
    model = MembaModel(TrainConfig(**peft).model)
    model.set_mode("peft")
    count, pct = model.count_trainable()
    assert code == 0 and got["trainable"] == count and got["percent"] == pct


def test_train_eval_and_finetune(tmp_path, capsys, tiny, peft):
    cfg = _write(tmp_path / "t.json", tiny)
    code, out, _ = run(["train", "--config", cfg, "--out-dir", str(tmp_path / "run"), "--steps", "10"], capsys)
    assert code == 0
    final = json.loads(out)["final"]
    ckpt = str(tmp_path / "run" / "model.ckpt")
    code, out, _ = run(["eval", "--config", cfg, "--checkpoint", ckpt], capsys)
    ev = json.loads(out)
    assert code == 0 and all(ev[k] == final[k] for k in ("val_loss", "val_accuracy"))
    code, out, _ = run(["finetune", "--config", _write(tmp_path / "f.json", peft), "--source", ckpt,
                        "--out-dir", str(tmp_path / "ft"), "--steps", "4"], capsys)
    assert code == 0 and json.loads(out)["final"]["trainable_pct"] < 100


def test_train_refuses_finetune_modes(tmp_path, capsys, peft):
    peft["source_checkpoint"] = "x.ckpt"
    code, _, err = run(["train", "--config", _write(tmp_path / "p.json", peft)], capsys)
    assert code == 2


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys, tiny):
    code, _, err = run(["eval", "--config", _write(tmp_path / "t.json", tiny), "--checkpoint", "nope.ckpt"], capsys)
    assert code == 1 and _error_line(err)["error"] == "CheckpointError"


def test_set_and_seed_overrides(tmp_path, capsys, tiny):
    cfg = _write(tmp_path / "t.json", tiny)
    code, out, _ = run(["param-count", "--config", cfg, "--set", "model.d_model=8", "--seed", "3"], capsys)
    small = json.loads(out)["total"]
    code, out, _ = run(["param-count", "--config", cfg], capsys)
    assert small < json.loads(out)["total"]
    code, _, err = run(["param-count", "--config", cfg, "--set", "model.d_model"], capsys)
    assert code == 2


def test_gradcheck_primitives(capsys):
    code, out, _ = run(["gradcheck", "--primitives-only"], capsys)
    assert code == 0
    assert out.splitlines()[0].split()[:2] == ["case", "max_rel_err"]
    assert "FAIL" not in out


def test_scan_equiv_small(capsys):
    code, out, _ = run(["scan-equiv", "--cases", "10", "--max-len", "40"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["passed"] and rep["cases"] == 10


def test_theorem_check_artifact(tmp_path, capsys):
    path = tmp_path / "thm.json"
    args = ["theorem-check", "--samples", "2000", "--scales", "0.01", "0.1", "--out", str(path)]
    code, out, _ = run(args, capsys)
    assert code == 0
    first = path.read_bytes()
    run(args, capsys)
    assert path.read_bytes() == first
    rep = json.loads(first)
    assert rep["scales"] == [0.01, 0.1] and len(rep["residual"]) == 2


def test_theorem_check_instance_file(tmp_path, capsys):
    inst = _write(tmp_path / "i.json", {"y": [1.0, -0.5], "u_bar": [0.2, 1.0], "label": 0})
    code, out, _ = run(["theorem-check", "--instance", inst, "--samples", "1000", "--scales", "0.1"], capsys)
    assert code == 0 and json.loads(out)["u_bar"] == [0.2, 1.0]


def test_analysis_commands_write_parseable_files(tmp_path, capsys, tiny):
    cfg = _write(tmp_path / "t.json", tiny)
    code, _, _ = run(["landscape", "--config", cfg, "--steps", "3", "--batch", "2", "--out",
                      str(tmp_path / "l.csv")], capsys)
    assert code == 0 and analysis.LandscapeGrid.from_csv(tmp_path / "l.csv").values.shape == (3, 3)
    code, _, _ = run(["trace", "--config", cfg, "--out", str(tmp_path / "t.csv")], capsys)
    assert code == 0 and analysis.read_csv(tmp_path / "t.csv")[0] == analysis.TRACE_COLUMNS
    code, _, _ = run(["saliency", "--config", cfg, "--out", str(tmp_path / "s.csv"), "--svg",
                      str(tmp_path / "s.svg")], capsys)
    assert code == 0 and (tmp_path / "s.svg").read_text().startswith("<svg")


def test_pathfinder_saliency_grid(tmp_path, capsys):
    cfg = {"task": {"kind": "pathfinder_lite", "grid_size": 8, "patch": 2, "path_len": [4, 8]},
           "model": {"d_model": 8, "state_dim": 2, "d_gate": 2}}
    code, out, _ = run(["saliency", "--config", _write(tmp_path / "p.json", cfg), "--out",
                        str(tmp_path / "s.csv")], capsys)
    header, rows = analysis.read_csv(tmp_path / "s.csv")
    assert code == 0 and header == ["row", "col", "saliency"] and len(rows) == 16


def test_export_task_roundtrip(tmp_path, capsys, tiny):
    out_path = tmp_path / "v.mbtk"
    code, _, _ = run(["export-task", "--config", _write(tmp_path / "t.json", tiny), "--out", str(out_path)], capsys)
    kind, batch = tasks.read_mbtk(out_path)
    assert code == 0 and kind == "selective_copy" and len(batch) == tiny["task"]["val_size"]


def test_ablation_command(tmp_path, capsys):
    task = {"kind": "selective_copy", "seq_len": 16, "num_payload": 2, "vocab_size": 4, "val_size": 20}
    model = {"d_model": 8, "state_dim": 2, "n_layers": 2, "d_gate": 2, "gate_residual": True,
             "lora": {"in_proj": True, "out_proj": True, "default_rank": 2}}
    cfg = {"pretrain": {"task": task, "model": {**model, "use_lim": False, "lora": None}, "steps": 2},
           "finetune": {"task": {**task, "variant": "B"}, "model": model, "steps": 2}}
    code, out, _ = run(["ablation", "--config", _write(tmp_path / "a.json", cfg), "--out-dir",
                        str(tmp_path / "abl")], capsys)
    assert code == 0 and out.count("\n") == 7
    header, rows = analysis.read_csv(tmp_path / "abl" / "ablation.csv")
    assert len(rows) == 5 and header[:3] == ["LIM", "LoRA", "transfer"]


def test_schema(tmp_path, capsys):
    code, out, _ = run(["schema", "--out", str(tmp_path / "s.json")], capsys)
    schema = json.loads((tmp_path / "s.json").read_text())
    assert code == 0 and "task" in schema["properties"] and schema["additionalProperties"] is False
