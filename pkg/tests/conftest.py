import copy
import sys

import pytest

from memba.config import TrainConfig
from memba.train import train

TASK = {"kind": "selective_copy", "seq_len": 16, "num_payload": 2, "vocab_size": 4, "val_size": 40}
TINY = {
    "task": TASK,
    "model": {"d_model": 16, "state_dim": 4, "n_layers": 2, "d_gate": 4},
    "steps": 20, "batch_size": 8, "eval_every": 10,
}
PEFT = {
    "task": {**TASK, "variant": "B"},
    "model": {"d_model": 16, "state_dim": 4, "n_layers": 2, "d_gate": 4, "gate_residual": True,
              "lora": {"in_proj": True, "out_proj": True, "default_rank": 2}},
    "mode": "finetune_peft", "steps": 20, "batch_size": 8, "eval_every": 10,
}


@pytest.fixture
def tiny():
    return copy.deepcopy(TINY)


@pytest.fixture
def peft():
    return copy.deepcopy(PEFT)


@pytest.fixture(scope="session")
def base_checkpoint(tmp_path_factory):
    """A plain (no LIM) tiny model pretrained on variant A."""
    out = tmp_path_factory.mktemp("base")
    cfg = copy.deepcopy(TINY)
    cfg["model"]["use_lim"] = False
    return train(TrainConfig(**cfg, out_dir=str(out))).checkpoint


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
