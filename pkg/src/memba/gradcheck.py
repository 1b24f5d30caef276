"""Central-difference checks of every recorded operation and of whole models.

Each case maps some leaf tensors to an output; the scalar under test is
``sum(out * w)`` with a fixed random ``w`` so that no output entry is silently
ignored.  The error of a case is the largest over its leaves of

    max|g_analytic - g_fd| / max(max|g_analytic|, max|g_fd|)

taken over the checked coordinates (all of them, or a seeded sample for
larger tensors).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import lim, lora, ssm
from . import tensor as tn
from .model import MembaModel, ModelConfig, rmsnorm
from .rng import stream
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)

    def row(self) -> str:
        flag = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} {self.max_rel_err:10.3e} {self.tol:8.0e} {self.checked:6d}  {flag}"


@dataclass
class Case:
    name: str
    fn: Callable[..., Tensor]
    leaves: list[Tensor]
    tol: float = PRIMITIVE_TOL
    max_coords: int | None = None


def check(case: Case, h: float = STEP, seed: int = 0) -> CheckResult:
    with tn.no_record():
        out_shape = tn.as_tensor(case.fn(*case.leaves)).shape
    w = stream(seed, "gradcheck", case.name).normal(size=out_shape)

    def scalar() -> float:
        with tn.no_record():
            return float(np.sum(case.fn(*case.leaves).data * w))

    for t in case.leaves:
        t.requires_grad, t.grad = True, None
    with tn.GradRecord():
        loss = tn.sum(tn.mul(case.fn(*case.leaves), w))
    tn.backward(loss)

    g = stream(seed, "gradcheck-coords", case.name)
    worst, checked = 0.0, 0
    for t in case.leaves:
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if case.max_coords is not None and flat.size > case.max_coords:
            coords = np.sort(g.choice(flat.size, case.max_coords, replace=False))
        fd = np.empty(len(coords))
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + h
            up = scalar()
            flat[i] = old - h
            down = scalar()
            flat[i] = old
            fd[k] = (up - down) / (2 * h)
        a = ana.reshape(-1)[coords]
        scale = max(np.max(np.abs(a)), np.max(np.abs(fd)))
        if scale > 0:
            worst = max(worst, float(np.max(np.abs(a - fd)) / scale))
        checked += len(coords)
    return CheckResult(case.name, worst, case.tol, checked)


# ---------------------------------------------------------------------------
# cases


def _t(g, *shape, low=None, high=None) -> Tensor:
    if low is not None:
        return Tensor(g.uniform(low, high, shape))
    return Tensor(g.normal(size=shape))


def primitive_cases(seed: int = 0) -> list[Case]:
    g = stream(seed, "gradcheck-inputs")
    cases = [
        Case("add", tn.add, [_t(g, 3, 4), _t(g, 4)]),
        Case("sub", tn.sub, [_t(g, 3, 1), _t(g, 3, 4)]),
        Case("mul", tn.mul, [_t(g, 2, 3, 4), _t(g, 3, 1)]),
        Case("div", tn.div, [_t(g, 3, 4), _t(g, 4, low=0.5, high=2.0)]),
        Case("neg", tn.neg, [_t(g, 5)]),
        Case("exp", tn.exp, [_t(g, 3, 4)]),
        Case("log", tn.log, [_t(g, 3, 4, low=0.2, high=3.0)]),
        Case("power", lambda a: tn.power(a, -0.5), [_t(g, 6, low=0.3, high=2.0)]),
        Case("sigmoid", tn.sigmoid, [Tensor(np.linspace(-30, 30, 13))]),
        Case("silu", tn.silu, [Tensor(np.linspace(-30, 30, 13))]),
        Case("softplus", tn.softplus, [Tensor(np.linspace(-30, 30, 13))]),
        # keep entries away from the threshold, where the map jumps
        Case("reset", lambda a: tn.reset(a, 1.0), [Tensor(np.array([-2.0, -0.3, 0.4, 0.9, 1.2, 2.5]))]),
        Case("where", lambda a, b: tn.where(np.array([True, False, True, False]), a, b), [_t(g, 3, 4), _t(g, 4)]),
        Case("matmul", tn.matmul, [_t(g, 2, 3, 4), _t(g, 4, 5)]),
        Case("matmul_vec", tn.matmul, [_t(g, 4), _t(g, 4, 3)]),
        Case("transpose", lambda a: tn.transpose(a, (2, 0, 1)), [_t(g, 2, 3, 4)]),
        Case("reshape", lambda a: tn.reshape(a, (6, 4)), [_t(g, 2, 3, 4)]),
        Case("getitem", lambda a: tn.getitem(a, (slice(None), 1)), [_t(g, 3, 4)]),
        Case("getitem_gather", lambda a: tn.getitem(a, np.array([0, 2, 2])), [_t(g, 3, 4)]),
        Case("take_rows", lambda a: tn.take_rows(a, np.array([[1, 0], [1, 3]])), [_t(g, 4, 3)]),
        Case("concatenate", lambda a, b: tn.concatenate([a, b], axis=1), [_t(g, 2, 3), _t(g, 2, 2)]),
        Case("split", lambda a: tn.mul(tn.split(a, [1, 3], axis=-1)[1], 2.0), [_t(g, 2, 4)]),
        Case("stack", lambda a, b: tn.stack([a, b], axis=1), [_t(g, 2, 3), _t(g, 2, 3)]),
        Case("sum", lambda a: tn.sum(a, axis=1), [_t(g, 2, 3, 4)]),
        Case("mean", lambda a: tn.mean(a, axis=(0, 2), keepdims=True), [_t(g, 2, 3, 4)]),
        Case("cross_entropy", lambda a: tn.cross_entropy(a, np.array([[0, 2], [1, 1]]),
                                                         np.array([[True, False], [True, True]])), [_t(g, 2, 2, 3)]),
        Case("mse", lambda a: tn.mse(a, np.arange(4.0)), [_t(g, 4)]),
        Case("rmsnorm", rmsnorm, [_t(g, 2, 3, 5), _t(g, 5)]),
        Case("zoh_phi", ssm.zoh_phi, [Tensor(np.array([-3.0, -0.5, -1e-4, -1e-8, 0.0]))]),
    ]
    delta, a_diag, b = _t(g, 2, 3, low=0.05, high=1.0), _t(g, 3, 4, low=-3.0, high=-0.5), _t(g, 2, 4)
    cases.append(Case("discretize", lambda dt, a, bb: tn.concatenate(
        [tn.reshape(v, (-1,)) for v in ssm.discretize(tn.reshape(dt, (2, 3, 1)), a, tn.reshape(bb, (2, 1, 4)))]),
        [delta, a_diag, b]))
    cases += _scan_cases(g)
    base, down, up = _t(g, 5, 6), _t(g, 2, 6), _t(g, 5, 2)
    cases.append(Case("lora", lambda w, dn, u, x: lora.adapted_forward(
        w, lora.LoRAAdapter(tn.Parameter("d", dn), tn.Parameter("u", u), 0.5), x), [base, down, up, _t(g, 3, 6)]))
    cfg = lim.LIMConfig(num_chunks=3, tau=0.5, v_th=1.0)
    # values either well below the threshold or far above it, so finite
    # differences never straddle a reset
    x_lim = g.uniform(-0.6, 0.45, (2, 7, 3))
    x_lim[g.uniform(size=x_lim.shape) < 0.3] = 1.5

    def lim_fn(x, prev):
        out, avg = lim.lim_forward(x, cfg, lim.LIMState(prev))
        return tn.concatenate([tn.reshape(out, (-1,)), tn.reshape(avg.u, (-1,))])

    cases.append(Case("lim", lim_fn, [Tensor(x_lim), Tensor(g.uniform(-0.4, 0.4, (2, 2, 3)))]))
    return cases


def _scan_cases(g) -> list[Case]:
    b_, L, d, n = 2, 6, 3, 4
    arrays = ssm.init_ssm_params(d, n, 2, 0, prefix="gradcheck")
    params = ssm.params_from_arrays(arrays, n)
    x = _t(g, b_, L, d)
    leaves = [x, params.a_log, params.x_proj_weight, params.dt_proj_weight, params.dt_proj_bias, params.d_skip]

    def make(chunk, compiled=True):
        def fn(*_):
            inputs = ssm.compute_ssm_inputs(x, params)
            if chunk is None:
                return ssm.selective_scan_sequential(inputs, params, compiled=compiled)
            return ssm.selective_scan_chunked(inputs, params, chunk)
        return fn

    return [
        Case("scan_compiled", make(None), leaves),
        Case("scan_reference", make(None, compiled=False), leaves),
        Case("scan_chunked", make(4), leaves),
    ]


def small_model_config(**kw) -> ModelConfig:
    base = dict(d_model=8, expand=2, state_dim=4, n_layers=2, d_gate=4, vocab_size=6, num_outputs=5,
                head="token", lim={"num_chunks": 2, "leak": 0.5, "v_th": 1.0}, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def model_cases(seed: int = 0, max_coords: int = 12) -> list[Case]:
    g = stream(seed, "gradcheck-model")
    cfg = small_model_config(lora={"in_proj": True, "out_proj": True, "default_rank": 2})
    model = MembaModel(cfg)
    # move off the initial point: adapters start at zero, and the small
    # initial step sizes leave a_log with gradients near rounding level
    for p in model.parameters():
        if "lora.up" in p.name:
            p.value.data[...] = g.normal(scale=0.1, size=p.shape)
        if p.name.endswith("dt_proj.bias"):
            p.value.data += 3.0
    block = model.blocks[0]
    x = Tensor(g.normal(size=(2, 6, cfg.d_model)))
    ids = g.integers(0, cfg.vocab_size, (2, 6))
    bp = [p.value for p in block.parameters()]
    mp = [p.value for p in model.parameters()]
    return [
        Case("memba_block", lambda *_: block(x)[0], [x] + bp, MODEL_TOL, max_coords),
        Case("memba_model_2block", lambda *_: model(ids), mp, MODEL_TOL, max_coords),
    ]


def run_suite(seed: int = 0, include_models: bool = True) -> list[CheckResult]:
    cases = primitive_cases(seed) + (model_cases(seed) if include_models else [])
    return [check(c, seed=seed) for c in cases]


def format_table(results: list[CheckResult]) -> str:
    head = f"{'case':<28} {'max_rel_err':>10} {'tol':>8} {'coords':>6}  status"
    return "\n".join([head] + [r.row() for r in results])
