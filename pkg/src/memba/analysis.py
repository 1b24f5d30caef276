"""Diagnostics: the membrane-fluctuation expansion check, loss landscapes,
membrane traces and input saliency.

Expansion check
---------------
A gated output ``z = y * g(u)`` with ``g = silu`` is evaluated at a noisy
membrane ``u = u_bar + eps``.  Expanding the loss to second order around
``z0 = y * g(u_bar)`` and averaging over independent zero-mean fluctuations
with variances ``var_i`` gives

    E[L(z)] = L(z0) + R + O(|eps|^3)
    R = grad L(z0) . (y * g''(u_bar) * var / 2) + 1/2 sum_i (y_i g'(u_bar_i))^2 H_ii var_i

``theorem_check`` measures the remainder ``E[L(z)] - L(z0) - R`` over a range
of fluctuation scales and fits its log-log slope.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import special

from . import tensor as tn
from .model import BlockTrace, MembaModel
from .rng import stream
from .tensor import Parameter, Tensor

DEFAULT_SCALES = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
MIN_SAMPLES = 100


# ---------------------------------------------------------------------------
# gate nonlinearity and its derivatives


def silu(u):
    return u * special.expit(u)


def silu_d1(u):
    s = special.expit(u)
    return s + u * s * (1.0 - s)


def silu_d2(u):
    s = special.expit(u)
    return s * (1.0 - s) * (2.0 + u * (1.0 - 2.0 * s))


# ---------------------------------------------------------------------------
# losses with exact gradient and Hessian


class SmoothLoss(Protocol):
    def value(self, z: np.ndarray) -> np.ndarray: ...  # (..., d) -> (...)
    def grad(self, z: np.ndarray) -> np.ndarray: ...
    def hessian(self, z: np.ndarray) -> np.ndarray: ...


@dataclass
class QuadraticLoss:
    """0.5 (z - target)^T Q (z - target)."""

    q: np.ndarray
    target: np.ndarray

    def value(self, z):
        r = z - self.target
        return 0.5 * np.einsum("...i,ij,...j->...", r, self.q, r)

    def grad(self, z):
        return (z - self.target) @ self.q.T

    def hessian(self, z):
        return self.q.copy()


@dataclass
class SoftmaxCELoss:
    """Cross-entropy of softmax(z) against a class index."""

    label: int

    def value(self, z):
        return special.logsumexp(z, axis=-1) - z[..., self.label]

    def grad(self, z):
        p = special.softmax(z, axis=-1)
        p[..., self.label] -= 1.0
        return p

    def hessian(self, z):
        p = special.softmax(z)
        return np.diag(p) - np.outer(p, p)


# ---------------------------------------------------------------------------
# fluctuation law: per-dimension Gaussian cut at u_bar + eps <= v_th, then
# shifted back to zero mean


@dataclass
class FluctuationLaw:
    sigma: np.ndarray
    bound: np.ndarray  # standardised cut point (v_th - u_bar) / sigma
    mean_shift: np.ndarray  # mean of the cut law, standardised
    var: np.ndarray  # variance of eps after the shift (absolute units)
    kind: str = "truncated_gaussian"

    def sample(self, g: np.random.Generator, n: int) -> np.ndarray:
        u = g.random((n, self.sigma.size))
        if self.kind == "uniform":
            # uniform on [-sqrt(3), sqrt(3)] (unit variance), cut, re-centred
            hi = np.minimum(math.sqrt(3.0), self.bound)
            z = -math.sqrt(3.0) + u * (hi + math.sqrt(3.0))
        else:
            z = special.ndtri(u * special.ndtr(self.bound))
        return (z - self.mean_shift) * self.sigma


def fluctuation_law(u_bar: np.ndarray, scale: float, v_th: float, kind: str = "truncated_gaussian",
                    sigma: np.ndarray | None = None, floor: float = 0.1) -> FluctuationLaw:
    if sigma is None:
        sigma = scale * np.abs(u_bar) + scale * floor
    sigma = np.asarray(sigma, dtype=float)
    safe = np.where(sigma > 0, sigma, 1.0)
    b = np.where(sigma > 0, (v_th - u_bar) / safe, np.inf)
    if kind == "uniform":
        r3 = math.sqrt(3.0)
        hi = np.minimum(r3, b)
        mean = (hi - r3) / 2.0
        var = (hi + r3) ** 2 / 12.0
    elif kind == "truncated_gaussian":
        # moments of a standard normal cut above at b
        ratio = np.exp(-0.5 * b * b - special.log_ndtr(b)) / math.sqrt(2 * math.pi)
        ratio = np.where(np.isfinite(b), ratio, 0.0)
        mean = -ratio
        var = 1.0 - np.where(np.isfinite(b), b, 0.0) * ratio - ratio * ratio
    else:
        raise ValueError(f"unknown fluctuation law {kind!r}")
    return FluctuationLaw(sigma, b, mean, var * sigma * sigma, kind)


# ---------------------------------------------------------------------------
# the expansion check


@dataclass
class TheoremReport:
    scales: list[float]
    expected_loss: list[float]  # control-variate Monte-Carlo estimate of E[L]
    expected_loss_plain: list[float]  # plain sample mean of L
    plain_stderr: list[float]
    reference_loss: float
    r_term: list[float]
    residual: list[float]
    residual_stderr: list[float]
    slope: float
    gamma: list[float]
    lambda_max: float
    bound_margin: list[float]
    samples: int
    seed: int
    law: str = "truncated_gaussian"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _pieces(y, u_bar, loss):
    z0 = y * silu(u_bar)
    grad = loss.grad(z0)
    hess = loss.hessian(z0)
    a = grad * y * silu_d1(u_bar)  # dL/deps at 0
    m = np.outer(y * silu_d1(u_bar), y * silu_d1(u_bar)) * hess + np.diag(grad * y * silu_d2(u_bar))
    return z0, grad, hess, a, m


def r_term(y, u_bar, loss: SmoothLoss, var) -> float:
    """Closed-form second-order correction for per-dimension variances ``var``."""
    z0 = y * silu(u_bar)
    grad, hess = loss.grad(z0), loss.hessian(z0)
    first = float(grad @ (0.5 * y * silu_d2(u_bar) * var))
    second = 0.5 * float(np.sum((y * silu_d1(u_bar)) ** 2 * np.diag(hess) * var))
    return first + second


def theorem_check(y, u_bar, loss: SmoothLoss, scales=DEFAULT_SCALES, samples: int = 100_000, seed: int = 0,
                  v_th: float = 1.0, law: str = "truncated_gaussian", floor: float = 0.1,
                  batch: int = 50_000) -> TheoremReport:
    """Monte-Carlo check of ``E[L(y * g(u_bar + eps))] = L(y * g(u_bar)) + R + O(eps^3)``.

    The residual is estimated with the exact second-order Taylor polynomial
    in ``eps`` as a control variate: its mean under the fluctuation law is
    known in closed form from the law's variances, so subtracting it per
    sample removes the O(eps) and O(eps^2) sampling noise and leaves noise of
    the same order as the remainder being measured.  The plain sample mean is
    reported alongside.
    """
    y, u_bar = np.asarray(y, float), np.asarray(u_bar, float)
    if y.shape != u_bar.shape or y.ndim != 1:
        raise ValueError("y and u_bar must be equal-length vectors")
    if samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {samples}")
    if np.ndim(loss.value(y)) != 0:
        raise ValueError("loss must map a vector to a scalar")
    z0, grad, hess, a, m = _pieces(y, u_bar, loss)
    ref = float(loss.value(z0))
    lam = float(np.linalg.eigvalsh(hess).max())
    out = {k: [] for k in ("el", "plain", "perr", "r", "res", "rerr", "gamma", "margin")}
    for s_idx, scale in enumerate(scales):
        r_val = 0.0
        if scale == 0:
            out["el"].append(ref), out["plain"].append(ref), out["perr"].append(0.0)
            out["r"].append(0.0), out["res"].append(0.0), out["rerr"].append(0.0)
            out["gamma"].append(0.0), out["margin"].append(0.0)
            continue
        fl = fluctuation_law(u_bar, scale, v_th, law, floor=floor)
        r_val = r_term(y, u_bar, loss, fl.var)
        g = stream(seed, "theorem", s_idx)
        s1 = s2 = c1 = c2 = 0.0
        done = 0
        while done < samples:
            n = min(batch, samples - done)
            eps = fl.sample(g, n)
            lv = loss.value(y * silu(u_bar + eps))
            # second-order Taylor polynomial; its exact mean is R
            t2 = eps @ a + 0.5 * np.einsum("ni,ij,nj->n", eps, m, eps)
            d = lv - ref - t2
            s1, s2 = s1 + lv.sum(), s2 + (lv * lv).sum()
            c1, c2 = c1 + d.sum(), c2 + (d * d).sum()
            done += n
        plain = s1 / samples
        plain_err = math.sqrt(max(s2 / samples - plain * plain, 0.0) / samples)
        res = c1 / samples
        res_err = math.sqrt(max(c2 / samples - res * res, 0.0) / samples)
        out["el"].append(ref + r_val + res)
        out["plain"].append(plain)
        out["perr"].append(plain_err)
        out["r"].append(r_val)
        out["res"].append(res)
        out["rerr"].append(res_err)
        eps2 = float(fl.var.sum())
        gam = float(np.sum((y * silu_d1(u_bar)) ** 2 * fl.var) / eps2)
        out["gamma"].append(gam)
        slack = abs(float(grad @ (0.5 * y * silu_d2(u_bar) * fl.var)))
        out["margin"].append(0.5 * gam * lam * eps2 + slack - r_val)
    return TheoremReport(
        scales=[float(s) for s in scales], expected_loss=out["el"], expected_loss_plain=out["plain"],
        plain_stderr=out["perr"], reference_loss=ref, r_term=out["r"], residual=out["res"],
        residual_stderr=out["rerr"], slope=fit_slope(scales, out["res"]), gamma=out["gamma"], lambda_max=lam,
        bound_margin=out["margin"], samples=samples, seed=seed, law=law,
    )


def fit_slope(scales, values) -> float:
    """Least-squares slope of log|value| against log(scale) over positive scales."""
    pts = [(math.log(s), math.log(abs(v))) for s, v in zip(scales, values) if s > 0 and v != 0]
    if len(pts) < 2:
        return float("nan")
    x, yv = np.array(pts).T
    return float(np.polyfit(x, yv, 1)[0])


def r_bound_check(report: TheoremReport, tol: float = 1e-12) -> list[bool]:
    """Per scale: R <= (gamma / 2) lambda_max eps^2 + |gradient term|."""
    return [m >= -tol * max(1.0, abs(r)) for m, r in zip(report.bound_margin, report.r_term)]


def random_instance(seed: int, d: int = 4, v_th: float = 1.0, saturated: int = 0):
    """Random (y, u_bar, loss) with u_bar below the threshold.

    ``saturated`` dimensions sit exactly at the threshold, where the cut
    fluctuation law is one-sided at every scale.
    """
    g = stream(seed, "theorem-instance", d)
    y = g.normal(size=d)
    u_bar = g.uniform(-1.0, 0.9 * v_th, d)
    u_bar[:saturated] = v_th
    return y, u_bar, SoftmaxCELoss(int(g.integers(d)))


# ---------------------------------------------------------------------------
# CSV helpers


def write_csv(path: str | Path | None, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def read_csv(path_or_text: str | Path) -> tuple[list[str], list[list[str]]]:
    p = Path(path_or_text) if not str(path_or_text).count("\n") else None
    text = p.read_text() if p is not None else str(path_or_text)
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# loss landscape


@dataclass
class LandscapeGrid:
    seeds: tuple[int, int]
    radius: float
    steps: int
    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray  # (len(betas), len(alphas))

    @property
    def minimum(self) -> tuple[float, float, float]:
        i, j = np.unravel_index(np.argmin(self.values), self.values.shape)
        return float(self.values[i, j]), float(self.alphas[j]), float(self.betas[i])

    def to_csv(self, path=None) -> str:
        rows = [[b] + list(map(float, r)) for b, r in zip(self.betas, self.values)]
        return write_csv(path, ["beta\\alpha"] + [repr(float(a)) for a in self.alphas], rows)

    @classmethod
    def from_csv(cls, path_or_text, seeds=(0, 0)) -> "LandscapeGrid":
        header, rows = read_csv(path_or_text)
        alphas = np.array([float(a) for a in header[1:]])
        betas = np.array([float(r[0]) for r in rows])
        values = np.array([[float(v) for v in r[1:]] for r in rows])
        return cls(tuple(seeds), float(np.max(np.abs(alphas))), len(alphas), alphas, betas, values)


def filter_normalized_direction(params: list[Parameter], seed: int) -> list[np.ndarray]:
    """Gaussian direction with each row (filter) rescaled to the norm of the
    matching parameter row; 1-D parameters are rescaled as a whole."""
    out = []
    for p in params:
        d = stream(seed, "landscape", p.name).normal(size=p.shape)
        w = p.data.astype(float)
        if w.ndim >= 2:
            axes = tuple(range(1, w.ndim))
            wn = np.sqrt(np.sum(w * w, axis=axes, keepdims=True))
            dn = np.sqrt(np.sum(d * d, axis=axes, keepdims=True))
        else:
            wn, dn = np.linalg.norm(w), np.linalg.norm(d)
        out.append(d * wn / np.where(dn > 0, dn, 1.0))
    return out


def loss_landscape(model: MembaModel, loss_fn: Callable[[MembaModel], float], radius: float = 1.0,
                   steps: int = 25, seed: int = 0) -> LandscapeGrid:
    """Loss on a grid ``theta + alpha d1 + beta d2`` over trainable parameters.

    ``loss_fn`` evaluates the model on a fixed batch.  Parameters are
    restored afterwards.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    params = [p for p in model.parameters() if p.trainable]
    seeds = (seed, seed + 1)
    d1 = filter_normalized_direction(params, seeds[0])
    d2 = filter_normalized_direction(params, seeds[1])
    c = (steps - 1) / 2
    coords = np.array([radius * (i - c) / c if c else 0.0 for i in range(steps)])
    base = [p.data.copy() for p in params]
    values = np.empty((steps, steps))
    try:
        for i, beta in enumerate(coords):
            for j, alpha in enumerate(coords):
                for p, w, a, b in zip(params, base, d1, d2):
                    p.value.data = (w + alpha * a + beta * b).astype(w.dtype)
                with tn.no_record():
                    values[i, j] = loss_fn(model)
    finally:
        for p, w in zip(params, base):
            p.value.data = w
    return LandscapeGrid(seeds, radius, steps, coords, coords.copy(), values)


# ---------------------------------------------------------------------------
# membrane trace

TRACE_COLUMNS = ["layer", "token", "chunk", "mean", "min", "max"]


@dataclass
class MembraneTrace:
    rows: list[list] = field(default_factory=list)
    v_th: float = 1.0
    peak: float = -math.inf  # largest per-feature membrane value seen

    def to_csv(self, path=None) -> str:
        return write_csv(path, TRACE_COLUMNS, self.rows)


def membrane_trace(model: MembaModel, inputs: np.ndarray, layers: list[int] | None = None) -> MembraneTrace:
    """Per-token membrane statistics (over the gate features) for one sequence.

    ``chunk`` is the LIM chunk a token falls in, or -1 for the zero-padded
    tail that does not fill a whole chunk.
    """
    if not model.cfg.use_lim:
        raise ValueError("membrane traces need a model with use_lim = true")
    inputs = np.asarray(inputs)
    if inputs.ndim == (1 if model.cfg.vocab_size is not None else 2):
        inputs = inputs[None]
    traces: list[BlockTrace] = []
    with tn.no_record():
        model.forward(inputs[:1], traces)
    layers = list(range(len(traces))) if layers is None else layers
    out = MembraneTrace(v_th=model.cfg.lim.to_config().v_th)
    for li in layers:
        if not 0 <= li < len(traces):
            raise ValueError(f"layer {li} out of range")
        m = traces[li].membrane.data[0]  # (L, d_gate)
        L = m.shape[0]
        chunk_len = L // model.cfg.lim.num_chunks
        used = chunk_len * model.cfg.lim.num_chunks
        out.peak = max(out.peak, float(m.max()))
        for t in range(L):
            chunk = t // chunk_len if t < used else -1
            out.rows.append([li, t, chunk, float(m[t].mean()), float(m[t].min()), float(m[t].max())])
    return out


# ---------------------------------------------------------------------------
# saliency


def input_saliency(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """|d fn(x) / d x| summed over the last (feature) axis.  ``fn`` must return a scalar."""
    xt = Tensor(np.array(x, dtype=float), requires_grad=True)
    with tn.GradRecord():
        target = fn(xt)
    if target.size != 1:
        raise ValueError("saliency target must be a scalar")
    tn.backward(target)
    return np.abs(xt.grad).sum(axis=-1)


def model_saliency(model: MembaModel, inputs: np.ndarray, target: int | None = None,
                   labels: np.ndarray | None = None) -> np.ndarray:
    """Per-token saliency of one sequence.

    The scalar is the ``target`` class logit for pooled heads, or the sum of
    the labelled logits over ``labels``-masked positions for token heads
    (``labels`` uses -1 for unscored positions).  For token-id inputs the
    gradient is taken with respect to the embedded vectors.
    """
    inputs = np.asarray(inputs)
    pool = model.cfg.head == "pool"

    def score(out: Tensor) -> Tensor:
        if pool:
            return tn.getitem(out, (0, int(target or 0)))
        lab = np.asarray(labels)
        pos = np.nonzero(lab >= 0)[0]
        return tn.sum(tn.getitem(out, (0, pos, lab[pos])))

    if model.cfg.vocab_size is not None:
        with tn.no_record():
            emb = model.embed(inputs[None]).data[0]
        return input_saliency(lambda e: score(model.readout(model.body(tn.reshape(e, (1,) + e.shape)))), emb)
    return input_saliency(lambda x: score(model(tn.reshape(x, (1,) + x.shape))), inputs.astype(float))


def saliency_rows(sal: np.ndarray, grid: tuple[int, int] | None = None) -> tuple[list[str], list[list]]:
    if grid is None:
        return ["token", "saliency"], [[t, float(v)] for t, v in enumerate(sal)]
    sal = sal.reshape(grid)
    return ["row", "col", "saliency"], [[r, c, float(sal[r, c])] for r in range(grid[0]) for c in range(grid[1])]


# colour ramp for heatmaps: linear in value from white (0) to dark blue (max)
RAMP_LOW = (255, 255, 255)
RAMP_HIGH = (8, 48, 107)


def heatmap_svg(values: np.ndarray, cell: int = 12) -> str:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    top = float(values.max()) if values.size and values.max() > 0 else 1.0
    h, w = values.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}">']
    for r in range(h):
        for c in range(w):
            f = values[r, c] / top
            rgb = [round(lo + f * (hi - lo)) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
            parts.append(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                         f'fill="#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
