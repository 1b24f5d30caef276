import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from memba import analysis as an
from memba import tensor as tn
from memba.gradcheck import small_model_config
from memba.model import MembaModel
from memba.rng import stream
from memba.tasks import TaskSpec, generate
from memba.train import task_loss


@settings(max_examples=40, deadline=None)
@given(st.floats(-20, 20))
def test_silu_derivatives_match_fd(u):
    h = 1e-5
    assert an.silu_d1(u) == pytest.approx((an.silu(u + h) - an.silu(u - h)) / (2 * h), abs=1e-8)
    assert an.silu_d2(u) == pytest.approx((an.silu_d1(u + h) - an.silu_d1(u - h)) / (2 * h), abs=1e-7)


@pytest.mark.parametrize("loss", [an.SoftmaxCELoss(1), an.QuadraticLoss(np.array([[2.0, 0.5], [0.5, 1.0]]),
                                                                        np.array([0.3, -0.2]))])
def test_loss_grad_and_hessian_match_fd(loss):
    z = np.array([0.4, -1.1])
    h = 1e-5
    e = np.eye(2)
    fd_g = np.array([(loss.value(z + h * e[i]) - loss.value(z - h * e[i])) / (2 * h) for i in range(2)])
    fd_h = np.array([(loss.grad(z + h * e[i]) - loss.grad(z - h * e[i])) / (2 * h) for i in range(2)])
    np.testing.assert_allclose(loss.grad(z), fd_g, atol=1e-9)
    np.testing.assert_allclose(loss.hessian(z), fd_h, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 0.99), st.floats(1e-3, 0.5))
def test_truncated_gaussian_moments_match_scipy(u_bar, scale):
    fl = an.fluctuation_law(np.array([u_bar]), scale, 1.0)
    sigma = fl.sigma[0]
    ref = stats.truncnorm(-np.inf, (1.0 - u_bar) / sigma, loc=0.0, scale=sigma)
    assert fl.mean_shift[0] * sigma == pytest.approx(ref.mean(), rel=1e-8, abs=1e-15)
    assert fl.var[0] == pytest.approx(ref.var(), rel=1e-8)


@pytest.mark.parametrize("kind", ["truncated_gaussian", "uniform"])
def test_law_samples_are_centred_with_stated_variance(kind):
    u_bar = np.array([1.0, 0.5, -0.5])
    fl = an.fluctuation_law(u_bar, 0.3, 1.0, kind)
    eps = fl.sample(stream(0, "law-test"), 400_000)
    se = np.sqrt(fl.var / len(eps))
    assert np.all(np.abs(eps.mean(axis=0)) < 5 * se)
    np.testing.assert_allclose(eps.var(axis=0), fl.var, rtol=0.02)
    # the cut sits at the threshold, the shift moves it by the removed mean
    assert np.all(u_bar + eps.max(axis=0) <= 1.0 - fl.mean_shift * fl.sigma + 1e-12)


def test_unknown_law():
    with pytest.raises(ValueError):
        an.fluctuation_law(np.zeros(2), 0.1, 1.0, "cauchy")


def test_r_term_matches_numerical_hessian():
    y, u_bar, loss = an.random_instance(3, d=3)
    var = np.array([0.01, 0.04, 0.02])

    def f(eps):
        return float(loss.value(y * an.silu(u_bar + eps)))

    h = 1e-4
    diag = [(f(h * e) - 2 * f(0 * e) + f(-h * e)) / h**2 for e in np.eye(3)]
    assert an.r_term(y, u_bar, loss, var) == pytest.approx(0.5 * np.dot(diag, var), rel=1e-6)


def test_theorem_check_residual_slope_and_bound():
    y, u_bar, loss = an.random_instance(0, d=4, saturated=2)
    rep = an.theorem_check(y, u_bar, loss, samples=100_000, seed=0)
    assert 2.5 <= rep.slope <= 3.5
    assert all(an.r_bound_check(rep))
    for el, plain, err in zip(rep.expected_loss, rep.expected_loss_plain, rep.plain_stderr):
        assert abs(el - plain) < 5 * err + 1e-12


def test_theorem_check_is_deterministic_and_validates():
    y, u_bar, loss = an.random_instance(1, d=3)
    a = an.theorem_check(y, u_bar, loss, scales=(0.0, 0.01, 0.1), samples=2000, seed=4)
    b = an.theorem_check(y, u_bar, loss, scales=(0.0, 0.01, 0.1), samples=2000, seed=4)
    assert a.to_dict() == b.to_dict()
    assert a.residual[0] == 0.0 and a.expected_loss[0] == a.reference_loss
    with pytest.raises(ValueError):
        an.theorem_check(y, u_bar, loss, samples=10)
    with pytest.raises(ValueError):
        an.theorem_check(y, u_bar[:2], loss)


def test_fit_slope_exact_power():
    s = np.array([1e-3, 1e-2, 1e-1])
    assert an.fit_slope(s, 7 * s**3) == pytest.approx(3.0)
    assert math.isnan(an.fit_slope([1e-2], [1.0]))


def test_csv_roundtrip(tmp_path):
    text = an.write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 0.1], [2, 1 / 3]])
    header, rows = an.read_csv(tmp_path / "x.csv")
    assert header == ["a", "b"] and float(rows[1][1]) == 1 / 3
    assert an.read_csv(text) == (header, rows)


def _copy_setup():
    task = TaskSpec(kind="selective_copy", seq_len=16, num_payload=2, vocab_size=4)
    cfg = small_model_config(vocab_size=6, num_outputs=5)
    batch = generate(task, "val", 4)
    model = MembaModel(cfg)

    def loss_fn(m):
        return task_loss(m(batch.inputs), batch, "selective_copy").item()

    return model, loss_fn


def test_landscape_centre_restore_and_determinism(tmp_path):
    model, loss_fn = _copy_setup()
    before = [p.data.copy() for p in model.parameters()]
    grid = an.loss_landscape(model, loss_fn, radius=0.5, steps=5, seed=2)
    assert grid.alphas[2] == 0.0 and grid.values[2, 2] == loss_fn(model)
    for p, w in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.data, w)
    again = an.loss_landscape(model, loss_fn, radius=0.5, steps=5, seed=2)
    assert grid.to_csv() == again.to_csv()
    back = an.LandscapeGrid.from_csv(grid.to_csv(tmp_path / "l.csv"))
    np.testing.assert_array_equal(back.values, grid.values)
    np.testing.assert_array_equal(back.alphas, grid.alphas)
    with pytest.raises(ValueError):
        an.loss_landscape(model, loss_fn, steps=0)


def test_filter_normalised_rows():
    model, _ = _copy_setup()
    params = model.parameters()
    for p, d in zip(params, an.filter_normalized_direction(params, 0)):
        if p.data.ndim >= 2:
            np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.linalg.norm(p.data, axis=1), rtol=1e-12)
        else:
            assert np.linalg.norm(d) == pytest.approx(np.linalg.norm(p.data), rel=1e-12)


def test_membrane_trace():
    cfg = small_model_config(lim={"num_chunks": 2, "leak": 0.5, "v_th": 0.1})
    model = MembaModel(cfg)
    ids = np.random.default_rng(0).integers(0, 6, 9)
    tr = an.membrane_trace(model, ids)
    assert len(tr.rows) == 2 * 9
    assert tr.peak <= 0.1
    assert [r[2] for r in tr.rows[:9]] == [0, 0, 0, 0, 1, 1, 1, 1, -1]
    header, rows = an.read_csv(tr.to_csv())
    assert header == an.TRACE_COLUMNS and len(rows) == 18
    assert tr.to_csv() == an.membrane_trace(model, ids).to_csv()
    with pytest.raises(ValueError):
        an.membrane_trace(MembaModel(small_model_config(use_lim=False)), ids)
    with pytest.raises(ValueError):
        an.membrane_trace(model, ids, layers=[5])


def test_input_saliency_matches_analytic():
    w = np.array([[1.0, -2.0], [0.5, 0.0], [0.0, 3.0]])
    x = np.random.default_rng(0).normal(size=(3, 2))
    sal = an.input_saliency(lambda t: tn.sum(tn.mul(tn.mul(t, t), w)), x)
    np.testing.assert_allclose(sal, np.abs(2 * x * w).sum(axis=1))
    with pytest.raises(ValueError):
        an.input_saliency(lambda t: t, x)


def test_model_saliency_shapes():
    model, _ = _copy_setup()
    ids = np.random.default_rng(1).integers(0, 6, 8)
    labels = np.full(8, -1)
    labels[-2:] = [1, 2]
    sal = an.model_saliency(model, ids, labels=labels)
    assert sal.shape == (8,) and np.all(sal >= 0)
    pooled = MembaModel(small_model_config(vocab_size=None, in_features=3, head="pool"))
    x = np.random.default_rng(2).normal(size=(8, 3))
    assert an.model_saliency(pooled, x, target=1).shape == (8,)


def test_heatmap_svg_parses():
    svg = an.heatmap_svg(np.arange(6.0).reshape(2, 3))
    root = ET.fromstring(svg)
    rects = [e for e in root if e.tag.endswith("rect")]
    assert len(rects) == 6
    assert rects[0].get("fill") == "#ffffff" and rects[-1].get("fill") == "#08306b"
    header, rows = an.saliency_rows(np.arange(4.0), (2, 2))
    assert header == ["row", "col", "saliency"] and rows[-1] == [1, 1, 3.0]
