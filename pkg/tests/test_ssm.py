import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from memba import ssm
from memba import tensor as tn
from memba.tensor import ShapeError, Tensor


def _setup(batch=2, length=7, d=3, n=4, rank=2, seed=0):
    arrays = ssm.init_ssm_params(d, n, rank, seed, prefix="t")
    params = ssm.params_from_arrays(arrays, n, trainable=False)
    x = Tensor(np.random.default_rng(seed).normal(size=(batch, length, d)))
    return params, ssm.compute_ssm_inputs(x, params)


def _loop_oracle(inputs, params):
    """Per-step ZOH through a matrix exponential of the augmented system."""
    delta, b, c, x = (t.data for t in (inputs.delta, inputs.b_seq, inputs.c_seq, inputs.x_seq))
    a = -np.exp(params.a_log.data)
    dsk = params.d_skip.data
    bs, length, d = x.shape
    n = a.shape[1]
    y = np.zeros_like(x)
    for i in range(bs):
        for ch in range(d):
            h = np.zeros(n)
            for t in range(length):
                for k in range(n):
                    m = expm(np.array([[delta[i, t, ch] * a[ch, k], delta[i, t, ch] * b[i, t, k]], [0.0, 0.0]]))
                    h[k] = m[0, 0] * h[k] + m[0, 1] * x[i, t, ch]
                y[i, t, ch] = h @ c[i, t] + dsk[ch] * x[i, t, ch]
    return y


def test_discretize_matches_matrix_exponential():
    delta = np.array([[0.01, 0.7]])
    a = np.array([[-0.5, -3.0], [-1e-3, -2.0]])
    b = np.array([[1.5, -0.25]])
    a_bar, b_bar = ssm.discretize(delta.reshape(1, 2, 1), a, b.reshape(1, 1, 2))
    for ch in range(2):
        for k in range(2):
            m = expm(np.array([[delta[0, ch] * a[ch, k], delta[0, ch] * b[0, k]], [0.0, 0.0]]))
            assert a_bar.data[0, ch, k] == pytest.approx(m[0, 0], rel=1e-14)
            assert b_bar.data[0, ch, k] == pytest.approx(m[0, 1], rel=1e-12)


def test_zoh_phi_series_branch_is_continuous():
    z = np.array([-2e-6, -1e-6 * (1 + 1e-9), -1e-6 * (1 - 1e-9), -1e-9])
    phi = ssm.zoh_phi(z).data
    np.testing.assert_allclose(phi, np.expm1(z) / z, rtol=1e-12)


def test_discretize_rejects_bad_inputs():
    with pytest.raises(ValueError):
        ssm.discretize(np.zeros((1, 1, 1)), -np.ones((1, 1)), np.ones((1, 1, 1)))
    with pytest.raises(ValueError):
        ssm.discretize(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones((1, 1, 1)))


def test_sequential_scan_matches_loop_oracle():
    params, inputs = _setup(batch=2, length=6, d=2, n=3)
    want = _loop_oracle(inputs, params)
    for compiled in (True, False):
        got = ssm.selective_scan_sequential(inputs, params, compiled=compiled).data
        np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-13)


def test_compiled_and_reference_agree_with_gradients():
    params, inputs = _setup(length=11)
    leaves = [inputs.delta, inputs.b_seq, inputs.c_seq, inputs.x_seq, params.a_log, params.d_skip]
    grads = []
    for compiled in (True, False):
        for t in leaves:
            t.requires_grad, t.grad = True, None
        with tn.GradRecord():
            y = ssm.selective_scan_sequential(inputs, params, compiled=compiled)
            loss = tn.sum(tn.mul(y, y))
        tn.backward(loss)
        grads.append([t.grad.copy() for t in leaves])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_linear_recurrence_chunked_equals_sequential(length, chunk, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 1.0, (2, length, 3))
    u = rng.normal(size=(2, length, 3))
    seq = ssm.linear_recurrence(a, u)
    np.testing.assert_allclose(ssm.linear_recurrence(a, u, chunk), seq, rtol=1e-12, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.data())
def test_chunked_scan_equals_sequential(length, data):
    chunk = data.draw(st.integers(1, length))
    params, inputs = _setup(batch=1, length=length, d=2, n=3, seed=length)
    seq = ssm.selective_scan_sequential(inputs, params).data
    chk = ssm.selective_scan_chunked(inputs, params, chunk).data
    assert np.max(np.abs(seq - chk)) < 1e-12


def test_first_output_is_zoh_of_first_input():
    params, inputs = _setup(batch=1, length=1, d=1, n=2)
    y = ssm.selective_scan(inputs, params).data[0, 0, 0]
    dl = inputs.delta.data[0, 0, 0]
    a = -np.exp(params.a_log.data[0])
    x = inputs.x_seq.data[0, 0, 0]
    want = np.sum(np.expm1(dl * a) / a * inputs.b_seq.data[0, 0] * inputs.c_seq.data[0, 0]) * x + x
    assert y == pytest.approx(want, rel=1e-13)


def test_init_ranges():
    arrays = ssm.init_ssm_params(16, 4, 2, seed=5)
    np.testing.assert_allclose(-np.exp(arrays["a_log"][3]), [-1, -2, -3, -4], rtol=1e-15)
    dt = np.log1p(np.exp(arrays["dt_proj_bias"]))
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))


def test_scan_errors():
    params, inputs = _setup()
    with pytest.raises(ValueError):
        ssm.selective_scan_chunked(inputs, params, 0)
    with pytest.raises(ShapeError):
        ssm.compute_ssm_inputs(np.zeros((1, 3, 5)), params)
    with pytest.raises(ShapeError):
        ssm.ScanInputs(inputs.delta, inputs.b_seq, inputs.c_seq, Tensor(np.zeros((2, 6, 3))))
    bad = ssm.ScanInputs(Tensor(-inputs.delta.data), inputs.b_seq, inputs.c_seq, inputs.x_seq)
    with pytest.raises(ValueError):
        ssm.selective_scan(bad, params)


def test_equivalence_sweep_is_deterministic():
    a = ssm.equivalence_sweep(cases=5, seed=3, max_len=40)
    b = ssm.equivalence_sweep(cases=5, seed=3, max_len=40)
    assert a == b
    assert all(1 <= c.chunk_len <= c.seq_len <= 40 for c in a)
