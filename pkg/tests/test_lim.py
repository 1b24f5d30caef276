import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memba import lim
from memba import tensor as tn
from memba.lim import LIMConfig, LIMState, chunk_plan, lim_forward
from memba.tensor import ShapeError, Tensor


def _reference(x, num_chunks, tau, v_th, prev=None):
    """Plain loops over chunks and positions."""
    b, L, d = x.shape
    l = L // num_chunks
    u = np.zeros((b, l, d)) if prev is None else prev.copy()
    out = np.zeros_like(x)
    mems = []
    for i in range(num_chunks):
        for j in range(l):
            v = tau * u[:, j] + x[:, i * l + j]
            u[:, j] = np.where(v > v_th, 0.0, v)
        out[:, i * l:(i + 1) * l] = u
        mems.append(u.copy())
    return out, np.mean(mems, axis=0)


@pytest.mark.parametrize("L,T,l,r", [(8, 4, 2, 0), (10, 4, 2, 2), (7, 1, 7, 0)])
def test_chunk_plan_examples(L, T, l, r):
    plan = chunk_plan(L, T)
    assert (plan.chunk_len, plan.remainder, plan.padded) == (l, r, r > 0)


def test_chunk_plan_rejects_short_sequences():
    with pytest.raises(ValueError):
        chunk_plan(3, 4)
    with pytest.raises(ValueError):
        lim_forward(np.zeros((1, 3, 2)), LIMConfig(num_chunks=4))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.data())
def test_length_law(L, data):
    T = data.draw(st.integers(1, L))
    x = np.random.default_rng(L).uniform(0.1, 0.5, (1, L, 2))
    out, avg = lim_forward(x, LIMConfig(num_chunks=T, tau=0.5, v_th=10.0))
    plan = chunk_plan(L, T)
    assert out.shape == x.shape
    assert plan.chunk_len * T + plan.remainder == L and 0 <= plan.remainder < T
    assert avg.u.shape == (1, plan.chunk_len, 2)
    if plan.remainder:
        assert np.all(out.data[:, plan.used_len:] == 0.0)


def test_positions_pair_across_chunks():
    # L=8, T=4: token j of chunk i feeds token j of every later chunk and nothing else
    cfg = LIMConfig(num_chunks=4, tau=1.0, v_th=math.inf)
    for t in range(8):
        x = np.zeros((1, 8, 1))
        x[0, t, 0] = 1.0
        out = lim_forward(x, cfg)[0].data[0, :, 0]
        reached = set(np.nonzero(out)[0])
        assert reached == {k for k in range(t, 8) if k % 2 == t % 2}


@pytest.mark.parametrize("inputs,mems,avg", [((0.4, 0.4), (0.4, 0.6), 0.5), ((0.8, 0.8), (0.8, 0.0), 0.4)])
def test_hand_evaluated_membranes(inputs, mems, avg):
    x = np.array(inputs, float).reshape(1, 2, 1)
    out, state = lim_forward(x, LIMConfig(num_chunks=2, tau=0.5, v_th=1.0))
    np.testing.assert_allclose(out.data.ravel(), mems, rtol=1e-15)
    assert state.u.data.item() == pytest.approx(avg, rel=1e-15)


def test_single_chunk_is_one_reset():
    x = np.random.default_rng(0).normal(size=(2, 9, 3))
    out, avg = lim_forward(x, LIMConfig(num_chunks=1, tau=0.5, v_th=0.7))
    want = np.where(x > 0.7, 0.0, x)
    np.testing.assert_array_equal(out.data, want)
    np.testing.assert_array_equal(avg.u.data, want)


def test_no_reset_unit_leak_is_cumsum():
    x = np.random.default_rng(1).normal(size=(2, 12, 3))
    out = lim_forward(x, LIMConfig(num_chunks=4, tau=1.0, v_th=math.inf))[0].data
    want = np.cumsum(x.reshape(2, 4, 3, 3), axis=1).reshape(2, 12, 3)
    np.testing.assert_allclose(out, want, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.floats(0.05, 1.0), st.floats(0.1, 3.0), st.integers(0, 10**6))
def test_matches_loop_reference_and_respects_threshold(L, T, tau, v_th, seed):
    T = min(T, L)
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2.0, size=(2, L, 3))
    prev = rng.normal(size=(2, L // T, 3))
    out, avg = lim_forward(x, LIMConfig(T, tau, v_th), LIMState(Tensor(prev)))
    want, want_avg = _reference(x, T, tau, v_th, prev)
    np.testing.assert_allclose(out.data, want, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(avg.u.data, want_avg, rtol=1e-13, atol=1e-14)
    assert np.all(out.data <= v_th)


def test_prev_shape_mismatch():
    with pytest.raises(ShapeError):
        lim_forward(np.zeros((1, 8, 2)), LIMConfig(num_chunks=4), LIMState(Tensor(np.zeros((1, 3, 2)))))


def test_transfer():
    u = Tensor(np.full((1, 2, 1), 0.3))
    moved = lim.transfer(LIMState(u), (1, 2, 1))
    assert moved.source == "transferred" and moved.u is u
    with pytest.raises(ShapeError):
        lim.transfer(LIMState(u), (1, 3, 1))
    # two chunks with membranes 0.2 and 0.6 hand over 0.4
    _, avg = lim_forward(np.array([0.2, 0.5]).reshape(1, 2, 1), LIMConfig(num_chunks=2, tau=0.5, v_th=1.0))
    assert avg.u.data.item() == pytest.approx(0.4, rel=1e-15)


def test_stateless_between_calls():
    x = np.random.default_rng(2).normal(size=(1, 8, 2))
    cfg = LIMConfig(num_chunks=4)
    a = lim_forward(x, cfg)[0].data
    b = lim_forward(x, cfg)[0].data
    np.testing.assert_array_equal(a, b)


def test_gradient_is_zero_through_reset_entries():
    x = Tensor(np.array([0.5, 0.9, 0.2, 0.7]).reshape(1, 4, 1), requires_grad=True)
    with tn.GradRecord():
        out, _ = lim_forward(x, LIMConfig(num_chunks=2, tau=0.5, v_th=1.0))
        loss = tn.sum(out)
    tn.backward(loss)
    # membranes 0.5, 0.9 | 0.25 + 0.2 = 0.45, reset(0.45 + 0.7) = 0: the reset
    # blocks both the new input and the carried membrane at position 1
    np.testing.assert_allclose(x.grad.ravel(), [1.5, 1.0, 1.0, 0.0])


def test_config_validation_and_leak_reciprocal():
    for bad in ({"num_chunks": 0}, {"tau": 0.0}, {"tau": 1.5}, {"v_th": 0.0}):
        with pytest.raises(ValueError):
            LIMConfig(**bad)
    assert LIMConfig.from_leak(4, 2.0, 1.0).tau == 0.5
    assert LIMConfig.from_leak(4, 0.25, 1.0).tau == 0.25


def test_parameter_counts():
    assert lim.count_lim_parameters(LIMConfig()) == 0
    assert lim.lstm_gate_parameters(16) == 8 * 256 + 64
    assert lim.gru_gate_parameters(16) == 6 * 256 + 48
