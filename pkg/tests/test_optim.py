import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from se2mitosis.optim import AdamState, LrSchedule, NonFiniteGradientError, adam_step, lr_trace, schedule_lr


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st_, lr=3e-4)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.step == 1


def test_first_step_hand_computed():
    p = {"t": np.array(0.0)}
    adam_step(p, {"t": np.array(1.0)}, AdamState(), lr=3e-4)
    assert p["t"] == pytest.approx(-3e-4 / (1 + 1e-8), rel=1e-12)
    assert p["t"] == pytest.approx(-2.99999997e-4, rel=1e-9)


def test_weight_decay_direction():
    p = {"t": np.array(1.0)}
    state = AdamState()
    adam_step(p, {"t": np.array(0.0)}, state, lr=3e-4, weight_decay=2e-4)
    assert p["t"] < 1.0
    # coupled form: the moments saw the decay term as a gradient
    assert state.m["t"] == pytest.approx(0.1 * 2e-4)


def test_decoupled_weight_decay_skips_moments():
    p = {"t": np.array(1.0)}
    state = AdamState()
    adam_step(p, {"t": np.array(0.0)}, state, lr=1e-2, weight_decay=0.5, decoupled=True)
    assert state.m["t"] == 0
    assert p["t"] == pytest.approx(1.0 - 1e-2 * 0.5)


def test_moment_shapes_follow_params():
    p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, state, lr=1e-3)
    assert state.step == 3
    for k in p:
        assert state.m[k].shape == state.v[k].shape == p[k].shape


def test_nonfinite_gradient_rejected_untouched():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(p, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, lr=1.0)
    assert info.value.name == "b"
    assert state.step == 0
    np.testing.assert_array_equal(p["a"], [1.0, 1.0])


@pytest.mark.parametrize("step,lr", [(0, 3e-4), (4999, 3e-4), (5000, 2.4e-4), (12345, 1.92e-4)])
def test_schedule_examples(step, lr):
    assert schedule_lr(LrSchedule(), step) == pytest.approx(lr, rel=1e-12)


def test_schedule_rejects_negative_step():
    with pytest.raises(ValueError):
        schedule_lr(LrSchedule(), -1)


@given(st.integers(0, 10**6), st.integers(0, 10**5))
def test_schedule_monotone_positive(a, d):
    s = LrSchedule()
    assert schedule_lr(s, a + d) <= schedule_lr(s, a)
    assert schedule_lr(s, a + d) > 0


def test_lr_trace_formula():
    s = LrSchedule(base_lr=1.0, decay_factor=0.5, decay_every=3)
    assert lr_trace(s, 7) == [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25]
