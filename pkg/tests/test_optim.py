import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dstsd.optim import OptimizerState, clip_grad_norm, optimizer_step


def test_sgd_plain_step():
    w = np.array([1.0])
    optimizer_step(OptimizerState.sgd(lr=0.1, momentum=0.0), [w], [np.array([2.0])])
    assert w[0] == pytest.approx(0.8)


def test_sgd_momentum_two_steps():
    # v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19
    w = np.array([0.0])
    st_ = OptimizerState.sgd(lr=0.1, momentum=0.9)
    for _ in range(2):
        optimizer_step(st_, [w], [np.array([1.0])])
    assert w[0] == pytest.approx(-0.29, abs=1e-15)


def test_adamw_zero_gradient_no_decay():
    w = np.array([1.5, -2.0])
    optimizer_step(OptimizerState.adamw(weight_decay=0.0), [w], [np.zeros(2)])
    np.testing.assert_array_equal(w, [1.5, -2.0])


def test_adamw_first_step_against_hand_rollout():
    w, g = np.array([1.0]), np.array([0.5])
    lr, wd = 0.01, 0.1
    optimizer_step(OptimizerState.adamw(lr=lr, weight_decay=wd), [w], [g])
    # bias-corrected first step moves by lr * g/|g| after decoupled decay
    expect = 1.0 - lr * wd * 1.0 - lr * 0.5 / (0.5 + 1e-8)
    assert w[0] == pytest.approx(expect, abs=1e-14)


def test_optimizer_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        optimizer_step(OptimizerState.sgd(), [np.zeros(2)], [np.array([1.0, np.inf])])
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState.sgd(), [np.zeros(2)], [np.zeros(3)])


def test_same_inputs_same_parameters():
    def run():
        r = np.random.default_rng(7)
        w = [r.normal(size=(3, 4)), r.normal(size=2)]
        opt = OptimizerState.adamw()
        for _ in range(25):
            optimizer_step(opt, w, [r.normal(size=(3, 4)), r.normal(size=2)])
        return np.concatenate([x.ravel() for x in w])
    assert run().tobytes() == run().tobytes()


def test_clip_examples():
    g = clip_grad_norm([np.array([3.0, 4.0])], 10.0)
    np.testing.assert_array_equal(g[0], [3.0, 4.0])
    g = clip_grad_norm([np.array([3.0, 4.0])], 1.0)
    np.testing.assert_allclose(g[0], [0.6, 0.8])
    g = clip_grad_norm([np.zeros(3)], 1.0)
    np.testing.assert_array_equal(g[0], 0.0)
    with pytest.raises(ValueError):
        clip_grad_norm([np.ones(2)], 0.0)


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3))
def test_clip_norm_bound_and_direction(g, c):
    out = clip_grad_norm([g], c)[0]
    n = np.linalg.norm(g)
    assert np.linalg.norm(out) <= max(c, n) * (1 + 1e-12)
    if n > c:
        assert np.linalg.norm(out) == pytest.approx(c, rel=1e-9)
        np.testing.assert_allclose(out * n / c, g, rtol=1e-9, atol=1e-12)
