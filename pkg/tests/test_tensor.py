import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dstsd import tensor as T
from dstsd.tensor import Tape, Tensor, backward, conv1d

from conftest import fd_check


def brute_conv(x, w, dilation=1):
    """Index-by-index sum with explicit edge replication."""
    c_out, c_in, k = w.shape
    p = x.shape[-1]
    half = dilation * (k - 1) // 2
    out = np.zeros((c_out, p))
    for o in range(c_out):
        for s in range(p):
            acc = 0.0
            for c in range(c_in):
                for j in range(k):
                    src = min(max(s + j * dilation - half, 0), p - 1)
                    acc += w[o, c, j] * x[c, src]
            out[o, s] = acc
    return out


def test_conv_identity_kernel():
    out = conv1d(np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_conv_zero_signal():
    out = conv1d(np.zeros(16), np.random.default_rng(0).normal(size=5))
    assert np.all(out.data == 0.0)


@pytest.mark.parametrize("dilation", [1, 2])
def test_conv_matches_brute_force(rng, dilation):
    x = rng.normal(size=(2, 8))
    w = rng.normal(size=(3, 2, 3))
    np.testing.assert_allclose(conv1d(x, w, dilation).data, brute_conv(x, w, dilation), atol=1e-13)


def test_conv_rejects_bad_kernels():
    with pytest.raises(ValueError):
        conv1d(np.zeros(8), np.zeros(4))
    with pytest.raises(ValueError, match="longer than padded"):
        conv1d(np.zeros(0), np.zeros(3))
    with pytest.raises(ValueError):
        conv1d(np.zeros((2, 8)), np.zeros((1, 3, 3)))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y, w = r.normal(size=(2, 12)), r.normal(size=(2, 12)), r.normal(size=(2, 2, 5))
    lhs = conv1d(a * x + b * y, w).data
    rhs = a * conv1d(x, w).data + b * conv1d(y, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_elementwise_examples():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    assert T.prelu(Tensor(-2.0), 0.0).data == 0.0
    assert T.prelu(Tensor(-2.0), 0.25).data == -0.5
    np.testing.assert_array_equal(T.elementwise("hadamard", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data,
                                  [3.0, 8.0])
    with pytest.raises(ValueError):
        T.elementwise("softplus", Tensor(1.0))
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)))
def test_squashers_stay_in_range(x):
    s, t = T.sigmoid(Tensor(x)).data, T.tanh(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.abs(t) <= 1)
    moderate = np.abs(x) < 15
    assert np.all((s[moderate] > 0) & (s[moderate] < 1))


def test_backward_square():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(w * w)
    np.testing.assert_array_equal(backward(tape, loss)[id(w)], [2.0, 4.0])


def test_backward_constant_loss():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(Tensor(np.ones(3)))
    np.testing.assert_array_equal(backward(tape, loss, wrt=[w])[id(w)], [0.0, 0.0])


def test_backward_needs_scalar():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = w * 2.0
    with pytest.raises(ValueError):
        backward(tape, out)


def test_backward_flags_nan():
    w = Tensor(np.array([1.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(w * np.nan)
    with pytest.raises(FloatingPointError, match="node"):
        backward(tape, loss)


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu", "huber"])
def test_unary_gradients(rng, op):
    x = rng.normal(size=7) * 2 + 0.05
    kw = {"gamma": 1.3} if op == "huber" else {}
    assert fd_check(lambda v: T.tsum(T.elementwise(op, v[0], **kw) * np.arange(1.0, 8.0)), [x]) < 1e-6


def test_prelu_gradient_in_slope(rng):
    x, a = rng.normal(size=9) + 0.02, np.array([0.3])
    assert fd_check(lambda v: T.tsum(T.square(T.prelu(v[0], v[1]))), [x, a]) < 1e-6


def test_conv_sigmoid_gradient(rng):
    x, w = rng.normal(size=8), rng.normal(size=3)
    assert fd_check(lambda v: T.tsum(T.square(T.sigmoid(conv1d(v[0], v[1])))), [x, w]) < 1e-4


def test_batched_conv_gradient(rng):
    x, w = rng.normal(size=(2, 3, 10)), rng.normal(size=(4, 3, 5))
    f = lambda v: T.tsum(T.tanh(conv1d(v[0], v[1], dilation=2)) * np.linspace(-1, 1, 10))
    assert fd_check(f, [x, w]) < 1e-6


def test_structural_ops_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def f(v):
        m = T.matmul(v[0], v[1])
        s = T.stack([m[0], m[2]], axis=0)
        c = T.concat([s, T.reshape(v[1][:2], (2, 2))], axis=1)
        return T.tsum(T.square(c - 0.5)) + T.tsum(v[0][1:, 2:] * 3.0)

    assert fd_check(f, [a, b]) < 1e-7


def test_no_recording_outside_tape():
    w = Tensor(np.ones(3), requires_grad=True)
    out = T.tsum(w * w)
    assert out.parents == ()
    with Tape() as tape:
        T.tsum(w * w)
    assert len(tape) == 2
