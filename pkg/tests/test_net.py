import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from l2i import net as nn
from l2i.errors import ContractError, NumericsError, ShapeError
from l2i.net import (AdamState, AttentionPool1d, AvgPool2d, ChannelAffine, Conv2d, Dense,
                     GlobalAvgPool2d, MaxPool1dOverTime, MaxPool2d, MeanOverFreq, Relu,
                     ResizeBilinear, Sequential, Sigmoid, Softmax, Tanh, adam_step,
                     finite_diff_check)


def _check(seq, x, seed=0):
    """Gradient check of ``sum(out * R)`` with respect to params and input."""
    out, _ = seq.forward(x)
    r = np.random.default_rng(seed).normal(size=out.shape)
    probe = {**seq.params, "input": x}

    def loss_and_grads():
        y, tape = seq.forward(x)
        grads, dx = seq.backward(tape, r)
        return float(np.sum(y * r)), {**grads, "input": dx}

    return finite_diff_check(probe, loss_and_grads)


def _x(*shape, seed=1):
    return np.random.default_rng(seed).normal(size=shape)


def test_identity_dense():
    seq = Sequential([("d", Dense(3, 3))])
    seq.params["d.w"] = np.eye(3)
    x = _x(4, 3)
    out, tape = seq.forward(x)
    assert np.array_equal(out, x)
    grads, dx = seq.backward(tape, out)  # gradient of 0.5 ||out||^2
    assert np.array_equal(dx, x)


def test_relu_negative():
    out, _ = Sequential([("r", Relu())]).forward(-np.abs(_x(2, 3, 4, 5)) - 0.1)
    assert not out.any()


def test_softmax_rows_sum_to_one():
    out, _ = Sequential([("s", Softmax())]).forward(_x(50, 7) * 30)
    assert np.max(np.abs(out.sum(axis=1) - 1)) < 1e-12
    moderate, _ = Sequential([("s", Softmax())]).forward(_x(50, 7) * 3)
    assert moderate.min() > 0 and moderate.max() < 1


def test_sigmoid_range():
    y = nn.sigmoid(np.array([-30.0, -3.0, 0.0, 3.0, 30.0]))
    assert np.all((y > 0) & (y < 1))
    assert y[2] == 0.5 and y[1] + y[3] == pytest.approx(1.0, abs=1e-15)
    assert np.all(np.isfinite(nn.sigmoid(np.array([-1e4, 1e4]))))


def test_zero_upstream_zero_grads():
    seq = Sequential([("c", Conv2d(1, 2)), ("r", Relu()), ("g", GlobalAvgPool2d()), ("d", Dense(2, 3))])
    out, tape = seq.forward(_x(2, 1, 4, 5))
    grads, _ = seq.backward(tape, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())


def test_linear_net_exact():
    seq = Sequential([("a", Dense(4, 3)), ("b", Dense(3, 2))], seed=3)
    assert _check(seq, _x(5, 4)) < 1e-8


def test_conv_relu_dense():
    seq = Sequential([("c1", Conv2d(2, 3)), ("aff", ChannelAffine(3)), ("r", Relu()),
                      ("p", MaxPool2d((2, 2))), ("c2", Conv2d(3, 2)), ("g", GlobalAvgPool2d()),
                      ("d", Dense(2, 3)), ("s", Softmax())], seed=4)
    seq.params["aff.scale"] = np.array([0.5, 1.5, -1.0])
    assert sum(p.size for p in seq.params.values()) < 5000
    assert _check(seq, _x(2, 2, 6, 7)) < 1e-4


@pytest.mark.parametrize("layer", [
    Tanh(), Sigmoid(), AvgPool2d((2, 3)), MaxPool2d((2, 2)), ResizeBilinear(5, 9),
    ResizeBilinear(2, 3), MeanOverFreq(), GlobalAvgPool2d(),
])
def test_layer_gradients(layer):
    assert _check(Sequential([("l", layer)]), _x(2, 3, 5, 7)) < 1e-4


def test_attention_pool_gradients():
    pool = AttentionPool1d(4, d=5)
    params = pool.init(nn.SeededRng(5))
    h = np.abs(_x(3, 4, 8))
    rz = _x(3, 4, seed=9)
    probe = {**params, "h": h}

    def loss_and_grads():
        (z, a), cache = pool.forward(params, h)
        dh, g = pool.backward(params, cache, (rz, None))
        return float(np.sum(z * rz)), {**g, "h": dh}

    assert finite_diff_check(probe, loss_and_grads) < 1e-4


def test_attention_pool_grad_through_weights():
    pool = AttentionPool1d(3, d=4)
    params = pool.init(nn.SeededRng(6))
    h = np.abs(_x(2, 3, 6))
    ra = _x(2, 6, seed=11)
    probe = {**params, "h": h}

    def loss_and_grads():
        (_, a), cache = pool.forward(params, h)
        dh, g = pool.backward(params, cache, (np.zeros((2, 3)), ra))
        return float(np.sum(a * ra)), {**g, "h": dh}

    assert finite_diff_check(probe, loss_and_grads) < 1e-4


def test_max_over_time_gradients():
    h = _x(2, 3, 6)
    rz = _x(2, 3, seed=2)
    probe = {"h": h}
    pool = MaxPool1dOverTime()

    def loss_and_grads():
        z, cache = pool.forward({}, h)
        return float(np.sum(z * rz)), {"h": pool.backward({}, cache, rz)[0]}

    assert finite_diff_check(probe, loss_and_grads) < 1e-4


@given(st.integers(0, 1000))
def test_pooling_invariants(seed):
    h = np.abs(np.random.default_rng(seed).normal(size=(2, 4, 7)))
    pool = AttentionPool1d(4, d=3)
    (z, a), _ = pool.forward(pool.init(nn.SeededRng(seed)), h)
    assert np.all(np.abs(a.sum(axis=1) - 1) < 1e-12)
    assert np.all(z <= h.max(axis=2) + 1e-12) and np.all(z >= h.min(axis=2) - 1e-12)
    zm, _ = MaxPool1dOverTime().forward({}, h)
    assert np.all(zm[:, :, None] >= h)


def test_constant_columns_pool_to_that_column():
    col = np.array([0.3, 0.0, 2.0])
    h = np.repeat(col[None, :, None], 5, axis=2)
    pool = AttentionPool1d(3)
    (z, _), _ = pool.forward(pool.init(nn.SeededRng(0)), h)
    assert np.allclose(z[0], col, atol=1e-15)
    assert np.array_equal(MaxPool1dOverTime().forward({}, h)[0][0], col)


def test_shape_error():
    seq = Sequential([("d", Dense(3, 2))])
    with pytest.raises(ShapeError):
        seq.forward(np.ones((2, 4)))
    with pytest.raises(ShapeError):
        Sequential([("p", MaxPool2d((2, 2)))]).forward(np.ones((1, 1, 1, 5)))


def test_stale_tape():
    seq = Sequential([("d", Dense(3, 2))], seed=1)
    out, tape = seq.forward(np.ones((1, 3)))
    seq.params["d.w"] = seq.params["d.w"] + 1.0
    with pytest.raises(ContractError):
        seq.backward(tape, out)
    other = Sequential([("d", Dense(3, 2))], seed=1)
    _, tape2 = other.forward(np.ones((1, 3)))
    with pytest.raises(ContractError):
        Sequential([("d", Dense(3, 2))], seed=1).backward(tape2, out)


def test_forward_pure():
    seq = Sequential([("c", Conv2d(1, 2)), ("g", GlobalAvgPool2d())], seed=2)
    x = _x(1, 1, 4, 4)
    assert seq.forward(x)[0].tobytes() == seq.forward(x)[0].tobytes()


def test_glorot_bounds():
    w = nn.glorot(nn.SeededRng(0), (200, 300), 300, 200)
    assert np.abs(w).max() <= np.sqrt(6 / 500)


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"], [1.0, -2.0]) and state.t == 10


def _scalar_adam_oracle(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


def test_adam_quadratic():
    p = {"w": np.array([1.0])}
    state = AdamState(lr=0.1)
    seen = []
    for _ in range(50):
        adam_step(p, {"w": p["w"].copy()}, state)
        seen.append(float(p["w"][0]))
    assert np.allclose(seen, _scalar_adam_oracle(1.0, 0.1, 50), rtol=0, atol=1e-15)
    assert np.all(np.diff(np.abs(seen[:10])) < 0)
    assert abs(seen[-1]) < 1.0


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
def test_adam_first_step_is_lr(scale):
    p = {"w": np.array([0.0, 0.0])}
    adam_step(p, {"w": np.array([scale, -scale])}, AdamState(lr=0.01))
    assert np.allclose(np.abs(p["w"]), 0.01, rtol=1e-2)


def test_adam_nan():
    with pytest.raises(NumericsError):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, AdamState())


def test_losses():
    loss, _ = nn.soft_cross_entropy(np.full((1, 4), 0.25), np.full((1, 4), 0.25))
    assert loss[0] == pytest.approx(np.log(4))
    loss, _ = nn.binary_cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    assert loss[0] == pytest.approx(2 * np.log(2))
