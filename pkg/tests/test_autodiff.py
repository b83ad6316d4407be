import numpy as np
import pytest

from oracles import finite_difference
from probcontour import autodiff as ad
from probcontour.autodiff import Tape, Tensor


def test_matmul_identity(rng):
    m = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), m).data, m)


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv_all_ones_center_is_nine():
    x = np.ones((1, 5, 5, 1))
    w = np.ones((3, 3, 1, 1))
    out = ad.conv2d(x, w, padding=1).data
    assert out[0, 2, 2, 0] == 9.0
    assert out[0, 0, 0, 0] == 4.0  # corner sees the zero padding


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_backward_sum_of_squares():
    p = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        root = ad.reduce_sum(ad.square(p))
    np.testing.assert_array_equal(tape.backward(root)[p], [2.0, 4.0, 6.0])


def test_backward_constant_root_gives_zeros():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        root = Tensor(5.0)
    g = tape.backward(root, wrt=[p])
    np.testing.assert_array_equal(g[p], [0.0, 0.0])


def test_backward_rejects_non_scalar_root():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(p, 2.0)
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_no_tape_records_nothing():
    p = Tensor([1.0], requires_grad=True)
    y = ad.mul(p, 3.0)
    assert y.data[0] == 3.0


def _two_layer(rng):
    params = {
        "conv.w": Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.3, requires_grad=True),
        "conv.b": Tensor(rng.standard_normal(3) * 0.1, requires_grad=True),
        "dense.w": Tensor(rng.standard_normal((12, 4)) * 0.3, requires_grad=True),
        "dense.b": Tensor(rng.standard_normal(4) * 0.1, requires_grad=True),
    }
    x = rng.standard_normal((2, 4, 4, 2))
    target = rng.standard_normal((2, 4))

    def loss():
        h = ad.relu(ad.bias_add(ad.conv2d(x, params["conv.w"], padding=1), params["conv.b"]))
        h = ad.maxpool2x2(h)
        h = ad.reshape(h, (2, -1))
        o = ad.bias_add(ad.matmul(h, params["dense.w"]), params["dense.b"])
        z = ad.logsumexp(ad.exp(ad.clip(o, -3.0, 3.0)), axis=1)
        return ad.reduce_mean(ad.add(ad.square(ad.sub(o, target)), ad.reshape(z, (2, 1))))

    return params, loss


def test_two_layer_net_matches_finite_differences(rng):
    params, loss = _two_layer(rng)
    with Tape() as tape:
        root = loss()
    grads = tape.backward(root)
    for name, p in params.items():
        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            fd = finite_difference(lambda: loss().item(), p.data, idx)
            an = grads[p][idx]
            assert abs(an - fd) <= 1e-4 * max(abs(fd), 1e-6) + 1e-9, (name, idx, an, fd)


def test_take_rows_accumulates_repeated_rows():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with Tape() as tape:
        root = ad.reduce_sum(ad.take_rows(x, [0, 0, 2]))
    np.testing.assert_array_equal(tape.backward(root)[x], [[2, 2], [0, 0], [1, 1]])


def test_rmsprop_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    state = ad.RmsPropState()
    ad.rmsprop_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_rmsprop_one_step_hand_value():
    p = {"w": Tensor(np.array([0.0]))}
    state = ad.RmsPropState(learning_rate=1e-6, decay=0.9, epsilon=1e-8)
    ad.rmsprop_step(p, {"w": np.array([1.0])}, state)
    assert p["w"].data[0] == pytest.approx(-1e-6 / (np.sqrt(0.1) + 1e-8), rel=1e-12)


def test_rmsprop_steps_shrink_toward_lr():
    # acc_t = 1 - 0.9^t for a constant unit gradient, so |step_t| = lr / sqrt(acc_t) decreases to lr
    lr = 1e-3
    p = {"w": Tensor(np.array([0.0]))}
    state = ad.RmsPropState(learning_rate=lr)
    prev, steps = 0.0, []
    for t in range(1, 30):
        ad.rmsprop_step(p, {"w": np.array([1.0])}, state)
        steps.append(prev - p["w"].data[0])
        prev = p["w"].data[0]
        assert steps[-1] == pytest.approx(lr / (np.sqrt(1 - 0.9**t) + 1e-8), rel=1e-9)
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert steps[-1] > lr


def test_rmsprop_non_finite_gradient_names_parameter():
    p = {"conv0.weight": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}
    with pytest.raises(ad.NonFiniteGradientError, match="conv0.weight"):
        ad.rmsprop_step(p, {"conv0.weight": np.array([np.nan, 0.0]), "b": np.zeros(1)}, ad.RmsPropState())
    np.testing.assert_array_equal(p["b"].data, [0.0])
