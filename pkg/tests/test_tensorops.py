import numpy as np
import pytest

from dispenseforge import tensorops as T
from dispenseforge.errors import CorruptWeights, GraphReused, NotScalarLoss, ShapeMismatch
from dispenseforge.tensorops import AdamState, Sequential, Tensor, adam_step, conv, fc
from dispenseforge.tensorops.serialize import dumps, loads
from gradcheck import check
from layer_cases import LAYER_CASES, STEPS

CASES_PER_LAYER = 20  # the acceptance suite runs 100+


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    worst = max(check(*LAYER_CASES[name](rng), rng, h=STEPS.get(name, 1e-2)) for _ in range(CASES_PER_LAYER))
    assert worst < 1e-3


def test_three_layer_net_gradients():
    rng = np.random.default_rng(3)
    w1, b1 = rng.standard_normal((6, 8)) * 0.5, rng.standard_normal(8) * 0.1
    w2, b2 = rng.standard_normal((8, 8)) * 0.5, rng.standard_normal(8) * 0.1
    w3, b3 = rng.standard_normal((8, 3)) * 0.5, rng.standard_normal(3) * 0.1
    x = rng.standard_normal((4, 6))

    def net(x, w1, b1, w2, b2, w3, b3):
        h = T.sigmoid(T.dense(x, w1, b1))
        h = T.sigmoid(T.dense(h, w2, b2))
        return T.dense(h, w3, b3)

    assert check(net, [x, w1, b1, w2, b2, w3, b3], rng, h=1e-3, max_coords=48) < 1e-3


def test_conv_of_zero_image_is_bias():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
    b = Tensor([0.5, -1.0, 2.0])
    out = T.conv2d(Tensor(np.zeros((1, 2, 5, 7))), w, b)
    assert out.shape == (1, 3, 5, 7)
    np.testing.assert_array_equal(out.data[0, :, 2, 3], [0.5, -1.0, 2.0])
    assert np.all(out.data == b.data.reshape(1, 3, 1, 1))


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    for c in (1, 3, 9):
        x = rng.standard_normal((2, c, 6, 5)).astype(np.float32)
        w = rng.standard_normal((4, c, 3, 3)).astype(np.float32)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64)
        ref = np.zeros((2, 4, 6, 5))
        for i in range(6):
            for j in range(5):
                ref[:, :, i, j] = np.einsum("ncij,fcij->nf", xp[:, :, i : i + 3, j : j + 3], w)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w)).data, ref, atol=1e-4)


def test_maxpool_example():
    out = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.tolist() == [[[[4.0]]]]


def test_dense_selects_row():
    w = Tensor(np.arange(12.0).reshape(4, 3))
    x = Tensor(np.eye(4)[[2]])
    np.testing.assert_array_equal(T.dense(x, w).data, [[6.0, 7.0, 8.0]])


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\)"):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeMismatch):
        T.squared_error(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_mean_square_example():
    x = Tensor([3.0], requires_grad=True)
    T.mean(x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalarLoss):
        (x * 2).backward()


def test_graph_cannot_be_reused():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphReused):
        loss.backward()


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad.tolist() == [16.0]


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 3).sum()
    assert not y.requires_grad


def test_adam_zero_gradient():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = adam_step([p], [np.zeros(2, np.float32)], AdamState(learning_rate=0.1))
    assert state.step == 1
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_by_hand():
    lr, eps = 0.000574, 1e-7
    g = np.array([0.5, -3.0, 2e-3], np.float32)
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step([p], [g], AdamState(learning_rate=lr, epsilon=eps))
    # bias-corrected moments at step 1 are g and g^2
    expected = -lr * g.astype(np.float64) / (np.abs(g) + eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-5)
    np.testing.assert_allclose(p.data[:2], [-lr, lr], rtol=1e-4)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 4)).astype(np.float32)
    p = Tensor(np.zeros(4), requires_grad=True)
    state = AdamState(learning_rate=0.01)
    ref, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, start=1):
        adam_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-7)
    np.testing.assert_allclose(p.data, ref, rtol=1e-5, atol=1e-7)


def test_adam_leaves_frozen_params():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=False)
    before = b.data.copy()
    state = AdamState()
    for _ in range(10):
        adam_step([a, b], [np.ones(3, np.float32), np.ones(3, np.float32)], state)
    assert np.array_equal(b.data, before) and not np.array_equal(a.data, before)


def test_adam_validates():
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)
    with pytest.raises(ShapeMismatch):
        adam_step([Tensor(np.ones(3), requires_grad=True)], [np.ones(2, np.float32)], AdamState())


def _model(seed=0):
    return Sequential((conv(1, 4, 3), T.RELU, T.POOL, T.FLAT, fc(4 * 4 * 4, 5)), np.random.default_rng(seed))


def test_weights_round_trip():
    blob = T.save_weights(_model(1))
    other = _model(2)
    T.load_weights(other, blob)
    assert T.save_weights(other) == blob


def test_weights_layout():
    blob = dumps([("w", np.array([[1.0, 2.0]], np.float32))])
    assert blob == b"DFW1" + b"\x01\x00w" + b"f" + b"\x02" + b"\x01\x00\x00\x00\x02\x00\x00\x00" + np.array(
        [1.0, 2.0], "<f4"
    ).tobytes()
    assert loads(blob)["w"].tolist() == [[1.0, 2.0]]


def test_weights_corruption_detected():
    blob = T.save_weights(_model())
    with pytest.raises(CorruptWeights):
        T.load_weights(_model(), blob[:-3])
    with pytest.raises(CorruptWeights):
        T.load_weights(_model(), b"XXXX" + blob[4:])
    bigger = Sequential((conv(1, 4, 3), T.RELU, T.POOL, T.FLAT, fc(4 * 4 * 4, 6)), np.random.default_rng(0))
    with pytest.raises(CorruptWeights, match="4.weight"):
        T.load_weights(bigger, blob)


def test_same_padding_keeps_size():
    m = Sequential((conv(2, 3, 5), T.RELU, conv(3, 1, 3)))
    assert m(Tensor(np.zeros((2, 2, 9, 11)))).shape == (2, 1, 9, 11)


def test_init_is_seeded():
    assert T.save_weights(_model(4)) == T.save_weights(_model(4))
    assert T.save_weights(_model(4)) != T.save_weights(_model(5))


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        m = _model(3)
        opt = T.Adam(m.parameters(), learning_rate=0.01)
        x = rng.standard_normal((4, 1, 8, 8))
        y = rng.standard_normal((4, 5))
        for _ in range(5):
            opt.zero_grad()
            T.squared_error(m(Tensor(x)), Tensor(y)).backward()
            opt.step()
        return T.save_weights(m)

    assert run() == run()
