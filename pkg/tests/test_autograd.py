import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtuap import autograd as ag
from dtuap.autograd import Tensor
from dtuap.errors import ShapeError
from oracles import assert_grad_close, central_diff, max_excluding_loop
from opcases import CASES, analytic_grads, scalar_fn


def test_relu_values():
    out = ag.relu(Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    out = ag.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).uniform(size=(2, 1, 5, 7)).astype(np.float32)
    out = ag.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ag.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                    stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 4)), requires_grad=True)
    ag.backward(ag.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_mean_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    ag.backward(ag.reduce_mean(ag.relu(x)))
    assert x.grad.tolist() == [0.0, 0.5]


def test_gradient_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.backward(ag.reduce_sum(ag.scale(x, 3.0)))
    ag.backward(ag.reduce_sum(ag.scale(x, 2.0)))
    assert x.grad.tolist() == [5.0, 5.0]
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        ag.backward(ag.relu(x))


def test_backward_rejects_detached():
    with pytest.raises(ValueError, match="detached"):
        ag.backward(ag.reduce_sum(Tensor([1.0, 2.0])))


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="dense.*\\(2, 3\\).*\\(4, 5\\)"):
        ag.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError, match="conv2d"):
        ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        ag.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(ShapeError, match="add"):
        ag.add(Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))))


def test_forward_op_dispatch():
    x = Tensor([[3.0, 5.0, 1.0]])
    assert ag.forward_op("reduce_max_excluding", [x], excluded=[1]).data.tolist() == [3.0]
    assert ag.forward_op("relu", [Tensor([-2.0, 2.0])]).data.tolist() == [0.0, 2.0]
    with pytest.raises(ValueError):
        ag.forward_op("matmul", [x])


def test_reduce_max_excluding_examples():
    assert ag.reduce_max_excluding(Tensor([[3.0, 5.0, 1.0]]), [1]).data.tolist() == [3.0]
    x = Tensor([[7.0, 7.0, 0.0]], requires_grad=True)
    out = ag.reduce_max_excluding(x, [2])
    assert out.data.tolist() == [7.0]
    ag.backward(ag.reduce_sum(out))
    assert x.grad.tolist() == [[1.0, 0.0, 0.0]]


def test_reduce_max_excluding_vs_scan():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(8, 6)).astype(np.float32)
    exc = rng.integers(0, 6, size=8)
    out = ag.reduce_max_excluding(Tensor(logits), exc).data
    for row, e, v in zip(logits, exc, out):
        assert v == max_excluding_loop(row, e)[0]


def test_reduce_max_excluding_bad_index():
    with pytest.raises(IndexError):
        ag.reduce_max_excluding(Tensor(np.zeros((2, 3))), [0, 3])


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ag.backward(ag.reduce_sum(ag.maxpool2d(x, 2)))
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_graph_visits_each_node_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ag.relu(x)
    z = ag.add(y, y)  # y reachable twice
    loss = ag.reduce_sum(z)
    graph = ag.Graph(loss)
    assert len(graph) == len({id(t) for t in graph.order}) == 4
    pos = {id(t): i for i, t in enumerate(graph.order)}
    assert pos[id(x)] < pos[id(y)] < pos[id(z)] < pos[id(loss)]
    ag.backward(loss)
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


@pytest.mark.parametrize("kind", sorted(CASES))
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(20):
        fn, inputs = CASES[kind](rng)
        grads = analytic_grads(fn, inputs)
        for i, g in enumerate(grads):
            assert_grad_close(g, central_diff(scalar_fn(fn, inputs, i), inputs[i], h=1e-3))


def _mlp_loss(params, x, y):
    w1, b1, w2, b2, w3, b3 = params
    h = ag.relu(ag.dense(x, w1, b1))
    h = ag.relu(ag.dense(h, w2, b2))
    return ag.reduce_mean(ag.softmax_cross_entropy(ag.dense(h, w3, b3), y))


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(5)
    shapes = [(3, 4), (4,), (4, 4), (4,), (4, 3), (3,)]
    params = [rng.normal(size=s) for s in shapes]
    assert sum(p.size for p in params) <= 64
    x = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
    y = rng.integers(0, 3, size=5)
    fn = lambda t: _mlp_loss(t, x, y)  # noqa: E731
    for i, g in enumerate(analytic_grads(fn, params)):
        assert_grad_close(g, central_diff(scalar_fn(fn, params, i), params[i]))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=4)

    def grad_of(builder):
        x = Tensor(x0, requires_grad=True, dtype=np.float64)
        ag.backward(builder(x))
        return x.grad

    f = lambda x: ag.reduce_mean(ag.softmax_cross_entropy(ag.dense(x, Tensor(w, dtype=np.float64)), y))  # noqa: E731
    g = lambda x: ag.reduce_sum(ag.relu(x))  # noqa: E731
    combined = grad_of(lambda x: ag.add(ag.scale(f(x), a), ag.scale(g(x), b)))
    np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-12)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(4, 2, 6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        out = ag.reduce_mean(ag.maxpool2d(ag.relu(ag.conv2d(x, w, padding=1)), 2))
        ag.backward(out)
        return out.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_float32_default():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert ag.relu(t).dtype == np.float32
