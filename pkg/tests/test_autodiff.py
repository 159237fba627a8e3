import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tapfl.autodiff import (Graph, GraphError, NonFiniteError, ShapeError, backward,
                            eval_graph, grad_check, numeric_grad)
from tapfl.tap import distill_loss_node


def test_matmul_identity():
    g = Graph()
    a = g.const([[1.0, 2.0], [3.0, 4.0]])
    out = g.matmul(a, g.const(np.eye(2)))
    np.testing.assert_array_equal(eval_graph(g, root=out), [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_symmetric():
    g = Graph()
    g.softmax(g.const([[0.0, 0.0]]))
    np.testing.assert_array_equal(eval_graph(g), [[0.5, 0.5]])


def test_layernorm_hand_value():
    # mean 3, population std 1
    g = Graph()
    g.layernorm(g.const([[2.0, 4.0]]), g.const(np.ones(2)), g.const(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(eval_graph(g), [[-1.0, 1.0]], atol=1e-4)


def test_sum_gradient_is_ones():
    g = Graph()
    w = g.param(np.arange(6.0).reshape(2, 3))
    root = g.sum(w)
    np.testing.assert_array_equal(backward(g, root)[w], np.ones((2, 3)))


def test_quadratic_gradient():
    g = Graph()
    w = g.param([1.0, 2.0])
    d = g.sub(w, g.const([0.0, 0.0]))
    root = g.scale(g.sum(g.mul(d, d)), 0.5)
    np.testing.assert_allclose(backward(g, root)[w], [1.0, 2.0])


def test_cross_entropy_gradient_softmax_minus_onehot():
    g = Graph()
    z = g.param([[0.0, 0.0]])
    root = g.cross_entropy(z, g.const([[1.0, 0.0]]))
    np.testing.assert_allclose(backward(g, root)[z], [[-0.5, 0.5]])
    assert float(g.value(root)) == pytest.approx(np.log(2.0))


def test_backward_requires_scalar_root():
    g = Graph()
    w = g.param(np.ones((2, 2)))
    with pytest.raises(GraphError):
        backward(g, g.relu(w))


def test_shape_error_names_node():
    g = Graph()
    a = g.const(np.ones((2, 3)))
    b = g.const(np.ones((2, 3)))
    with pytest.raises(ShapeError) as info:
        g.matmul(a, b)
    assert info.value.node == 2


def test_non_finite_reports_node():
    g = Graph()
    w = g.param([[1.0, 2.0]])
    big = g.scale(w, 1e300)
    with pytest.raises(NonFiniteError) as info, np.errstate(over="ignore"):
        eval_graph(g, {w: [[1e300, 1.0]]}, root=big)
    assert info.value.node == 1


def test_eval_with_bindings_does_not_mutate():
    g = Graph()
    w = g.param([1.0, 2.0])
    root = g.sum(g.mul(w, w))
    assert float(eval_graph(g, {w: [3.0, 0.0]})) == 9.0
    assert float(g.value(root)) == 5.0


def test_grad_check_step_range():
    g = Graph()
    w = g.param([1.0])
    g.sum(w)
    with pytest.raises(GraphError):
        grad_check(g, w, step=0.1)


def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    g = Graph()
    w = g.param(rng.normal(size=(3, 4)))
    d = g.sub(w, g.const(rng.normal(size=(3, 4))))
    g.scale(g.sum(g.mul(d, d)), 0.5)
    assert grad_check(g, w, 1e-5) < 1e-6


def _relu_net(rng, n=5, d=4, h=6, c=3):
    """Two-layer ReLU net with pre-activations kept away from the kink."""
    while True:
        g = Graph()
        x = g.const(rng.normal(size=(n, d)))
        w1 = g.param(rng.normal(size=(h, d)))
        b1 = g.param(rng.normal(size=h))
        pre = g.linear(x, w1, b1)
        if np.min(np.abs(g.value(pre))) > 1e-3:
            break
    w2 = g.param(rng.normal(size=(c, h)))
    logits = g.linear(g.relu(pre), w2)
    target = np.eye(c)[rng.integers(0, c, n)]
    g.cross_entropy(logits, g.const(target))
    return g, (w1, b1, w2)


def test_grad_check_relu_net():
    g, leaves = _relu_net(np.random.default_rng(1))
    for leaf in leaves:
        assert grad_check(g, leaf, 1e-5) < 1e-4


def test_grad_check_kd_loss_wrt_student():
    rng = np.random.default_rng(2)
    g = Graph()
    student = g.param(rng.normal(size=(4, 5)))
    distill_loss_node(g, rng.normal(size=(4, 5)), student, 2.0)
    assert grad_check(g, student, 1e-5) < 1e-4


PRIMS = ["matmul", "add", "bias_add", "sub", "mul", "scale", "sum", "mean", "relu", "gelu",
         "transpose", "reshape", "slice", "concat", "layernorm", "softmax", "log_softmax",
         "mse", "cross_entropy"]


def _primitive_graph(kind, rng):
    """Scalar graph exercising one primitive; returns (graph, leaves to check, tolerance)."""
    g = Graph()
    a = g.param(rng.normal(size=(3, 4)))
    tol = 1e-4
    if kind == "matmul":
        out = g.matmul(a, g.param(rng.normal(size=(4, 2))))
    elif kind == "add":
        out = g.add(a, g.param(rng.normal(size=(3, 4))))
    elif kind == "bias_add":
        out = g.add(a, g.param(rng.normal(size=4)))
    elif kind == "sub":
        out = g.sub(a, g.param(rng.normal(size=(3, 4))))
    elif kind == "mul":
        out = g.mul(a, g.param(rng.normal(size=(3, 4))))
    elif kind == "scale":
        out = g.scale(a, -1.7)
    elif kind == "sum":
        out = g.sum(a)
    elif kind == "mean":
        out = g.mean(a)
    elif kind == "relu":
        vals = rng.normal(size=(3, 4))
        vals[np.abs(vals) < 0.05] = 0.5
        a = g.param(vals)
        out = g.relu(a)
    elif kind == "gelu":
        out = g.gelu(a)
        tol = 1e-3
    elif kind == "transpose":
        out = g.transpose(a)
    elif kind == "reshape":
        out = g.reshape(a, (2, 6))
    elif kind == "slice":
        out = g.slice(a, 1, 3, axis=1)
    elif kind == "concat":
        out = g.concat([a, g.param(rng.normal(size=(3, 2)))], axis=1)
    elif kind == "layernorm":
        out = g.layernorm(a, g.param(rng.normal(size=4)), g.param(rng.normal(size=4)))
    elif kind == "softmax":
        out = g.softmax(a)
    elif kind == "log_softmax":
        out = g.log_softmax(a)
    elif kind == "mse":
        out = g.mse(a, g.param(rng.normal(size=(3, 4))))
    elif kind == "cross_entropy":
        out = g.cross_entropy(a, g.const(np.eye(4)[rng.integers(0, 4, 3)]))
    # weight by a random probe so every output coordinate matters
    if g.value(out).ndim:
        probe = g.const(rng.normal(size=g.value(out).shape))
        out = g.sum(g.mul(out, probe))
    return g, g.trainable_leaves, tol


@pytest.mark.parametrize("kind", PRIMS)
def test_primitive_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for _ in range(100):
        g, leaves, tol = _primitive_graph(kind, rng)
        for leaf in leaves:
            assert grad_check(g, leaf, 1e-5) < tol


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(logits, shift):
    g = Graph()
    x = g.const(logits)
    p = g.softmax(x)
    q = g.softmax(g.add(x, g.const(np.full_like(logits, shift))))
    np.testing.assert_allclose(g.value(p).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(g.value(p), g.value(q), atol=1e-10)


def test_eval_graph_deterministic():
    g, leaves, _ = _primitive_graph("layernorm", np.random.default_rng(3))
    bind = {leaves[0]: np.random.default_rng(4).normal(size=(3, 4))}
    assert eval_graph(g, bind).tobytes() == eval_graph(g, bind).tobytes()


def test_numeric_grad_of_constant_leaf():
    g = Graph()
    c = g.const([1.0, -2.0])
    g.sum(g.mul(c, c))
    np.testing.assert_allclose(numeric_grad(g, c), [2.0, -4.0], atol=1e-8)
    assert grad_check(g, c) < 1e-6
