import numpy as np
import pytest

from gradinv.models import build_model
from gradinv.theory import (explicit_grads, autodiff_grads, first_layer_grad, lemma_table,
                            relu_net, verify_first_layer_span, verify_layer_gradient_forms)


def test_span_and_formula_table():
    rows = lemma_table(depths=(1, 2, 3), seeds=range(20))
    assert len(rows) == 60
    assert max(r["span_residual"] for r in rows) < 1e-8
    assert max(r["form_deviation"] for r in rows) < 1e-10


def test_explicit_form_by_hand_depth_one():
    # one hidden layer, one sample: dL/dW1 = r * (D a) x^T
    W = np.array([[1.0, -2.0], [0.5, 1.0]])
    a = np.array([2.0, -1.0])
    x = np.array([1.0, 1.0])
    net = relu_net(2, [2])
    net.weights[0], net.head = W, a
    h = np.maximum(W @ x, 0)          # [0, 1.5]
    r = a @ h - 0.5                   # -2.0
    expect = r * np.outer(np.array([0.0, 1.0]) * a, x)
    np.testing.assert_allclose(explicit_grads(net, x[None], [0.5])[0], expect)
    np.testing.assert_allclose(autodiff_grads(net, x[None], [0.5])[0], expect)


def test_degenerate_batch_flags():
    net = relu_net(3, [4], seed=1)
    X = np.random.default_rng(0).normal(size=(5, 3))  # b > d
    dec = verify_first_layer_span(net, X, np.zeros(5))
    assert dec.degenerate and dec.rank == 3
    dup = np.repeat(X[:1], 2, axis=0)
    assert verify_first_layer_span(net, dup, np.zeros(2)).degenerate


def test_span_holds_for_dense_first_model():
    rng = np.random.default_rng(2)
    model = build_model("mlp2", (1, 4, 4), hidden=8)
    X = rng.uniform(size=(3, 1, 4, 4))
    dec = verify_first_layer_span(model, X, np.array([1, 2, 3]))
    assert dec.max_residual < 1e-8 * max(1.0, dec.gradient_norm)
    assert first_layer_grad(model, X, np.array([1, 2, 3])).shape == (8, 16)
    with pytest.raises(ValueError):
        first_layer_grad(build_model("convnet6", (1, 8, 8)), rng.uniform(size=(2, 1, 8, 8)))


def test_form_deviation_on_deeper_nets():
    rng = np.random.default_rng(3)
    for depth in (4, 5):
        net = relu_net(6, [5] * depth, seed=depth)
        assert verify_layer_gradient_forms(net, rng.normal(size=(4, 6)), rng.normal(size=4)) < 1e-10
