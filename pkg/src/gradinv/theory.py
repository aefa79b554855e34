"""Executable checks of the first-layer gradient structure of ReLU networks.

Two facts are checked numerically:

* every row of dL/dW_1 is a linear combination of the batch inputs, so it has
  a least-squares residual at rounding level against span{x_1..x_b};
* the layer gradients of ``f(x) = a^T relu(W_L ... relu(W_1 x))`` under the
  loss ``1/2 sum (y_i - f(x_i))^2`` equal the explicit product
  ``sum_i r_i D_{i,l} (prod_{k>l} W_k^T D_{i,k}) a h_{i,l-1}^T``.

relu'(0) is taken as 0 on both sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .models import Dense, Model, client_step


@dataclass
class ReluNet:
    weights: list[np.ndarray]  # W_1 (m1 x d), ..., W_L (mL x m_{L-1})
    head: np.ndarray           # a, length mL

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


def relu_net(d: int, widths, seed: int = 0) -> ReluNet:
    rng = np.random.default_rng(seed)
    dims = [d] + list(widths)
    weights = [rng.normal(0, 1 / np.sqrt(dims[i]), size=(dims[i + 1], dims[i]))
               for i in range(len(widths))]
    return ReluNet(weights, rng.normal(0, 1 / np.sqrt(dims[-1]), size=dims[-1]))


def net_output(net: ReluNet, X: np.ndarray) -> np.ndarray:
    h = np.asarray(X, float).T
    for W in net.weights:
        h = np.maximum(W @ h, 0.0)
    return net.head @ h


def autodiff_grads(net: ReluNet, X, y) -> list[np.ndarray]:
    g = Graph()
    Ws = [g.leaf(W) for W in net.weights]
    h = ad.transpose(ad.as_tensor(np.asarray(X, float)))
    for W in Ws:
        h = ad.relu(ad.matmul(W, h))
    f = ad.matmul(ad.as_tensor(net.head[None, :]), h)
    r = f - np.asarray(y, float)[None, :]
    loss = 0.5 * ad.sum_(r * r)
    return [t.data for t in ad.backward(loss, Ws)]


def explicit_grads(net: ReluNet, X, y) -> list[np.ndarray]:
    """Closed-form layer gradients built from the diagonal activation masks."""
    X = np.asarray(X, float)
    L = net.depth
    grads = [np.zeros_like(W) for W in net.weights]
    for xi, yi in zip(X, np.asarray(y, float)):
        hs, Ds = [xi], []
        for W in net.weights:
            g = W @ hs[-1]
            Ds.append(np.diag((g > 0).astype(float)))
            hs.append(np.maximum(g, 0.0))
        resid = net.head @ hs[-1] - yi
        for ell in range(L):
            prod = np.eye(net.weights[ell].shape[0])
            for k in range(ell + 1, L):
                prod = prod @ net.weights[k].T @ Ds[k]
            grads[ell] += resid * np.outer(Ds[ell] @ prod @ net.head, hs[ell])
    return grads


def verify_layer_gradient_forms(net: ReluNet, X, y) -> float:
    """Largest deviation between autodiff and the explicit formula, relative to gradient scale."""
    auto = autodiff_grads(net, X, y)
    expl = explicit_grads(net, X, y)
    worst = 0.0
    for a, e in zip(auto, expl):
        scale = max(np.max(np.abs(e)), np.max(np.abs(a)))
        dev = np.max(np.abs(a - e))
        if dev:
            worst = max(worst, dev / scale)
    return float(worst)


@dataclass
class SpanDecomposition:
    coefficients: np.ndarray  # (rows of dL/dW_1, b)
    residuals: np.ndarray     # per row
    rank: int
    degenerate: bool
    gradient_norm: float

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0


def first_layer_grad(model, X, y=None, seed: int = 0) -> np.ndarray:
    """dL/dW_1 for a :class:`ReluNet` (squared loss) or a dense-first :class:`Model` (cross-entropy)."""
    X = np.asarray(X, float)
    if isinstance(model, ReluNet):
        if y is None:
            y = np.random.default_rng(seed).normal(size=len(X))
        return autodiff_grads(model, X.reshape(len(X), -1), y)[0]
    first = next((i for i, layer in enumerate(model.layers) if layer.params(str(i))), None)
    if first is None or not isinstance(model.layers[first], Dense):
        raise ValueError(f"{model.arch}: first parametrised layer must be dense")
    if y is None:
        y = np.random.default_rng(seed).integers(0, model.num_classes, size=len(X))
    packet = client_step(model, X, y, update_running=False)
    return packet.grads[f"{first}.weight"]


def verify_first_layer_span(model, X, y=None, seed: int = 0) -> SpanDecomposition:
    """Least-squares fit of each dL/dW_1 row against the flattened batch inputs."""
    X = np.asarray(X, float)
    G = first_layer_grad(model, X, y, seed)
    basis = X.reshape(len(X), -1).T  # d x b
    coef, _, rank, _ = np.linalg.lstsq(basis, G.T, rcond=None)
    resid = np.linalg.norm(basis @ coef - G.T, axis=0)
    b, d = len(X), basis.shape[0]
    return SpanDecomposition(coef.T, resid, int(rank), bool(rank < b or b > d),
                             float(np.linalg.norm(G)))


def lemma_table(depths=(1, 2, 3), seeds=range(20), d: int = 10, b: int = 3, width: int = 8):
    """Rows of (depth, seed, max span residual, explicit-form deviation)."""
    rows = []
    for L in depths:
        for s in seeds:
            net = relu_net(d, [width] * L, seed=s)
            rng = np.random.default_rng(1000 + s)
            X = rng.normal(size=(b, d))
            y = rng.normal(size=b)
            span = verify_first_layer_span(net, X, y)
            rows.append({"depth": L, "seed": s, "span_residual": span.max_residual,
                         "form_deviation": verify_layer_gradient_forms(net, X, y)})
    return rows
