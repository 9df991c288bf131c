"""
Differentiable primitives. Each one computes its forward value with numpy and
records a closure returning the exact analytic gradient for every input.
"""

from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from pshape.autodiff.tape import Parameter, Tensor2, as_matrix
from pshape.exceptions import (
    ContractError,
    EmptySetError,
    LabelError,
    ShapeMismatch,
)


def _as_tensor(tape, x):
    if isinstance(x, Parameter):
        return tape.parameter(x)
    return x


def matmul_bias(x: Tensor2, w, b) -> Tensor2:
    tape = x.tape
    w, b = _as_tensor(tape, w), _as_tensor(tape, b)
    if x.cols != w.rows:
        ShapeMismatch("matmul_bias", x.shape, w.shape)
    if b.shape != (1, w.cols):
        ShapeMismatch("matmul_bias bias", b.shape, (1, w.cols))
    x_value, w_value = x.value, w.value

    def backward(g):
        return g @ w_value.T, x_value.T @ g, g.sum(axis=0, keepdims=True)

    return tape.record("matmul_bias", x_value @ w_value + b.value, (x, w, b), backward)


def relu(x: Tensor2) -> Tensor2:
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return x.tape.record("relu", np.where(mask, x.value, 0.0), (x,), backward)


def tanh_act(x: Tensor2) -> Tensor2:
    out = np.tanh(x.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return x.tape.record("tanh", out, (x,), backward)


def set_maxpool(h: Tensor2) -> Tensor2:
    if h.rows < 1:
        raise EmptySetError("Max-pooling over an empty set of points")
    # argmax returns the first maximum, so ties route to the lowest row
    winners = np.argmax(h.value, axis=0)
    columns = np.arange(h.cols)
    out = h.value[winners, columns].reshape(1, -1)
    shape = h.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[winners, columns] = g[0]
        return (grad,)

    return h.tape.record("set_maxpool", out, (h,), backward)


def concat_cols(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.rows != b.rows:
        ShapeMismatch("concat_cols", a.shape, b.shape)
    seam = a.cols

    def backward(g):
        return g[:, :seam], g[:, seam:]

    return a.tape.record("concat_cols", np.hstack([a.value, b.value]), (a, b), backward)


def concat_many(tensors: Sequence[Tensor2]) -> Tensor2:
    result = tensors[0]
    for tensor in tensors[1:]:
        result = concat_cols(result, tensor)
    return result


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        ShapeMismatch("add", a.shape, b.shape)

    def backward(g):
        return g, g

    return a.tape.record("add", a.value + b.value, (a, b), backward)


def sum_all(a: Tensor2) -> Tensor2:
    shape = a.shape

    def backward(g):
        return (np.full(shape, g[0, 0]),)

    return a.tape.record("sum_all", np.array([[a.value.sum()]]), (a,), backward)


def weighted_sum(scalars: Sequence[Tensor2], weights: Sequence[float]) -> Tensor2:
    if len(scalars) != len(weights) or not scalars:
        raise ContractError("weighted_sum needs one weight per scalar")
    for s in scalars:
        if s.shape != (1, 1):
            ShapeMismatch("weighted_sum", s.shape, (1, 1))
    weights = [float(w) for w in weights]
    total = 0.0
    for s, w in zip(scalars, weights):
        total += w * s.value[0, 0]

    def backward(g):
        return [g * w for w in weights]

    value = np.array([[total]])
    return scalars[0].tape.record("weighted_sum", value, scalars, backward)


def mean_of(scalars: Sequence[Tensor2]) -> Tensor2:
    return weighted_sum(scalars, [1.0 / len(scalars)] * len(scalars))


def reshape(a: Tensor2, rows: int, cols: int) -> Tensor2:
    if a.value.size != rows * cols:
        ShapeMismatch("reshape", a.shape, (rows, cols))
    shape = a.shape

    def backward(g):
        return (g.reshape(shape),)

    return a.tape.record("reshape", a.value.reshape(rows, cols), (a,), backward)


def slice_cols(a: Tensor2, start: int, stop: int) -> Tensor2:
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return a.tape.record("slice_cols", a.value[:, start:stop], (a,), backward)


def slice_rows(a: Tensor2, start: int, stop: int) -> Tensor2:
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[start:stop, :] = g
        return (grad,)

    return a.tape.record("slice_rows", a.value[start:stop, :], (a,), backward)


def reparameterize(mu: Tensor2, log_var: Tensor2, eps) -> Tensor2:
    """z = mu + exp(log_var / 2) * eps, with eps held constant."""
    eps = as_matrix(eps)
    if mu.shape != log_var.shape or mu.shape != eps.shape:
        ShapeMismatch("reparameterize", mu.shape, eps.shape)
    sigma = np.exp(0.5 * log_var.value)

    def backward(g):
        return g, g * 0.5 * sigma * eps

    value = mu.value + sigma * eps
    return mu.tape.record("reparameterize", value, (mu, log_var), backward)


def kl_divergence(mu: Tensor2, log_var: Tensor2, form: str = "standard") -> Tensor2:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dimensions.

    form="printed" evaluates sum(sigma + mu - log(sigma) - 1) instead, kept for
    comparison with the unsquared expression.
    """
    if mu.shape != log_var.shape:
        ShapeMismatch("kl_divergence", mu.shape, log_var.shape)
    m, lv = mu.value, log_var.value
    if form == "standard":
        variance = np.exp(lv)
        value = 0.5 * np.sum(variance + m * m - lv - 1.0)

        def backward(g):
            return g * m, g * 0.5 * (variance - 1.0)

    elif form == "printed":
        sigma = np.exp(0.5 * lv)
        value = np.sum(sigma + m - 0.5 * lv - 1.0)

        def backward(g):
            return g * np.ones_like(m), g * 0.5 * (sigma - 1.0)

    else:
        raise ContractError(f"Unknown KL form '{form}'")
    return mu.tape.record("kl_divergence", np.array([[value]]), (mu, log_var), backward)


def softmax_cross_entropy(logits: Tensor2, label: int) -> Tensor2:
    if logits.rows != 1:
        ShapeMismatch("softmax_cross_entropy", logits.shape, (1, logits.cols))
    if not 0 <= int(label) < logits.cols or int(label) != label:
        raise LabelError(f"Label {label} outside of [0, {logits.cols - 1}]")
    label = int(label)
    log_probs = log_softmax(logits.value, axis=1)
    probs = softmax(logits.value, axis=1)

    def backward(g):
        grad = probs.copy()
        grad[0, label] -= 1.0
        return (g[0, 0] * grad,)

    value = np.array([[-log_probs[0, label]]])
    return logits.tape.record("softmax_cross_entropy", value, (logits,), backward)


def squared_error(prediction: Tensor2, target: float) -> Tensor2:
    if prediction.shape != (1, 1):
        ShapeMismatch("squared_error", prediction.shape, (1, 1))
    residual = prediction.value[0, 0] - float(target)

    def backward(g):
        return (g * 2.0 * residual,)

    value = np.array([[residual * residual]])
    return prediction.tape.record("squared_error", value, (prediction,), backward)
