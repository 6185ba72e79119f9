"""Batched 1-D convolution and activation primitives with explicit backward passes.

Arrays are laid out channels-last: (batch, time, channels).  Convolutions are cross-correlations
(no kernel flip) and never pad on the right; causal layers pad on the left only.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def conv_out_length(length, kernel, stride=1, dilation=1, left_pad=0):
    span = (kernel - 1) * dilation + 1
    return (length + left_pad - span) // stride + 1


def _tap(x, j, dilation, stride, tout):
    start = j * dilation
    return x[:, start:start + stride * (tout - 1) + 1:stride, :]


def _columns(x, k, stride, dilation, tout):
    """(B, T, C) -> contiguous (B * tout, k * C) patch matrix."""
    if k == 1 and stride == 1:
        return x.reshape(-1, x.shape[2])
    cols = np.concatenate([_tap(x, j, dilation, stride, tout) for j in range(k)], axis=2)
    return cols.reshape(-1, cols.shape[2])


def _weight_matrix(weight):
    o, c, k = weight.shape
    return weight.transpose(2, 1, 0).reshape(k * c, o)


def conv1d(x, weight, bias, stride=1, dilation=1, left_pad=0):
    """x: (B, T, Cin); weight: (Cout, Cin, k); bias: (Cout,) -> (B, Tout, Cout)."""
    if left_pad:
        x = np.pad(x, ((0, 0), (left_pad, 0), (0, 0)))
    k = weight.shape[2]
    tout = conv_out_length(x.shape[1], k, stride, dilation)
    y = _columns(x, k, stride, dilation, tout) @ _weight_matrix(weight)
    y += bias
    return y.reshape(x.shape[0], tout, weight.shape[0])


def conv1d_backward(grad_out, x, weight, stride=1, dilation=1, left_pad=0):
    """Returns (grad_x, grad_weight, grad_bias) for :func:`conv1d`."""
    if left_pad:
        x = np.pad(x, ((0, 0), (left_pad, 0), (0, 0)))
    o, c, k = weight.shape
    B, tout, _ = grad_out.shape
    g2 = grad_out.reshape(-1, o)
    grad_b = g2.sum(axis=0)
    grad_w = (_columns(x, k, stride, dilation, tout).T @ g2).reshape(k, c, o).transpose(2, 1, 0)
    gcols = (g2 @ _weight_matrix(weight).T).reshape(B, tout, k, c)
    if k == 1 and stride == 1:
        grad_x = gcols[:, :, 0, :]
    else:
        grad_x = np.zeros_like(x)
        for j in range(k):
            _tap(grad_x, j, dilation, stride, tout)[...] += gcols[:, :, j, :]
    if left_pad:
        grad_x = grad_x[:, left_pad:]
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def activate(name, a):
    if name == "gelu":
        return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "identity":
        return a
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name, a):
    """Derivative of the activation evaluated at pre-activation ``a``."""
    if name == "gelu":
        u = _GELU_C * (a + 0.044715 * a**3)
        t = np.tanh(u)
        return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "tanh":
        return 1.0 - np.tanh(a) ** 2
    if name == "identity":
        return np.ones_like(a)
    raise ValueError(f"unknown activation {name!r}")


def activate_with_grad(name, a):
    """(activation(a), activation'(a)) sharing intermediate work."""
    if name == "gelu":
        a2 = a * a
        t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
        half = 0.5 * (1.0 + t)
        dy = half + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a2)
        return a * half, dy
    return activate(name, a), activate_grad(name, a)


ACTIVATIONS = ("gelu", "relu", "tanh", "identity")


def log_sigmoid(x):
    """ln(1 / (1 + exp(-x))) without overflow."""
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def uniform_init(rng, shape, fan_in):
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)
