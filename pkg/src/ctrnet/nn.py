"""Dense layer kernels with hand-written backward passes.

All math runs in float64 on C-contiguous numpy arrays.  Parameter
gradients accumulate into the ``grad_*`` buffers of :class:`LayerParams`
and :class:`BnState` (the optimizer zeroes them after each step), while
input gradients are returned.  Every backward pass here is checked
against central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are inconsistent with the operation."""


def as_tensor(x) -> Array:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def require_finite(name: str, x: Array) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")


@dataclass
class LayerParams:
    """Weights and bias of one layer plus gradient and momentum buffers."""

    weights: Array
    bias: Array
    grad_weights: Array = field(repr=False, default=None)
    grad_bias: Array = field(repr=False, default=None)
    vel_weights: Array = field(repr=False, default=None)
    vel_bias: Array = field(repr=False, default=None)

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        self.bias = as_tensor(self.bias)
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)
        if self.vel_weights is None:
            self.vel_weights = np.zeros_like(self.weights)
        if self.vel_bias is None:
            self.vel_bias = np.zeros_like(self.bias)

    def zero_grads(self) -> None:
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0


@dataclass
class BnState:
    """Batch-normalization parameters, running statistics and buffers.

    ``momentum`` is the exponential-moving-average retention factor for
    the running statistics (running = momentum*running + (1-momentum)*batch).
    Normalization uses the biased batch variance.  The cache left by the
    most recent forward pass is what backward consumes.
    """

    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    epsilon: float = 1e-5
    momentum: float = 0.9
    grad_gamma: Array = field(repr=False, default=None)
    grad_beta: Array = field(repr=False, default=None)
    vel_gamma: Array = field(repr=False, default=None)
    vel_beta: Array = field(repr=False, default=None)
    cache: dict = field(repr=False, default=None)

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.9) -> "BnState":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        self.running_mean = as_tensor(self.running_mean)
        self.running_var = as_tensor(self.running_var)
        if self.grad_gamma is None:
            self.grad_gamma = np.zeros_like(self.gamma)
        if self.grad_beta is None:
            self.grad_beta = np.zeros_like(self.beta)
        if self.vel_gamma is None:
            self.vel_gamma = np.zeros_like(self.gamma)
        if self.vel_beta is None:
            self.vel_beta = np.zeros_like(self.beta)

    def zero_grads(self) -> None:
        self.grad_gamma[...] = 0.0
        self.grad_beta[...] = 0.0


def matmul(a: Array, b: Array) -> Array:
    """Row-major matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def dense_fc_forward(x: Array, p: LayerParams) -> Array:
    """x @ W + bias, bias broadcast per row."""
    require_finite("fc input", x)
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise DimensionError(
            f"fc input {x.shape} incompatible with weights {p.weights.shape}"
        )
    return x @ p.weights + p.bias


def dense_fc_backward(x: Array, p: LayerParams, grad_out: Array) -> Array:
    """Accumulate weight/bias gradients; return the input gradient."""
    if grad_out.shape != (x.shape[0], p.weights.shape[1]):
        raise DimensionError(
            f"grad_out {grad_out.shape} inconsistent with forward ({x.shape[0]}, {p.weights.shape[1]})"
        )
    p.grad_weights += x.T @ grad_out
    p.grad_bias += grad_out.sum(axis=0)
    return grad_out @ p.weights.T


def conv2d_forward(x: Array, p: LayerParams, stride: int = 1, pad: int = 0) -> Array:
    """2-D cross-correlation (no kernel flip) plus per-output-channel bias.

    ``x`` is (batch, cin, h, w); weights are (cout, cin, kh, kw).
    """
    require_finite("conv input", x)
    batch, cin, h, w = x.shape
    cout, cin_w, kh, kw = p.weights.shape
    if cin != cin_w:
        raise DimensionError(f"input channels {cin} != kernel channels {cin_w}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, p.weights, axes=[(1, 4, 5), (1, 2, 3)])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += p.bias[None, :, None, None]
    return out


def conv2d_backward(x: Array, p: LayerParams, grad_out: Array, stride: int = 1, pad: int = 0) -> Array:
    """Adjoint of :func:`conv2d_forward`; returns the input gradient."""
    batch, cin, h, w = x.shape
    cout, _, kh, kw = p.weights.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if grad_out.shape != (batch, cout, ho, wo):
        raise DimensionError(
            f"grad_out {grad_out.shape} != forward output ({batch}, {cout}, {ho}, {wo})"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    p.grad_bias += grad_out.sum(axis=(0, 2, 3))
    p.grad_weights += np.tensordot(grad_out, windows, axes=[(0, 2, 3), (0, 2, 3)])
    grad_xp = np.zeros((batch, cin, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, p.weights[:, :, i, j], axes=([1], [0]))
            grad_xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(grad_xp[:, :, pad : pad + h, pad : pad + w])
    return grad_xp


def _bn_axes(x: Array):
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")


def _bn_bcast(v: Array, ndim: int) -> Array:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: Array, s: BnState, mode: str) -> Array:
    """Normalize per channel; train mode uses batch statistics and updates
    the running averages, eval mode uses the running statistics."""
    require_finite("batchnorm input", x)
    axes = _bn_axes(x)
    if x.shape[1] != s.gamma.shape[0]:
        raise DimensionError(f"channels {x.shape[1]} != gamma size {s.gamma.shape[0]}")
    nd = x.ndim
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm train mode requires batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + s.epsilon)
        x_hat = (x - _bn_bcast(mean, nd)) * _bn_bcast(inv_std, nd)
        s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mean
        s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var
        s.cache = {"mode": "train", "x_hat": x_hat, "inv_std": inv_std, "axes": axes}
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(s.running_var + s.epsilon)
        x_hat = (x - _bn_bcast(s.running_mean, nd)) * _bn_bcast(inv_std, nd)
        s.cache = {"mode": "eval", "x_hat": x_hat, "inv_std": inv_std, "axes": axes}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _bn_bcast(s.gamma, nd) * x_hat + _bn_bcast(s.beta, nd)


def batchnorm_backward(x: Array, s: BnState, grad_out: Array) -> Array:
    """Gradient of normalize-scale-shift; consumes the cache of the last
    forward pass on this state."""
    if s.cache is None:
        raise RuntimeError("batchnorm_backward called without a cached forward pass")
    cache = s.cache
    x_hat, inv_std, axes = cache["x_hat"], cache["inv_std"], cache["axes"]
    if grad_out.shape != x_hat.shape:
        raise DimensionError(f"grad_out {grad_out.shape} != forward {x_hat.shape}")
    nd = grad_out.ndim
    s.grad_gamma += (grad_out * x_hat).sum(axis=axes)
    s.grad_beta += grad_out.sum(axis=axes)
    g_hat = grad_out * _bn_bcast(s.gamma, nd)
    if cache["mode"] == "eval":
        # Running statistics are constants: the map is affine per channel.
        return g_hat * _bn_bcast(inv_std, nd)
    m = grad_out.size // grad_out.shape[1]
    sum_g = g_hat.sum(axis=axes)
    sum_gx = (g_hat * x_hat).sum(axis=axes)
    return (
        _bn_bcast(inv_std / m, nd)
        * (m * g_hat - _bn_bcast(sum_g, nd) - x_hat * _bn_bcast(sum_gx, nd))
    )


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(x: Array, grad_out: Array) -> Array:
    """Mask the gradient where the forward input was <= 0."""
    return grad_out * (x > 0.0)


def dropout_forward(x: Array, rate: float, rng: np.random.Generator, mode: str):
    """Inverted dropout: survivors scaled by 1/(1-rate) so eval is identity.

    Returns ``(output, mask)`` where the mask already carries the scale, so
    backward is a plain elementwise product.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: Array, grad_out: Array) -> Array:
    return grad_out * mask


def sigmoid(z: Array) -> Array:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_logloss(z: Array, y: Array, weight_sq_norm: float, lam: float):
    """Mean Bernoulli log loss of sigmoid(z) plus lam * weight_sq_norm.

    Returns ``(loss, grad_z)`` with grad_z = (sigmoid(z) - y) / N.  The
    penalty term contributes to the reported loss only; its gradient is
    applied by the optimizer's weight-decay term.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape or z.size == 0:
        raise DimensionError(f"scores {z.shape} and labels {y.shape} must match and be non-empty")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    n = z.size
    # log(1 + e^z) - y*z is the stable form of the per-sample loss.
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z)) + lam * weight_sq_norm
    grad_z = (sigmoid(z) - y) / n
    return loss, grad_z


def softmax_cross_entropy(logits: Array, labels: Array):
    """Mean cross-entropy over integer class labels; stable via max shift.

    Returns ``(loss, grad_logits)`` with grad = (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"labels {labels.shape} != batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label outside [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-np.mean(log_probs[np.arange(batch), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, grad
