"""Neural-network building blocks with explicit forward and backward passes.

Weights are stored ``(out, in)`` and applied to row-major batches, so an
affine layer computes ``x @ W.T + b`` for ``x`` of shape ``(N, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp

from .numcore import DTYPE, Rng, ShapeError, finite_diff_grad


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected ReLU trunk ``input_dim -> hidden... -> head``."""

    input_dim: int
    hidden: tuple[int, ...]
    head: int
    activation: str = "relu"

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden, self.head)
        if any(int(w) < 1 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.head)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def xavier_init(rng: Rng, spec: MlpSpec, prefix: str = "enc") -> dict[str, np.ndarray]:
    """Glorot-uniform weights (averaged fan) and zero biases for every layer.

    Hidden layers are named ``{prefix}{i}`` and the output layer ``head``.
    """
    params = {}
    widths = spec.widths
    n_layers = len(widths) - 1
    for i in range(n_layers):
        name = "head" if i == n_layers - 1 else f"{prefix}{i}"
        params[f"{name}.W"] = xavier_uniform(rng.substream(name), widths[i], widths[i + 1])
        params[f"{name}.b"] = np.zeros(widths[i + 1], dtype=DTYPE)
    return params


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer {W.shape}")
    return x @ W.T + b


def affine_backward(W: np.ndarray, x: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_W, grad_b)`` for ``y = x W^T + b``."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ W, g2.T @ x2, g2.sum(axis=0)


@dataclass
class AffineLayer:
    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)
    _x: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        self.zero_grad()

    def zero_grad(self):
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        self._x = x
        return affine_forward(self.weight, self.bias, x)

    def backward(self, grad_out):
        gx, gW, gb = affine_backward(self.weight, self._x, np.asarray(grad_out, dtype=DTYPE))
        self.grad_weight += gW
        self.grad_bias += gb
        return gx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def softplus_biased(x, bias: float = 0.0):
    """``log(1 + exp(x + bias))`` in overflow-free form."""
    t = np.asarray(x, dtype=DTYPE) + bias
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def softplus_biased_grad(x, bias: float = 0.0):
    return expit(np.asarray(x, dtype=DTYPE) + bias)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``.

    ``logits`` may be a single vector with an integer label or an ``(N, C)``
    batch with ``N`` labels.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(labels))
    n = lg.shape[0]
    logp = log_softmax(lg)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def dropout_mask(rng: Rng, shape, rate: float) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.uniform(size=shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, rng: Rng | None, training: bool):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=DTYPE)
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(rng, x.shape, rate)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    rel_errors: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta,
    tolerance: float = 1e-5,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare an analytic gradient to central differences.

    Per-coordinate error is ``|g - g_fd| / max(1, |g_fd|)``.
    """
    theta = np.asarray(theta, dtype=DTYPE)
    _, g = loss_and_grad(theta.copy())
    g_fd = finite_diff_grad(lambda t: loss_and_grad(t)[0], theta, h)
    rel = np.abs(np.asarray(g) - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return GradCheckReport(float(rel.max(initial=0.0)), tolerance, rel)
