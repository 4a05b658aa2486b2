"""Stochastic Gaussian bottleneck: head parameterization, reparameterized
sampling and the closed-form KL divergence to a standard normal prior.

All functions accept batches: a code's ``mean`` has shape ``(..., K)`` and its
scale is either ``(..., K)`` standard deviations or ``(..., K, K)`` lower
triangular Cholesky factors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, softplus_biased, softplus_biased_grad
from .numcore import DTYPE, ShapeError

DIAG = "diag"
FULLCOV = "fullcov"
FULLCOV2D = "fullcov2d"


@dataclass(frozen=True)
class EncoderHeadSpec:
    K: int
    mode: str = DIAG
    sigma_bias: float = -5.0
    offdiag_scale: float = 1e-2

    def __post_init__(self):
        if self.mode not in (DIAG, FULLCOV2D):
            raise ConfigError(f"unknown covariance mode {self.mode!r}")
        if self.mode == FULLCOV2D and self.K != 2:
            raise ConfigError("fullcov2d requires K=2")
        if not np.isfinite(self.sigma_bias):
            raise ConfigError("sigma_bias must be finite")

    @property
    def raw_width(self) -> int:
        """Number of head outputs the encoder MLP must produce."""
        return 2 * self.K if self.mode == DIAG else 6


@dataclass(frozen=True)
class GaussianCode:
    mean: np.ndarray
    scale: np.ndarray
    mode: str = DIAG

    @property
    def K(self) -> int:
        return self.mean.shape[-1]

    def covariance(self) -> np.ndarray:
        if self.mode == DIAG:
            return self.scale[..., :, None] ** 2 * np.eye(self.K)
        return self.scale @ np.swapaxes(self.scale, -1, -2)

    def log_det_cov(self) -> np.ndarray:
        if self.mode == DIAG:
            return 2.0 * np.log(self.scale).sum(axis=-1)
        return 2.0 * np.log(np.diagonal(self.scale, axis1=-2, axis2=-1)).sum(axis=-1)

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        """Log density of ``z`` (broadcast against the code's batch)."""
        d = z - self.mean
        if self.mode == DIAG:
            u = d / self.scale
        else:
            L = np.broadcast_to(self.scale, d.shape + (self.K,))
            u = np.linalg.solve(L, d[..., None])[..., 0]
        return -0.5 * (u * u).sum(-1) - 0.5 * self.log_det_cov() - 0.5 * self.K * np.log(2 * np.pi)

    def degenerate(self) -> "GaussianCode":
        """Same means with zero spread; used for mean-mode evaluation."""
        return GaussianCode(self.mean, np.zeros_like(self.scale), self.mode)


def encode_diag(features, spec: EncoderHeadSpec) -> GaussianCode:
    features = np.asarray(features, dtype=DTYPE)
    K = spec.K
    if features.shape[-1] != 2 * K:
        raise ShapeError(f"diag head expects {2 * K} features, got {features.shape[-1]}")
    mean = features[..., :K]
    std = softplus_biased(features[..., K:], spec.sigma_bias)
    return GaussianCode(mean, std, DIAG)


def encode_fullcov2d(features, spec: EncoderHeadSpec) -> GaussianCode:
    features = np.asarray(features, dtype=DTYPE)
    if features.shape[-1] != 6:
        raise ShapeError(f"fullcov2d head expects 6 features, got {features.shape[-1]}")
    mean = features[..., :2]
    m = features[..., 2:6].reshape(features.shape[:-1] + (2, 2))
    L = np.zeros_like(m)
    L[..., 0, 0] = softplus_biased(m[..., 0, 0], spec.sigma_bias)
    L[..., 1, 1] = softplus_biased(m[..., 1, 1], spec.sigma_bias)
    L[..., 1, 0] = spec.offdiag_scale * m[..., 1, 0]
    # m[..., 0, 1] (upper triangle) is dropped
    return GaussianCode(mean, L, FULLCOV)


def encode(features, spec: EncoderHeadSpec) -> GaussianCode:
    if spec.mode == DIAG:
        return encode_diag(features, spec)
    return encode_fullcov2d(features, spec)


def encode_backward(features, spec: EncoderHeadSpec, grad_mean, grad_scale) -> np.ndarray:
    """Pull gradients on ``(mean, scale)`` back to the raw head outputs."""
    features = np.asarray(features, dtype=DTYPE)
    g = np.zeros_like(features)
    if spec.mode == DIAG:
        K = spec.K
        g[..., :K] = grad_mean
        g[..., K:] = grad_scale * softplus_biased_grad(features[..., K:], spec.sigma_bias)
        return g
    g[..., :2] = grad_mean
    g[..., 2] = grad_scale[..., 0, 0] * softplus_biased_grad(features[..., 2], spec.sigma_bias)
    g[..., 4] = grad_scale[..., 1, 0] * spec.offdiag_scale
    g[..., 5] = grad_scale[..., 1, 1] * softplus_biased_grad(features[..., 5], spec.sigma_bias)
    return g


def sample(code: GaussianCode, eps) -> np.ndarray:
    """``z = mean + scale * eps`` (diag) or ``mean + L @ eps`` (Cholesky).

    ``eps`` may carry extra leading sample axes, e.g. ``(S, N, K)`` against a
    code of batch shape ``(N,)``.
    """
    eps = np.asarray(eps, dtype=DTYPE)
    if eps.shape[-1] != code.K:
        raise ShapeError(f"eps has width {eps.shape[-1]}, code has K={code.K}")
    if code.mode == DIAG:
        return code.mean + code.scale * eps
    return code.mean + np.einsum("...ij,...j->...i", code.scale, eps)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def sample_backward(code: GaussianCode, eps, grad_z):
    """Gradients of a loss w.r.t. ``(mean, scale)`` given ``dloss/dz``."""
    eps = np.asarray(eps, dtype=DTYPE)
    grad_mean = _reduce_to(grad_z, code.mean.shape)
    if code.mode == DIAG:
        grad_scale = _reduce_to(grad_z * eps, code.scale.shape)
    else:
        outer = grad_z[..., :, None] * eps[..., None, :]
        grad_scale = np.tril(_reduce_to(outer, code.scale.shape))
    return grad_mean, grad_scale


def kl_to_prior(code: GaussianCode) -> np.ndarray:
    """KL[N(mean, cov) || N(0, I)] in nats, one value per code in the batch."""
    mu2 = (code.mean ** 2).sum(-1)
    if code.mode == DIAG:
        tr = (code.scale ** 2).sum(-1)
    else:
        tr = (code.scale ** 2).sum(axis=(-2, -1))
    return 0.5 * (tr + mu2 - code.K - code.log_det_cov())


def kl_backward(code: GaussianCode):
    """Gradient of each code's own KL w.r.t. its mean and scale."""
    if code.mode == DIAG:
        return code.mean.copy(), code.scale - 1.0 / code.scale
    g = code.scale.copy()
    d = np.diagonal(code.scale, axis1=-2, axis2=-1)
    idx = np.arange(code.K)
    g[..., idx, idx] -= 1.0 / d
    return code.mean.copy(), np.tril(g)


def kl_monte_carlo(code: GaussianCode, eps) -> tuple[float, float]:
    """Sample estimate of the KL for a single code: returns ``(mean, stderr)``.

    Uses ``log p(z|x) - log r(z)`` evaluated at ``z = sample(code, eps)``.
    """
    z = sample(code, eps)
    log_r = -0.5 * (z * z).sum(-1) - 0.5 * code.K * np.log(2 * np.pi)
    vals = code.log_prob(z) - log_r
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))
