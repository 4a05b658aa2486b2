"""Training objectives and information estimates.

Losses return a :class:`LossBreakdown` whose ``grads`` dict mirrors the
parameter dict. Every objective is a mean over the batch, in nats; bit-valued
estimates are converted only at the reporting functions (``mi_*``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .model import (
    Architecture,
    code_from_raw,
    decoder_logits,
    mean_from_raw,
    recon_backward,
    recon_forward,
    trunk_backward,
    trunk_forward,
)
from .nn import ConfigError, affine_backward, log_softmax, softmax
from .numcore import DTYPE, NumericError, Rng

LN2 = np.log(2.0)


@dataclass(frozen=True)
class VibConfig:
    beta: float = 1e-3
    train_samples: int = 1
    eval_samples: int = 12

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.train_samples < 1 or self.eval_samples < 1:
            raise ConfigError("sample counts must be >= 1")


@dataclass
class LossBreakdown:
    total: float
    xent_term: float
    kl_term: float = 0.0
    grads: dict = field(default_factory=dict, repr=False)


def _check(name: str, value: float):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {name} term: {value}")


def _eps(rng, eps, n_samples, n, K):
    if eps is not None:
        return np.asarray(eps, dtype=DTYPE)
    if rng is None:
        raise ValueError("either rng or eps must be given")
    return rng.normal((n_samples, n, K))


def vib_loss(x, y, params, arch: Architecture, cfg: VibConfig, rng: Rng | None = None,
             eps=None, masks=None) -> LossBreakdown:
    """Monte Carlo estimate of ``E_eps[-log q(y|z)] + beta * KL[p(z|x) || N(0, I)]``.

    ``eps`` of shape ``(S, N, K)`` freezes the noise; otherwise
    ``cfg.train_samples`` draws are taken from ``rng``.
    """
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y)
    n = x.shape[0]
    raw, tcache = trunk_forward(params, arch, x, masks)
    code = code_from_raw(arch, raw)
    eps = _eps(rng, eps, cfg.train_samples, n, arch.K)
    S = eps.shape[0]
    z = enc.sample(code, eps)
    logits = decoder_logits(params, z)
    logp = log_softmax(logits)
    xent = -logp[:, np.arange(n), y].mean()
    kl = enc.kl_to_prior(code).mean()
    _check("cross-entropy", xent)
    _check("KL", kl)
    total = xent + cfg.beta * kl

    g_logits = np.exp(logp)
    g_logits[:, np.arange(n), y] -= 1.0
    g_logits /= S * n
    grads = {}
    g_z, grads["dec.W"], grads["dec.b"] = affine_backward(params["dec.W"], z, g_logits)
    gm, gs = enc.sample_backward(code, eps, g_z)
    km, ks = enc.kl_backward(code)
    gm = gm + (cfg.beta / n) * km
    gs = gs + (cfg.beta / n) * ks
    g_raw = enc.encode_backward(raw, arch.head_spec, gm, gs)
    trunk_backward(params, arch, tcache, g_raw, grads)
    return LossBreakdown(float(total), float(xent), float(kl), grads)


def jib0_estimate(x, y, params, arch: Architecture, eps) -> float:
    """Sampled deterministic-limit objective ``-mean log softmax(W z + b)[y]``."""
    raw, _ = trunk_forward(params, arch, np.asarray(x, dtype=DTYPE))
    code = code_from_raw(arch, raw)
    z = enc.sample(code, eps)
    logits = z @ params["dec.W"].T + params["dec.b"]
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    y = np.asarray(y)
    picked = logits[:, np.arange(len(y)), y]
    return float(np.mean(lse - picked))


def _det_forward(x, params, arch, masks):
    raw, tcache = trunk_forward(params, arch, np.asarray(x, dtype=DTYPE), masks)
    z = mean_from_raw(arch, raw)
    return raw, tcache, z, decoder_logits(params, z)


def _det_backward(params, arch, raw, tcache, z, g_logits) -> dict:
    grads = {}
    g_z, grads["dec.W"], grads["dec.b"] = affine_backward(params["dec.W"], z, g_logits)
    g_raw = np.zeros_like(raw)
    g_raw[..., : arch.K] = g_z
    trunk_backward(params, arch, tcache, g_raw, grads)
    return grads


def soft_target_loss(x, targets, params, arch: Architecture, masks=None, beta_cp: float = 0.0) -> LossBreakdown:
    """Cross-entropy against target distributions minus ``beta_cp`` times the
    predictive entropy, through the mean path ``z = f_mu(x)``."""
    raw, tcache, z, logits = _det_forward(x, params, arch, masks)
    n = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    xent = -(targets * logp).sum(-1).mean()
    ent = -(p * logp).sum(-1)
    total = xent - beta_cp * ent.mean()
    _check("cross-entropy", total)
    g = p - targets
    if beta_cp:
        g = g + beta_cp * p * (logp + ent[:, None])
    grads = _det_backward(params, arch, raw, tcache, z, g / n)
    return LossBreakdown(float(total), float(xent), 0.0, grads)


def onehot(y, n_classes: int) -> np.ndarray:
    return np.eye(n_classes, dtype=DTYPE)[np.asarray(y)]


def deterministic_loss(x, y, params, arch: Architecture, masks=None) -> LossBreakdown:
    """Plain softmax cross-entropy with the Gaussian layer dropped (``z = mu``)."""
    return soft_target_loss(x, onehot(y, params["dec.W"].shape[0]), params, arch, masks)


def confidence_penalty_loss(x, y, params, arch: Architecture, beta_cp: float, masks=None) -> LossBreakdown:
    return soft_target_loss(x, onehot(y, params["dec.W"].shape[0]), params, arch, masks, beta_cp)


def label_smooth(target, eps: float) -> np.ndarray:
    """Replace zeros of a one-hot vector by ``eps`` and renormalize."""
    if eps < 0:
        raise ConfigError("label smoothing eps must be >= 0")
    t = np.asarray(target, dtype=DTYPE)
    t = np.where(t == 0, eps, t)
    return t / t.sum(axis=-1, keepdims=True)


def label_smoothing_loss(x, y, params, arch: Architecture, eps: float, masks=None) -> LossBreakdown:
    targets = label_smooth(onehot(y, params["dec.W"].shape[0]), eps)
    return soft_target_loss(x, targets, params, arch, masks)


def gaussian_nll(x, xhat) -> np.ndarray:
    """``-log N(x | xhat, I)`` summed over the last axis."""
    d = x.shape[-1]
    return 0.5 * ((x - xhat) ** 2).sum(-1) + 0.5 * d * np.log(2 * np.pi)


def unsup_vib_loss(x, params, arch: Architecture, beta: float, rng: Rng | None = None,
                   eps=None, n_samples: int = 1) -> LossBreakdown:
    """Negated unsupervised bottleneck objective:
    ``E[-log q(x|z)] + beta * mean KL[p(z|x) || N(0, I)]``.

    ``q(x|z)`` is a unit-variance Gaussian whose mean is the reconstruction
    network output. At ``beta = 1`` this is the negative VAE evidence bound.
    """
    if arch.task != "reconstruct":
        raise ConfigError("unsup_vib_loss needs a reconstruction architecture")
    x = np.asarray(x, dtype=DTYPE)
    n = x.shape[0]
    raw, tcache = trunk_forward(params, arch, x)
    code = code_from_raw(arch, raw)
    eps = _eps(rng, eps, n_samples, n, arch.K)
    S = eps.shape[0]
    z = enc.sample(code, eps)
    xhat, rcache = recon_forward(params, arch, z)
    recon = gaussian_nll(x, xhat).mean()
    kl = enc.kl_to_prior(code).mean()
    _check("reconstruction", recon)
    _check("KL", kl)
    total = recon + beta * kl

    grads = {}
    g_z = recon_backward(params, arch, rcache, (xhat - x) / (S * n), grads)
    gm, gs = enc.sample_backward(code, eps, g_z)
    km, ks = enc.kl_backward(code)
    g_raw = enc.encode_backward(raw, arch.head_spec, gm + (beta / n) * km, gs + (beta / n) * ks)
    trunk_backward(params, arch, tcache, g_raw, grads)
    return LossBreakdown(float(total), float(recon), float(kl), grads)


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def kl_per_example(x, params, arch: Architecture, batch_size: int = 1000) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty(x.shape[0])
    for sl in _batches(x.shape[0], batch_size):
        raw, _ = trunk_forward(params, arch, x[sl])
        out[sl] = enc.kl_to_prior(code_from_raw(arch, raw))
    return out


def mi_zx_upper(x, params, arch: Architecture) -> float:
    """Upper bound on I(Z;X) in bits: mean analytic KL to the prior."""
    if not arch.stochastic:
        return float("nan")
    return float(kl_per_example(x, params, arch).mean() / LN2)


def label_entropy_bits(y, n_classes: int | None = None) -> float:
    counts = np.bincount(np.asarray(y), minlength=n_classes or 0)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mean_sampled_xent(x, y, params, arch: Architecture, rng: Rng, n_samples: int,
                      batch_size: int = 1000) -> float:
    """``mean_{n,s} -log q(y_n | z_s)`` in nats, drawing ``n_samples`` codes per input."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y)
    total = 0.0
    for b, sl in enumerate(_batches(x.shape[0], batch_size)):
        raw, _ = trunk_forward(params, arch, x[sl])
        n = raw.shape[0]
        if arch.stochastic:
            eps = rng.substream(b).normal((n_samples, n, arch.K))
            z = enc.sample(code_from_raw(arch, raw), eps)
        else:
            z = mean_from_raw(arch, raw)[None]
        logp = log_softmax(decoder_logits(params, z))
        total += -logp[:, np.arange(n), y[sl]].mean(axis=0).sum()
    return total / x.shape[0]


def mi_zy_lower(x, y, params, arch: Architecture, rng: Rng, n_samples: int = 12,
                n_classes: int | None = None) -> float:
    """Lower bound on I(Z;Y) in bits: ``H(Y) - E[-log2 q(y|z)]``."""
    h = label_entropy_bits(y, n_classes)
    return h - mean_sampled_xent(x, y, params, arch, rng, n_samples) / LN2


def expected_softmax_tse_lower(W, code: enc.GaussianCode) -> np.ndarray:
    """Second-order Taylor approximation to a lower bound on ``E[softmax(W z)]``
    for ``z ~ N(mean, cov)``:

        s * exp(-1/2 sqrt(s)^T A sqrt(s) + 1/2 s^T A s),  s = softmax(W mean), A = W cov W^T
    """
    W = np.asarray(W, dtype=DTYPE)
    s = softmax(W @ code.mean)
    A = W @ code.covariance() @ W.T
    r = np.sqrt(s)
    return s * np.exp(-0.5 * r @ A @ r + 0.5 * s @ A @ s)
