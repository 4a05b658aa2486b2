"""Encoder/decoder network: ReLU trunk, Gaussian (or deterministic) head and
either a softmax classifier or a Gaussian reconstruction decoder.

Parameters live in a flat ``dict[str, ndarray]`` so optimizers, averaging and
checkpoints can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import logsumexp

from . import encoder as enc
from .nn import (
    ConfigError,
    MlpSpec,
    affine_backward,
    affine_forward,
    log_softmax,
    relu,
    relu_backward,
    xavier_init,
)
from .numcore import DTYPE, Rng

DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    K: int
    n_classes: int = 10
    mode: str = enc.DIAG  # diag | fullcov2d | deterministic
    sigma_bias: float = -5.0
    task: str = "classify"  # classify | reconstruct
    recon_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "recon_hidden", tuple(int(h) for h in self.recon_hidden))
        if self.mode not in (enc.DIAG, enc.FULLCOV2D, DETERMINISTIC):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.task not in ("classify", "reconstruct"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "reconstruct" and self.mode == DETERMINISTIC:
            raise ConfigError("reconstruction decoder needs a stochastic encoder")
        if self.mode != DETERMINISTIC:
            self.head_spec  # validates K for fullcov2d

    @property
    def stochastic(self) -> bool:
        return self.mode != DETERMINISTIC

    @property
    def head_spec(self) -> enc.EncoderHeadSpec:
        mode = enc.DIAG if self.mode == DETERMINISTIC else self.mode
        return enc.EncoderHeadSpec(self.K, mode, self.sigma_bias)

    @property
    def head_width(self) -> int:
        return self.K if self.mode == DETERMINISTIC else self.head_spec.raw_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["recon_hidden"] = list(self.recon_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        d["recon_hidden"] = tuple(d.get("recon_hidden", ()))
        return cls(**d)


def init_params(arch: Architecture, rng: Rng) -> dict[str, np.ndarray]:
    params = xavier_init(rng.substream("encoder"), MlpSpec(arch.input_dim, arch.hidden, arch.head_width))
    drng = rng.substream("decoder")
    if arch.task == "classify":
        dec = xavier_init(drng, MlpSpec(arch.K, (), arch.n_classes))
        params["dec.W"], params["dec.b"] = dec["head.W"], dec["head.b"]
    else:
        dec = xavier_init(drng, MlpSpec(arch.K, arch.recon_hidden, arch.input_dim), prefix="rec")
        for k, v in dec.items():
            params[k.replace("head.", "recout.")] = v
    return params


def n_trunk_layers(arch: Architecture) -> int:
    return len(arch.hidden)


def trunk_forward(params, arch: Architecture, x, masks=None):
    """Hidden ReLU layers (with optional dropout multipliers) then the head.

    Returns ``(raw_head_outputs, cache)``.
    """
    h = np.asarray(x, dtype=DTYPE)
    cache = []
    for i in range(len(arch.hidden)):
        a = affine_forward(params[f"enc{i}.W"], params[f"enc{i}.b"], h)
        out = relu(a)
        m = None if masks is None else masks[i]
        if m is not None:
            out = out * m
        cache.append((h, a, m))
        h = out
    raw = affine_forward(params["head.W"], params["head.b"], h)
    cache.append((h, None, None))
    return raw, cache


def trunk_backward(params, arch: Architecture, cache, grad_raw, grads: dict) -> np.ndarray:
    """Accumulates trunk gradients into ``grads``; returns d/dx."""
    h_last = cache[-1][0]
    g, gW, gb = affine_backward(params["head.W"], h_last, grad_raw)
    grads["head.W"] = grads.get("head.W", 0) + gW
    grads["head.b"] = grads.get("head.b", 0) + gb
    for i in reversed(range(len(arch.hidden))):
        h_in, a, m = cache[i]
        if m is not None:
            g = g * m
        g = relu_backward(a, g)
        g, gW, gb = affine_backward(params[f"enc{i}.W"], h_in, g)
        grads[f"enc{i}.W"] = grads.get(f"enc{i}.W", 0) + gW
        grads[f"enc{i}.b"] = grads.get(f"enc{i}.b", 0) + gb
    return g


def code_from_raw(arch: Architecture, raw) -> enc.GaussianCode:
    if arch.mode == DETERMINISTIC:
        raise ConfigError("deterministic architecture has no Gaussian code")
    return enc.encode(raw, arch.head_spec)


def mean_from_raw(arch: Architecture, raw) -> np.ndarray:
    return raw[..., : arch.K]


def decoder_logits(params, z) -> np.ndarray:
    return affine_forward(params["dec.W"], params["dec.b"], z)


def recon_forward(params, arch: Architecture, z):
    h = z
    cache = []
    for i in range(len(arch.recon_hidden)):
        a = affine_forward(params[f"rec{i}.W"], params[f"rec{i}.b"], h)
        cache.append((h, a))
        h = relu(a)
    out = affine_forward(params["recout.W"], params["recout.b"], h)
    cache.append((h, None))
    return out, cache


def recon_backward(params, arch: Architecture, cache, grad_out, grads: dict) -> np.ndarray:
    g, gW, gb = affine_backward(params["recout.W"], cache[-1][0], grad_out)
    grads["recout.W"] = grads.get("recout.W", 0) + gW
    grads["recout.b"] = grads.get("recout.b", 0) + gb
    for i in reversed(range(len(arch.recon_hidden))):
        h_in, a = cache[i]
        g = relu_backward(a, g)
        g, gW, gb = affine_backward(params[f"rec{i}.W"], h_in, g)
        grads[f"rec{i}.W"] = grads.get(f"rec{i}.W", 0) + gW
        grads[f"rec{i}.b"] = grads.get(f"rec{i}.b", 0) + gb
    return g


def draw_eps(rng: Rng, arch: Architecture, n_samples: int, n: int) -> np.ndarray:
    return rng.normal((n_samples, n, arch.K))


def sample_logits(params, arch: Architecture, x, eps=None, mean_mode=False):
    """Decoder logits of shape ``(S, N, C)``.

    Deterministic architectures and ``mean_mode`` ignore ``eps`` beyond its
    sample count.
    """
    raw, _ = trunk_forward(params, arch, x)
    S = 1 if eps is None else eps.shape[0]
    if not arch.stochastic or mean_mode:
        z = np.broadcast_to(mean_from_raw(arch, raw), (S,) + raw.shape[:-1] + (arch.K,))
    else:
        z = enc.sample(code_from_raw(arch, raw), eps)
    return decoder_logits(params, z)


def predictive_log_probs(params, arch: Architecture, x, eps=None, mean_mode=False) -> np.ndarray:
    """``log((1/S) sum_s softmax(logits_s))``, shape ``(N, C)``."""
    logp = log_softmax(sample_logits(params, arch, x, eps, mean_mode))
    return logsumexp(logp, axis=0) - np.log(logp.shape[0])


def forward_logpbar(params, arch: Architecture, x, eps=None, mean_mode=False):
    """Like :func:`predictive_log_probs` but keeps what the input gradient needs."""
    x = np.asarray(x, dtype=DTYPE)
    raw, tcache = trunk_forward(params, arch, x)
    S = 1 if eps is None else eps.shape[0]
    code = None
    if not arch.stochastic or mean_mode:
        z = np.broadcast_to(mean_from_raw(arch, raw), (S,) + raw.shape[:-1] + (arch.K,))
    else:
        code = code_from_raw(arch, raw)
        z = enc.sample(code, eps)
    logp = log_softmax(decoder_logits(params, z))
    logpbar = logsumexp(logp, axis=0) - np.log(S)
    return logpbar, (raw, tcache, code, eps, logp, logpbar, mean_mode)


def backward_logpbar_to_x(params, arch: Architecture, cache, grad_logpbar) -> np.ndarray:
    """Input gradient of a scalar given its gradient w.r.t. ``log pbar``."""
    raw, tcache, code, eps, logp, logpbar, mean_mode = cache
    S = logp.shape[0]
    # weights w_s = p_s / (S * pbar): d log pbar_j / d log p_{s,j}
    w = np.exp(logp - logpbar[None]) / S
    g_logp = w * grad_logpbar[None]
    p = np.exp(logp)
    g_logits = g_logp - p * g_logp.sum(-1, keepdims=True)
    g_z = g_logits @ params["dec.W"]
    g_raw = np.zeros_like(raw)
    if code is None:
        g_raw[..., : arch.K] = g_z.sum(axis=0)
    else:
        gm, gs = enc.sample_backward(code, eps, g_z)
        g_raw = enc.encode_backward(raw, arch.head_spec, gm, gs)
    return trunk_backward(params, arch, tcache, g_raw, {})


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def unflatten(theta: np.ndarray, like: dict) -> dict:
    out, i = {}, 0
    for k in sorted(like):
        n = like[k].size
        out[k] = theta[i:i + n].reshape(like[k].shape)
        i += n
    return out


def copy_params(params: dict) -> dict:
    return {k: np.array(v, copy=True) for k, v in params.items()}
