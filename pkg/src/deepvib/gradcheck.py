"""Finite-difference verification of every training objective on small random
networks with frozen noise and dropout masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Architecture, flatten, init_params, unflatten
from .nn import GradCheckReport, dropout_mask, grad_check
from .numcore import Rng
from .objective import (
    VibConfig,
    confidence_penalty_loss,
    deterministic_loss,
    label_smoothing_loss,
    unsup_vib_loss,
    vib_loss,
)

N, D, H, K, C = 6, 7, 8, 3, 4


@dataclass
class GradCheckCase:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _params(arch: Architecture, rng: Rng) -> dict:
    p = init_params(arch, rng)
    # non-zero biases keep ReLU pre-activations away from the kink
    for k in p:
        if k.endswith(".b"):
            p[k] = 0.3 * rng.substream("bias", k).normal(p[k].shape)
    return p


def _wrap(loss_fn, like: dict, inject_fault: bool):
    def f(theta):
        params = unflatten(theta, like)
        out = loss_fn(params)
        grads = {k: out.grads.get(k, np.zeros_like(v)) for k, v in like.items()}
        g = flatten(grads)
        return out.total, (-g if inject_fault else g)
    return f


def objective_cases(seed: int = 0):
    """Yield ``(name, loss_fn(params), params)`` for each objective variant."""
    rng = Rng(seed, ("gradcheck",))
    x = rng.substream("x").uniform(-1, 1, (N, D))
    y = rng.substream("y").integers(0, C, N)
    eps = rng.substream("eps").normal((2, N, K))

    stoch = Architecture(D, (H, H), K, C, "diag", sigma_bias=0.0)
    p = _params(stoch, rng.substream("stoch"))
    for beta in (0.0, 1e-3, 1.0):
        yield f"vib(beta={beta:g})", (lambda q, b=beta: vib_loss(x, y, q, stoch, VibConfig(b), eps=eps)), p

    full = Architecture(D, (H,), 2, C, "fullcov2d", sigma_bias=0.0)
    pf = _params(full, rng.substream("full"))
    # lift the off-diagonal raw output so the Cholesky term is exercised
    pf["head.b"][4] = 20.0
    eps2 = rng.substream("eps2").normal((2, N, 2))
    yield "vib_fullcov2d(beta=0.001)", (lambda q: vib_loss(x, y, q, full, VibConfig(1e-3), eps=eps2)), pf

    det = Architecture(D, (H, H), K, C, "deterministic")
    pd = _params(det, rng.substream("det"))
    yield "deterministic", (lambda q: deterministic_loss(x, y, q, det)), pd
    masks = [dropout_mask(rng.substream("mask", i), (N, H), 0.4) for i in range(2)]
    yield "dropout(rate=0.4)", (lambda q: deterministic_loss(x, y, q, det, masks)), pd
    yield "confidence_penalty(beta=0.5)", (lambda q: confidence_penalty_loss(x, y, q, det, 0.5)), pd
    yield "label_smoothing(eps=0.1)", (lambda q: label_smoothing_loss(x, y, q, det, 0.1)), pd

    rec = Architecture(D, (H,), K, C, "diag", sigma_bias=0.0, task="reconstruct", recon_hidden=(H,))
    pr = _params(rec, rng.substream("rec"))
    for beta in (0.5, 1.0):
        yield f"unsup_vib(beta={beta:g})", (lambda q, b=beta: unsup_vib_loss(x, q, rec, b, eps=eps)), pr


def check_all_objectives(seed: int = 0, tolerance: float = 1e-5, inject_fault: bool = False,
                         h: float = 1e-6) -> list[GradCheckCase]:
    cases = []
    for name, fn, params in objective_cases(seed):
        report = grad_check(_wrap(fn, params, inject_fault), flatten(params), tolerance, h)
        cases.append(GradCheckCase(name, report))
    return cases
