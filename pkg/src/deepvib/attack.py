"""Adversarial examples: fast gradient sign, the L2 optimization attack of
Carlini and Wagner, perturbation norms and a robustness sweep over models.

Stochastic models are attacked and judged through the predictive
distribution averaged over ``eval_samples`` posterior draws. Attack success
is always re-decided by a fresh draw after the attack finishes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import Architecture, backward_logpbar_to_x, forward_logpbar
from .nn import ConfigError
from .numcore import DTYPE, Rng


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "l2opt"
    epsilon: float = 0.25
    targeted: bool = False
    target_label: int | None = None
    max_iterations: int = 1000
    c_search_steps: int = 9
    c_init: float = 1e-3
    c_max: float = 1e10
    inner_lr: float = 1e-2
    kappa: float = 0.0
    eval_samples: int = 12
    mean_mode: bool = False
    abort_early: bool = True
    l0_threshold: float = 1e-6
    confirm_draws: int = 5

    def __post_init__(self):
        if self.kind not in ("fgs", "l2opt"):
            raise ConfigError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0 or self.max_iterations < 0 or self.c_search_steps < 0:
            raise ConfigError("epsilon, max_iterations and c_search_steps must be >= 0")
        if self.confirm_draws < 1:
            raise ConfigError("confirm_draws must be >= 1")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray = field(repr=False)
    success: bool
    pred: int
    true_label: int
    target_label: int | None
    l0: int
    l2: float
    linf: float

    def record(self, index: int) -> dict:
        return {"index": int(index), "true_label": int(self.true_label),
                "target_label": None if self.target_label is None else int(self.target_label),
                "success": bool(self.success), "l0": int(self.l0), "l2": float(self.l2),
                "linf": float(self.linf), "pred": int(self.pred)}


def perturb_norms(x, x_adv, l0_threshold: float = 1e-6) -> tuple[int, float, float]:
    d = np.asarray(x_adv, dtype=DTYPE) - np.asarray(x, dtype=DTYPE)
    a = np.abs(d)
    return int(np.sum(a > l0_threshold)), float(np.sqrt(np.sum(d * d))), float(a.max(initial=0.0))


def _eps(arch: Architecture, rng: Rng | None, S: int, n: int, mean_mode: bool):
    if not arch.stochastic or mean_mode:
        return None
    return rng.normal((S, n, arch.K))


def predict(params, arch: Architecture, x, rng: Rng | None, n_samples: int = 12,
            mean_mode: bool = False) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    logpbar, _ = forward_logpbar(params, arch, x, _eps(arch, rng, n_samples, x.shape[0], mean_mode), mean_mode)
    return logpbar.argmax(axis=1)


def model_gradient_x(params, arch: Architecture, x, labels, rng: Rng | None = None,
                     n_samples: int = 12, mean_mode: bool = False, eps=None):
    """``sum_n -log pbar(y_n | x_n)`` and its gradient w.r.t. the inputs,
    with ``pbar`` the ``n_samples``-draw predictive average (frozen ``eps``)."""
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    labels = np.atleast_1d(labels)
    if eps is None:
        eps = _eps(arch, rng, n_samples, x.shape[0], mean_mode)
    logpbar, cache = forward_logpbar(params, arch, x, eps, mean_mode)
    rows = np.arange(x.shape[0])
    g = np.zeros_like(logpbar)
    g[rows, labels] = -1.0
    return float(-logpbar[rows, labels].sum()), backward_logpbar_to_x(params, arch, cache, g)


def _within_linf(x, x_adv, epsilon: float):
    """Step entries whose rounded difference exceeds ``epsilon`` one ulp back
    towards ``x`` so that ``|x_adv - x| <= epsilon`` holds in floating point."""
    x_adv = x_adv.copy()
    for _ in range(4):
        over = np.abs(x_adv - x) > epsilon
        if not over.any():
            break
        x_adv[over] = np.nextafter(x_adv[over], x[over])
    return x_adv


def fgs(params, arch: Architecture, x, y_true, epsilon: float, rng: Rng | None = None,
        n_samples: int = 12, mean_mode: bool = False, l0_threshold: float = 1e-6) -> list[AttackResult]:
    """One signed-gradient step of size ``epsilon`` on the true-label loss,
    clipped to ``[-1, 1]``. Works on a batch; returns one result per row.

    Success means the adversarial input is misclassified, judged against the
    true label (so an input that was already wrong counts as a success even at
    ``epsilon = 0``; for correctly classified inputs this is exactly
    "the prediction changed").
    """
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    y_true = np.atleast_1d(y_true)
    rng = rng or Rng(0, ("fgs",))
    _, g = model_gradient_x(params, arch, x, y_true, rng.substream("grad"), n_samples, mean_mode)
    x_adv = _within_linf(x, np.clip(x + epsilon * np.sign(g), -1.0, 1.0), epsilon)
    after = predict(params, arch, x_adv, rng.substream("verify"), n_samples, mean_mode)
    out = []
    for i in range(x.shape[0]):
        l0, l2, linf = perturb_norms(x[i], x_adv[i], l0_threshold)
        out.append(AttackResult(x_adv[i], bool(after[i] != y_true[i]), int(after[i]), int(y_true[i]),
                                None, l0, l2, linf))
    return out


def _margin(logpbar, labels, targeted: bool):
    """C&W hinge argument: for targeted attacks ``max_{j!=t} Z_j - Z_t``;
    untargeted ``Z_y - max_{j!=y} Z_j``. Returns values and the competing index."""
    rows = np.arange(logpbar.shape[0])
    other = logpbar.copy()
    other[rows, labels] = -np.inf
    j = other.argmax(axis=1)
    if targeted:
        return logpbar[rows, j] - logpbar[rows, labels], j
    return logpbar[rows, labels] - logpbar[rows, j], j


def _succeeds(logpbar, labels, targeted: bool, kappa: float = 0.0):
    m, _ = _margin(logpbar, labels, targeted)
    return m <= -kappa if kappa > 0 else m < 0


def l2opt(params, arch: Architecture, x, y_true, cfg: AttackConfig, rng: Rng | None = None,
          target=None) -> list[AttackResult]:
    """Minimum-L2 attack: Adam in a tanh-reparameterized box on
    ``||delta||^2 + c * max(margin, -kappa)``, with a binary search on ``c``.

    ``x`` is a batch; targets come from ``target`` (per row) or
    ``cfg.target_label`` for targeted attacks.
    """
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    n = x.shape[0]
    y_true = np.atleast_1d(np.asarray(y_true))
    rng = rng or Rng(0, ("l2opt",))
    S, mm = cfg.eval_samples, cfg.mean_mode
    if cfg.targeted:
        labels = np.atleast_1d(target if target is not None else cfg.target_label)
        if labels.size == 1 and n > 1:
            labels = np.repeat(labels, n)
        if labels.dtype == object or np.any(labels == y_true):
            raise ConfigError("targeted attack needs a target label different from the true label")
    else:
        labels = y_true

    # x' = clip(x + tanh(w) - tanh(w0)): starts at x exactly, stays in the box
    w0 = np.arctanh(np.clip(x, -1, 1) * 0.999999)
    t0 = np.tanh(w0)
    lower = np.zeros(n)
    upper = np.full(n, cfg.c_max)
    c = np.full(n, cfg.c_init)
    best_l2 = np.full(n, np.inf)
    best_x = x.copy()
    fallback_x = x.copy()
    fallback_margin = np.full(n, np.inf)
    step = 0
    verify = rng.substream("verify_loop")

    for outer in range(cfg.c_search_steps if cfg.max_iterations > 0 else 0):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        last_ok = np.full(n, -1)
        prev = np.inf
        it = 0
        for it in range(cfg.max_iterations):
            step += 1
            u = x + np.tanh(w) - t0
            xa = np.clip(u, -1.0, 1.0)
            inside = (u >= -1.0) & (u <= 1.0)
            eps = _eps(arch, rng.substream("step", step), S, n, mm)
            logpbar, cache = forward_logpbar(params, arch, xa, eps, mm)
            margin, j = _margin(logpbar, labels, cfg.targeted)
            d = xa - x
            l2sq = (d * d).sum(axis=1)
            hinge = np.maximum(margin, -cfg.kappa)
            loss = l2sq + c * hinge
            # A loop success only counts once it holds on independent draws.
            # Thousands of iterates hover near a stochastic boundary, so a
            # single extra check still lets lucky points through; requiring
            # every one of several checks keeps the best-so-far honest.
            idx = np.flatnonzero(_succeeds(logpbar, labels, cfg.targeted, cfg.kappa))
            if idx.size:
                for r in range(cfg.confirm_draws if arch.stochastic and not mm else 1):
                    chk, _ = forward_logpbar(params, arch, xa[idx],
                                             _eps(arch, verify.substream(step, r), S, idx.size, mm), mm)
                    idx = idx[_succeeds(chk, labels[idx], cfg.targeted, cfg.kappa)]
                    if not idx.size:
                        break
                ok = np.zeros(n, dtype=bool)
                ok[idx] = True
                last_ok[ok] = it
                better = ok & (l2sq < best_l2 ** 2)
                best_l2[better] = np.sqrt(l2sq[better])
                best_x[better] = xa[better]
            closer = ~np.isfinite(best_l2) & (margin < fallback_margin)
            fallback_margin[closer] = margin[closer]
            fallback_x[closer] = xa[closer]

            # gradient of loss w.r.t. xa, then through clip and tanh
            g_logp = np.zeros_like(logpbar)
            active = margin > -cfg.kappa
            rows = np.flatnonzero(active)
            sign = 1.0 if cfg.targeted else -1.0
            g_logp[rows, j[rows]] += sign * c[rows]
            g_logp[rows, labels[rows]] -= sign * c[rows]
            g_x = 2.0 * d + backward_logpbar_to_x(params, arch, cache, g_logp)
            g_w = g_x * inside * (1.0 - np.tanh(w) ** 2)
            m = 0.9 * m + 0.1 * g_w
            v = 0.999 * v + 0.001 * g_w ** 2
            mh = m / (1 - 0.9 ** (it + 1))
            vh = v / (1 - 0.999 ** (it + 1))
            lr = cfg.inner_lr * 0.5 * (1.0 + np.cos(np.pi * it / cfg.max_iterations))
            w -= lr * mh / (np.sqrt(vh) + 1e-8)

            if cfg.abort_early and it % max(cfg.max_iterations // 10, 1) == 0:
                total = loss.sum()
                if total > prev * 0.9999:
                    break
                prev = total
        # binary search on c, per example; early transient crossings (the
        # first Adam steps overshoot) do not count as success for this c
        found = last_ok >= (it + 1) // 2
        upper = np.where(found, np.minimum(upper, c), upper)
        lower = np.where(found, lower, np.maximum(lower, c))
        bounded = upper < cfg.c_max
        c = np.where(bounded, (lower + upper) / 2.0, np.minimum(c * 10.0, cfg.c_max))

    found_any = np.isfinite(best_l2)
    if found_any.any() and (not arch.stochastic or mm):
        best_x[found_any] = _shrink_to_boundary(params, arch, x[found_any], best_x[found_any],
                                                labels[found_any], cfg)
    x_adv = np.where(found_any[:, None], best_x, fallback_x)
    final, _ = forward_logpbar(params, arch, x_adv,
                               _eps(arch, rng.substream("verify"), S, n, mm), mm)
    pred = final.argmax(axis=1)
    success = _succeeds(final, labels, cfg.targeted, cfg.kappa)
    out = []
    for i in range(n):
        l0, l2, linf = perturb_norms(x[i], x_adv[i], cfg.l0_threshold)
        out.append(AttackResult(x_adv[i], bool(success[i]), int(pred[i]), int(y_true[i]),
                                int(labels[i]) if cfg.targeted else None, l0, l2, linf))
    return out


def _shrink_to_boundary(params, arch: Architecture, x, x_adv, labels, cfg: AttackConfig, steps: int = 40):
    """Bisect the scale of ``delta = x_adv - x`` down to the smallest value
    that still succeeds. Only used for deterministic predictions, where the
    success predicate is a fixed function of the input."""
    delta = x_adv - x
    lo = np.zeros(x.shape[0])
    hi = np.ones(x.shape[0])
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        logpbar, _ = forward_logpbar(params, arch, x + mid[:, None] * delta, None, True)
        ok = _succeeds(logpbar, labels, cfg.targeted, cfg.kappa)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return x + hi[:, None] * delta


def run_attack(params, arch: Architecture, x, y, cfg: AttackConfig, rng: Rng, targets=None) -> list[AttackResult]:
    if len(y) == 0:
        return []
    if cfg.kind == "fgs":
        return fgs(params, arch, x, y, cfg.epsilon, rng, cfg.eval_samples, cfg.mean_mode, cfg.l0_threshold)
    return l2opt(params, arch, x, y, cfg, rng, targets)


def random_targets(labels, n_classes: int, rng: Rng) -> np.ndarray:
    """A uniformly random label different from each source label."""
    labels = np.asarray(labels)
    shift = rng.integers(1, n_classes, size=labels.size)
    return (labels + shift) % n_classes


def summarize(results: list[AttackResult], clean_correct=None) -> dict:
    """Accuracy, success rate and mean norms over all attempts and over
    successful attacks only."""
    n = len(results)
    keys = ("l0", "l2", "linf")
    out = {"n": n}
    if n == 0:
        out.update({"clean_accuracy": 0.0, "adv_accuracy": 0.0, "success_rate": 0.0})
        for k in keys:
            out[f"mean_{k}"] = 0.0
            out[f"mean_{k}_success"] = 0.0
        return out
    succ = np.array([r.success for r in results])
    out["clean_accuracy"] = float(np.mean(clean_correct)) if clean_correct is not None else float("nan")
    out["adv_accuracy"] = float(np.mean([r.pred == r.true_label for r in results]))
    out["success_rate"] = float(succ.mean())
    for k in keys:
        vals = np.array([getattr(r, k) for r in results], dtype=DTYPE)
        out[f"mean_{k}"] = float(vals.mean())
        out[f"mean_{k}_success"] = float(vals[succ].mean()) if succ.any() else float("nan")
    return out


def relative_norms(summary: dict, baseline: dict) -> dict:
    """Successful-attack norms divided by the baseline model's."""
    return {f"rel_{k}": summary[f"mean_{k}_success"] / baseline[f"mean_{k}_success"]
            for k in ("l0", "l2", "linf")}


def robustness_sweep(models: dict, data, cfg: AttackConfig, rng: Rng, baseline: str | None = None) -> list[dict]:
    """Attack the same examples under every model in ``models``
    (name -> ``(params, arch)``); one summary row per model.

    Targeted runs without a fixed ``target_label`` draw one random target per
    example, shared by all models.
    """
    x, y = data.inputs, data.labels
    targets = None
    if cfg.targeted and cfg.target_label is None:
        targets = random_targets(y, data.n_classes, rng.substream("targets"))
    rows = []
    for name, (params, arch) in models.items():
        clean = predict(params, arch, x, rng.substream("clean"), cfg.eval_samples, cfg.mean_mode) == y
        res = run_attack(params, arch, x, y, cfg, rng.substream("attack"), targets)
        row = {"model": name, **summarize(res, clean)}
        rows.append(row)
    if baseline is not None:
        base = next(r for r in rows if r["model"] == baseline)
        for r in rows:
            r.update(relative_norms(r, base))
    return rows


def write_jsonl(path, results: list[AttackResult], indices=None):
    indices = range(len(results)) if indices is None else indices
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, r in zip(indices, results):
            fh.write(json.dumps(r.record(i), sort_keys=True) + "\n")


def dump_arrays(prefix, x, results: list[AttackResult]):
    """Raw little-endian float64 dumps: ``{prefix}.orig.f64`` and ``{prefix}.adv.f64``."""
    np.asarray(x, dtype="<f8").tofile(f"{prefix}.orig.f64")
    adv = np.stack([r.x_adv for r in results]) if results else np.zeros((0,))
    np.asarray(adv, dtype="<f8").tofile(f"{prefix}.adv.f64")


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)
