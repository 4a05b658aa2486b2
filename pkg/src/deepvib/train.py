"""Adam with staircase learning-rate decay, parameter averaging, the epoch loop
and evaluation in one-shot, Monte Carlo and mean modes."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import encoder as enc
from .data import Dataset
from .model import (
    Architecture,
    code_from_raw,
    copy_params,
    decoder_logits,
    init_params,
    mean_from_raw,
    trunk_forward,
)
from .nn import ConfigError, dropout_mask, log_softmax
from .numcore import DTYPE, NumericError, Rng
from .objective import (
    LN2,
    VibConfig,
    confidence_penalty_loss,
    deterministic_loss,
    label_entropy_bits,
    label_smoothing_loss,
    unsup_vib_loss,
    vib_loss,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("vib", "deterministic", "dropout", "confidence_penalty", "label_smoothing", "unsup_vib")
CHECKPOINT_FORMAT = "deepvib-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 0.97
    decay_every_epochs: int = 2
    epochs: int = 200
    batch_size: int = 100
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("learning rate and decay factor must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and 0 <= self.ema_decay < 1):
            raise ConfigError("moment and averaging decays must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every_epochs < 1:
            raise ConfigError("batch_size, epochs and decay_every_epochs out of range")


@dataclass(frozen=True)
class Objective:
    kind: str = "vib"
    vib: VibConfig = field(default_factory=VibConfig)
    dropout_rate: float = 0.0
    cp_beta: float = 0.0
    ls_eps: float = 0.0

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVES}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout rate must be in [0, 1)")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_err_1shot: float
    test_err_1shot: float
    train_err_mc: float
    test_err_mc: float
    mean_mode_err: float
    mi_zx_bits: float
    mi_zy_train_bits: float
    mi_zy_test_bits: float
    xent_nats: float
    kl_nats: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k in params:
        g = grads.get(k)
        if g is None:
            g = 0.0
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    for k in shadow:
        shadow[k] *= decay
        shadow[k] += (1.0 - decay) * params[k]
    return shadow


# --------------------------------------------------------------- evaluation

def _raw_batches(params, arch, x, batch_size=1000):
    for i in range(0, x.shape[0], batch_size):
        raw, _ = trunk_forward(params, arch, x[i:i + batch_size])
        yield i, raw


def class_probs(params, arch: Architecture, x, mode: str = "mc", n_samples: int = 12,
                rng: Rng | None = None, batch_size: int = 1000) -> np.ndarray:
    """Predictive distribution ``(1/S) sum_s q(y|z_s)``.

    ``mode`` is ``one_shot`` (S=1), ``mc`` (S=n_samples) or ``mean`` (z = mu).
    """
    if mode not in ("one_shot", "mc", "mean"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    x = np.asarray(x, dtype=DTYPE)
    S = 1 if mode == "one_shot" else n_samples
    out = []
    for b, (i, raw) in enumerate(_raw_batches(params, arch, x, batch_size)):
        if not arch.stochastic or mode == "mean":
            z = mean_from_raw(arch, raw)[None]
        else:
            eps = rng.substream(b).normal((S, raw.shape[0], arch.K))
            z = enc.sample(code_from_raw(arch, raw), eps)
        out.append(np.exp(log_softmax(decoder_logits(params, z))).mean(axis=0))
    return np.concatenate(out, axis=0)


def evaluate(params, arch: Architecture, data: Dataset, mode: str = "mc", n_samples: int = 12,
             rng: Rng | None = None) -> float:
    """Misclassification rate of ``argmax`` of :func:`class_probs`."""
    rng = rng if rng is not None else Rng(0, ("evaluate",))
    p = class_probs(params, arch, data.inputs, mode, n_samples, rng)
    return float(np.mean(p.argmax(axis=1) != data.labels))


def split_summary(params, arch: Architecture, data: Dataset, n_samples: int, rng: Rng,
                  batch_size: int = 1000) -> dict:
    """One trunk pass per batch, reused for every evaluation mode and the
    information estimates."""
    x, y = data.inputs, data.labels
    n = x.shape[0]
    wrong1 = wrongmc = wrongmean = 0
    xent = kl = 0.0
    for b, (i, raw) in enumerate(_raw_batches(params, arch, x, batch_size)):
        yb = y[i:i + raw.shape[0]]
        rows = np.arange(raw.shape[0])
        mu = mean_from_raw(arch, raw)
        logp_mean = log_softmax(decoder_logits(params, mu))
        wrongmean += np.sum(logp_mean.argmax(1) != yb)
        if arch.stochastic:
            code = code_from_raw(arch, raw)
            eps1 = rng.substream("one_shot", b).normal((1, raw.shape[0], arch.K))
            epsS = rng.substream("mc", b).normal((n_samples, raw.shape[0], arch.K))
            lp1 = log_softmax(decoder_logits(params, enc.sample(code, eps1)))
            lpS = log_softmax(decoder_logits(params, enc.sample(code, epsS)))
            wrong1 += np.sum(lp1[0].argmax(1) != yb)
            wrongmc += np.sum(np.exp(lpS).mean(0).argmax(1) != yb)
            xent += -lpS[:, rows, yb].mean(0).sum()
            kl += enc.kl_to_prior(code).sum()
        else:
            w = np.sum(logp_mean.argmax(1) != yb)
            wrong1 += w
            wrongmc += w
            xent += -logp_mean[rows, yb].sum()
    h = label_entropy_bits(y, data.n_classes)
    return {
        "err_1shot": wrong1 / n,
        "err_mc": wrongmc / n,
        "err_mean": wrongmean / n,
        "mi_zx_bits": kl / n / LN2 if arch.stochastic else float("nan"),
        "mi_zy_bits": h - xent / n / LN2,
    }


# ------------------------------------------------------------------ training

def batch_loss(objective: Objective, arch: Architecture, params, x, y, rng: Rng):
    if objective.kind == "vib":
        return vib_loss(x, y, params, arch, objective.vib, rng=rng.substream("eps"))
    if objective.kind == "unsup_vib":
        return unsup_vib_loss(x, params, arch, objective.vib.beta, rng=rng.substream("eps"),
                              n_samples=objective.vib.train_samples)
    masks = None
    if objective.dropout_rate > 0:
        drng = rng.substream("dropout")
        masks = [dropout_mask(drng.substream(i), (x.shape[0], h), objective.dropout_rate)
                 for i, h in enumerate(arch.hidden)]
    if objective.kind == "confidence_penalty":
        return confidence_penalty_loss(x, y, params, arch, objective.cp_beta, masks)
    if objective.kind == "label_smoothing":
        return label_smoothing_loss(x, y, params, arch, objective.ls_eps, masks)
    return deterministic_loss(x, y, params, arch, masks)


def check_compatible(arch: Architecture, objective: Objective):
    if objective.kind in ("vib", "unsup_vib") and not arch.stochastic:
        raise ConfigError(f"objective {objective.kind!r} needs a stochastic (diag/fullcov2d) encoder")
    if objective.kind == "unsup_vib" and arch.task != "reconstruct":
        raise ConfigError("unsup_vib needs task='reconstruct'")
    if objective.kind != "unsup_vib" and arch.task != "classify":
        raise ConfigError(f"objective {objective.kind!r} needs task='classify'")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: "FitResult"):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class FitResult:
    arch: Architecture
    params: dict
    ema: dict
    adam: AdamState
    history: list = field(default_factory=list)
    epoch: int = 0


def fit(arch: Architecture, train: Dataset, test: Dataset | None, objective: Objective,
        cfg: TrainConfig, on_epoch=None, eval_samples: int | None = None) -> FitResult:
    """Minibatch Adam on ``objective``; evaluation always uses the averaged
    parameters. ``on_epoch(record)`` is called after each epoch's metrics."""
    check_compatible(arch, objective)
    root = Rng(cfg.seed)
    params = init_params(arch, root.substream("init"))
    ema = copy_params(params)
    adam = AdamState.zeros_like(params)
    result = FitResult(arch, params, ema, adam)
    S = eval_samples or objective.vib.eval_samples
    n = train.inputs.shape[0]
    supervised = arch.task == "classify"
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = root.substream("shuffle", epoch).permutation(n)
        xent_sum = kl_sum = 0.0
        n_batches = 0
        good = (copy_params(params), copy_params(ema))
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                out = batch_loss(objective, arch, params, train.inputs[idx], train.labels[idx],
                                 root.substream("step", epoch, b))
                adam_step(params, out.grads, adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            except NumericError as err:
                last = FitResult(arch, good[0], good[1], adam, result.history, epoch)
                raise TrainingDiverged(f"diverged at epoch {epoch}, batch {b}: {err}", last) from err
            ema_update(ema, params, cfg.ema_decay)
            xent_sum += out.xent_term
            kl_sum += out.kl_term
            n_batches += 1
        result.epoch = epoch + 1
        if supervised:
            ev = root.substream("eval", epoch)
            tr = split_summary(ema, arch, train, S, ev.substream("train"))
            te = split_summary(ema, arch, test, S, ev.substream("test")) if test is not None else None
            rec = MetricsRecord(
                epoch=epoch, lr=lr,
                train_err_1shot=tr["err_1shot"], test_err_1shot=te["err_1shot"] if te else float("nan"),
                train_err_mc=tr["err_mc"], test_err_mc=te["err_mc"] if te else float("nan"),
                mean_mode_err=te["err_mean"] if te else tr["err_mean"],
                mi_zx_bits=tr["mi_zx_bits"], mi_zy_train_bits=tr["mi_zy_bits"],
                mi_zy_test_bits=te["mi_zy_bits"] if te else float("nan"),
                xent_nats=xent_sum / max(n_batches, 1), kl_nats=kl_sum / max(n_batches, 1),
            )
        else:
            from .objective import kl_per_example
            nan = float("nan")
            mi = kl_per_example(train.inputs, ema, arch).mean() / LN2
            rec = MetricsRecord(epoch, lr, nan, nan, nan, nan, nan, float(mi), nan, nan,
                                xent_sum / max(n_batches, 1), kl_sum / max(n_batches, 1))
        result.history.append(rec)
        log.debug("epoch %d: %s", epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    return result


def select_dropout_rate(arch: Architecture, train: Dataset, cfg: TrainConfig,
                        rates=(0.2, 0.4, 0.5), val_size: int = 5000) -> tuple[float, dict]:
    """Pick the dropout rate with the lowest validation error on a held-out
    slice of ``train``. Returns ``(best_rate, {rate: val_error})``."""
    perm = Rng(cfg.seed).substream("val_split").permutation(train.inputs.shape[0])
    val_size = min(val_size, train.inputs.shape[0] // 2)
    tr, va = train.subset(perm[val_size:]), train.subset(perm[:val_size])
    errors = {}
    for rate in rates:
        res = fit(arch, tr, None, Objective("dropout", dropout_rate=rate), cfg)
        errors[rate] = evaluate(res.ema, arch, va, "mean")
    best = min(rates, key=lambda r: (errors[r], r))
    return best, errors


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, result: FitResult, extra: dict | None = None):
    """Self-describing ``.npz``: a JSON header plus every parameter, the
    averaged copy and the optimizer moments."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "arch": result.arch.to_dict(),
        "epoch": result.epoch,
        "adam_t": result.adam.t,
        "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for prefix, d in (("params/", result.params), ("ema/", result.ema),
                      ("adam_m/", result.adam.m), ("adam_v/", result.adam.v)):
        for k, v in d.items():
            arrays[prefix + k] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[FitResult, dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r} "
                             f"v{meta.get('format_version')}")
        groups = {"params/": {}, "ema/": {}, "adam_m/": {}, "adam_v/": {}}
        for key in z.files:
            for prefix, d in groups.items():
                if key.startswith(prefix):
                    d[key[len(prefix):]] = np.array(z[key])
    arch = Architecture.from_dict(meta["arch"])
    adam = AdamState(groups["adam_m/"], groups["adam_v/"], meta["adam_t"])
    return FitResult(arch, groups["params/"], groups["ema/"], adam, [], meta["epoch"]), meta["extra"]


def config_dict(obj) -> dict:
    return asdict(obj)
