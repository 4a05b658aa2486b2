"""Experiment runner: ``deepvib <command> --config <path> [--out <dir>] [--seed <n>]``.

Commands are ``train``, ``eval``, ``attack``, ``ibcurve``, ``embed2d`` and
``gradcheck``. The config is a JSON object; any field can be overridden from
the environment with ``APP_<FIELD>`` (nested fields joined by ``__``, values
parsed as JSON when possible), e.g. ``APP_VIB__BETA=0.01``.

Every CSV written here starts with a ``# schema: <name>/<version>`` line,
followed by a header row. Outputs depend only on the config, the input files
and the seed.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import encoder as enc
from .attack import AttackConfig, predict, relative_norms, run_attack, summarize, write_jsonl
from .data import (
    Dataset,
    FormatError,
    load_feature_csv,
    load_idx,
    mnist_desk_split,
    scale_to_pm1,
    synth_blobs,
)
from .gradcheck import check_all_objectives
from .model import Architecture, code_from_raw, trunk_forward
from .nn import ConfigError, softmax
from .numcore import NumericError, Rng
from .objective import VibConfig
from .train import (
    MetricsRecord,
    Objective,
    TrainConfig,
    TrainingDiverged,
    fit,
    load_checkpoint,
    save_checkpoint,
    split_summary,
)

log = logging.getLogger("deepvib")

COMMANDS = ("train", "eval", "attack", "ibcurve", "embed2d", "gradcheck")
ENV_PREFIX = "APP_"
DATASET_SOURCES = ("idx", "csv", "synth", "bundled_mnist")

SCHEMAS = {
    "metrics": "deepvib.metrics/1",
    "eval": "deepvib.eval/1",
    "ibcurve": "deepvib.ibcurve/1",
    "embeddings": "deepvib.embeddings/1",
    "entropy_grid": "deepvib.entropy_grid/1",
    "gradcheck": "deepvib.gradcheck/1",
}


# ------------------------------------------------------------------ config

@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict = field(default_factory=dict)
    vib: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    objective: str = "vib"
    dropout_rate: float | None = None
    cp_beta: float | None = None
    ls_eps: float | None = None
    output_dir: str = "out"
    seed: int = 0
    checkpoint: str | None = None
    attack: dict = field(default_factory=dict)
    betas: list = field(default_factory=list)
    embed: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' object with exactly one of "
                              f"{', '.join(DATASET_SOURCES)}")
        cfg = cls(**d, base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self):
        sources = [k for k in self.dataset if k in DATASET_SOURCES]
        extra = sorted(set(self.dataset) - set(DATASET_SOURCES))
        if len(sources) != 1 or extra:
            raise ConfigError(f"dataset must name exactly one of {', '.join(DATASET_SOURCES)}; "
                              f"got {sorted(self.dataset)}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        needs = {"dropout": "dropout_rate", "confidence_penalty": "cp_beta", "label_smoothing": "ls_eps"}
        if self.objective in needs and getattr(self, needs[self.objective]) is None:
            raise ConfigError(f"objective {self.objective!r} needs '{needs[self.objective]}'")
        if "seed" in self.train:
            raise ConfigError("set the seed at top level ('seed'), not inside 'train'")
        self.objective_spec()
        self.train_config()

    def vib_config(self) -> VibConfig:
        return VibConfig(**self.vib)

    def objective_spec(self) -> Objective:
        return Objective(self.objective, self.vib_config(), self.dropout_rate or 0.0,
                         self.cp_beta or 0.0, self.ls_eps or 0.0)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed)

    def architecture(self, data: Dataset) -> Architecture:
        m = dict(self.model)
        if self.objective in ("deterministic", "dropout", "confidence_penalty", "label_smoothing"):
            m.setdefault("mode", "deterministic")
        if self.objective == "unsup_vib":
            m.setdefault("task", "reconstruct")
        m.setdefault("hidden", (256, 256))
        m.setdefault("K", 32)
        m["input_dim"] = data.dim
        m["n_classes"] = data.n_classes
        try:
            return Architecture.from_dict(m)
        except TypeError as err:
            raise ConfigError(f"bad model config: {err}") from err

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self) if f.name != "base_dir"}


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env_overrides(d: dict, environ=None) -> dict:
    """``APP_A__B=v`` sets ``d["a"]["b"] = v``. Field names are lower-cased."""
    environ = os.environ if environ is None else environ
    d = copy.deepcopy(d)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        if not all(path):
            raise ConfigError(f"malformed override variable {key}")
        node = d
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key}: '{part}' is not an object in the config")
            node = child
        node[path[-1]] = _parse_env_value(environ[key])
    return d


def load_config(path, seed: int | None = None, out: str | None = None, environ=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    raw = apply_env_overrides(raw, environ)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


# ----------------------------------------------------------------- datasets

def _require_file(cfg: ExperimentConfig, p, what: str) -> Path:
    if p is None:
        raise ConfigError(f"dataset: missing '{what}' path")
    full = cfg.path(p)
    if not full.is_file():
        raise ConfigError(f"dataset: {what} file not found: {full}")
    return full


def check_dataset_inputs(cfg: ExperimentConfig):
    """Fail fast on missing input files, before anything expensive runs."""
    (kind, spec), = cfg.dataset.items()
    if kind == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if k in spec or k.startswith("train"):
                _require_file(cfg, spec.get(k), k)
    elif kind == "csv":
        _require_file(cfg, spec.get("train"), "train")
        if spec.get("test") is not None:
            _require_file(cfg, spec["test"], "test")
    elif kind == "bundled_mnist":
        from importlib.util import find_spec
        if find_spec("mlxtend") is None:
            raise ConfigError("dataset.bundled_mnist needs the 'mlxtend' package installed")
    if cfg.checkpoint is not None:
        _require_file(cfg, cfg.checkpoint, "checkpoint")


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    (kind, spec), = cfg.dataset.items()
    if kind == "idx":
        n_classes = spec.get("n_classes", 10)
        tr = scale_to_pm1(load_idx(cfg.path(spec["train_images"]), cfg.path(spec["train_labels"]), n_classes))
        te = None
        if spec.get("test_images"):
            te = scale_to_pm1(load_idx(cfg.path(spec["test_images"]), cfg.path(spec["test_labels"]),
                                       n_classes, "test"))
        if spec.get("n_train"):
            tr = tr.subset(np.arange(min(int(spec["n_train"]), len(tr))))
        return tr, te
    if kind == "csv":
        dim, C = spec.get("dim"), spec.get("n_classes")
        tr = load_feature_csv(cfg.path(spec["train"]), dim, C, "train")
        te = load_feature_csv(cfg.path(spec["test"]), dim, tr.n_classes, "test") if spec.get("test") else None
        return tr, te
    if kind == "synth":
        allowed = {"n_classes", "per_class", "dim", "separation", "test_per_class", "split_seed"}
        bad = sorted(set(spec) - allowed)
        if bad:
            raise ConfigError(f"dataset.synth: unknown field(s) {', '.join(bad)}")
        C = spec.get("n_classes", 2)
        D = spec.get("dim", 2)
        s = spec.get("separation", 10.0)
        srng = Rng(spec.get("split_seed", 0), ("synth",))
        tr = synth_blobs(srng.substream("train"), C, spec.get("per_class", 200), D, s, "train")
        te = synth_blobs(srng.substream("test"), C, spec.get("test_per_class", 100), D, s, "test")
        return tr, te
    return mnist_desk_split(spec.get("split_seed", 0), spec.get("test_per_class", 100))


# ------------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvWriter:
    """Append-as-you-go CSV with a schema line and a header."""

    def __init__(self, path, schema: str, columns: list[str]):
        self.columns = list(columns)
        self.fh = open(path, "w", encoding="utf-8", newline="\n")
        self.fh.write(f"# schema: {schema}\n")
        self.fh.write(",".join(self.columns) + "\n")

    def row(self, values: dict):
        self.fh.write(",".join(_fmt(values[c]) for c in self.columns) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_schema_csv(path) -> tuple[str, list[dict]]:
    """Inverse of :class:`CsvWriter` for tests and downstream tooling."""
    import csv
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith("# schema: "):
            raise FormatError(f"{path}: missing schema line")
        return first[len("# schema: "):], list(csv.DictReader(fh))


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonable(obj):
    """Non-finite floats become ``null`` so the files stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


# ----------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig) -> int:
    check_dataset_inputs(cfg)
    train, test = load_datasets(cfg)
    arch = cfg.architecture(train)
    objective, tcfg = cfg.objective_spec(), cfg.train_config()
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.to_dict())
    with CsvWriter(out / "metrics.csv", SCHEMAS["metrics"], MetricsRecord.columns()) as w:
        def on_epoch(rec: MetricsRecord):
            w.row(vars(rec))
            log.info("epoch %d  test_err_mc=%.4f  mi_zx=%.2f bits", rec.epoch, rec.test_err_mc, rec.mi_zx_bits)
        try:
            result = fit(arch, train, test, objective, tcfg, on_epoch)
        except TrainingDiverged as err:
            save_checkpoint(out / "checkpoint.last_good.npz", err.last_good, {"config": cfg.to_dict()})
            raise
    save_checkpoint(out / "checkpoint.npz", result, {"config": cfg.to_dict()})
    return 0


def _load_model(cfg: ExperimentConfig, path=None):
    path = cfg.path(path or cfg.checkpoint) if (path or cfg.checkpoint) else None
    if path is None:
        raise ConfigError("this command needs 'checkpoint' in the config")
    try:
        result, extra = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err
    return result, extra


def _check_model_data(arch: Architecture, data: Dataset, path):
    if arch.task != "classify":
        raise ConfigError(f"checkpoint {path} is a reconstruction model; a classifier is needed")
    if arch.input_dim != data.dim or arch.n_classes != data.n_classes:
        raise ConfigError(f"checkpoint {path} expects D={arch.input_dim}, C={arch.n_classes} "
                          f"but the dataset has D={data.dim}, C={data.n_classes}")


def cmd_eval(cfg: ExperimentConfig) -> int:
    check_dataset_inputs(cfg)
    result, _ = _load_model(cfg)
    train, test = load_datasets(cfg)
    _check_model_data(result.arch, train, cfg.checkpoint)
    S = cfg.vib_config().eval_samples
    out = _out_dir(cfg)
    cols = ["split", "err_1shot", "err_mc", "err_mean", "mi_zx_bits", "mi_zy_bits"]
    rng = Rng(cfg.seed).substream("eval")
    with CsvWriter(out / "eval.csv", SCHEMAS["eval"], cols) as w:
        for data in (train, test):
            if data is None:
                continue
            s = split_summary(result.ema, result.arch, data, S, rng.substream(data.split))
            w.row({"split": data.split, **s})
    return 0


def _attack_examples(data: Dataset, acfg: dict) -> np.ndarray:
    idx = np.arange(len(data))
    if acfg.get("source_label") is not None:
        idx = idx[data.labels == int(acfg["source_label"])]
    n = acfg.get("n", len(idx))
    return idx[: int(n)]


def cmd_attack(cfg: ExperimentConfig) -> int:
    check_dataset_inputs(cfg)
    a = dict(cfg.attack)
    extra_keys = {"n", "source_label", "split", "baseline_checkpoint"}
    a_cfg = AttackConfig(**{k: v for k, v in a.items() if k not in extra_keys})
    baseline_path = a.get("baseline_checkpoint")
    if baseline_path is not None:
        _require_file(cfg, baseline_path, "baseline_checkpoint")
    result, _ = _load_model(cfg)
    train, test = load_datasets(cfg)
    data = train if a.get("split", "test") == "train" or test is None else test
    _check_model_data(result.arch, data, cfg.checkpoint)
    idx = _attack_examples(data, a)
    x, y = data.inputs[idx], data.labels[idx]
    rng = Rng(cfg.seed).substream("attack")
    out = _out_dir(cfg)

    def attack(params, arch):
        clean = predict(params, arch, x, rng.substream("clean"), a_cfg.eval_samples, a_cfg.mean_mode) == y \
            if len(y) else np.zeros(0, dtype=bool)
        res = run_attack(params, arch, x, y, a_cfg, rng.substream("run"))
        return res, summarize(res, clean if len(y) else None)

    res, summary = attack(result.ema, result.arch)
    write_jsonl(out / "attack.jsonl", res, idx.tolist())
    summary = {"attack": vars(a_cfg) | {"n": int(len(idx))}, **summary}
    if baseline_path is not None:
        base, _ = _load_model(cfg, baseline_path)
        _check_model_data(base.arch, data, baseline_path)
        _, bsum = attack(base.ema, base.arch)
        summary["baseline"] = bsum
        summary["relative"] = relative_norms(summary, bsum) if len(idx) else {}
    _write_json(out / "summary.json", summary)
    log.info("attack: success rate %.3f over %d examples", summary["success_rate"], len(idx))
    return 0


def cmd_ibcurve(cfg: ExperimentConfig) -> int:
    if len(cfg.betas) < 2:
        raise ConfigError("ibcurve needs 'betas' with at least two values")
    if cfg.objective != "vib":
        raise ConfigError("ibcurve sweeps the vib objective; set objective to 'vib'")
    betas = [float(b) for b in cfg.betas]
    for b in betas:
        VibConfig(b, **{k: v for k, v in cfg.vib.items() if k != "beta"})
    check_dataset_inputs(cfg)
    train, test = load_datasets(cfg)
    arch = cfg.architecture(train)
    tcfg = cfg.train_config()
    S = cfg.vib_config().eval_samples
    out = _out_dir(cfg)
    cols = ["beta", "split", "mi_zx_bits", "mi_zy_bits", "err_mc"]
    with CsvWriter(out / "ibcurve.csv", SCHEMAS["ibcurve"], cols) as w:
        for beta in betas:
            vib = VibConfig(beta, **{k: v for k, v in cfg.vib.items() if k != "beta"})
            res = fit(arch, train, test, Objective("vib", vib), tcfg)
            rng = Rng(cfg.seed).substream("ibcurve", repr(beta))
            for data in (train, test):
                if data is None:
                    continue
                s = split_summary(res.ema, arch, data, S, rng.substream(data.split))
                w.row({"beta": beta, "split": data.split, **s})
            log.info("beta=%g done", beta)
    return 0


def decoder_entropy_grid(params, z1, z2) -> np.ndarray:
    """Entropy (nats) of ``q(y|z)`` on the grid ``z1 x z2``; rows follow ``z1``."""
    Z = np.stack(np.meshgrid(z1, z2, indexing="ij"), axis=-1).reshape(-1, 2)
    logits = Z @ params["dec.W"].T + params["dec.b"]
    p = softmax(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return np.clip(h, 0.0, np.log(p.shape[1]))


def cmd_embed2d(cfg: ExperimentConfig) -> int:
    check_dataset_inputs(cfg)
    result, _ = _load_model(cfg)
    arch = result.arch
    if arch.K != 2 or not arch.stochastic:
        raise ConfigError(f"embed2d needs a stochastic K=2 checkpoint, got K={arch.K} mode={arch.mode}")
    train, test = load_datasets(cfg)
    data = test if test is not None else train
    _check_model_data(arch, data, cfg.checkpoint)
    n = min(int(cfg.embed.get("n", len(data))), len(data))
    raw, _ = trunk_forward(result.ema, arch, data.inputs[:n])
    code = code_from_raw(arch, raw)
    L = code.scale if code.mode == enc.FULLCOV2D else code.scale[..., :, None] * np.eye(2)
    out = _out_dir(cfg)
    cols = ["index", "label", "mu1", "mu2", "L11", "L21", "L22"]
    with CsvWriter(out / "embeddings.csv", SCHEMAS["embeddings"], cols) as w:
        for i in range(n):
            w.row({"index": i, "label": int(data.labels[i]), "mu1": code.mean[i, 0], "mu2": code.mean[i, 1],
                   "L11": L[i, 0, 0], "L21": L[i, 1, 0], "L22": L[i, 1, 1]})
    extent = float(cfg.embed.get("extent", 4.0))
    steps = int(cfg.embed.get("grid", 41))
    axis = np.linspace(-extent, extent, steps)
    H = decoder_entropy_grid(result.ema, axis, axis)
    with CsvWriter(out / "entropy_grid.csv", SCHEMAS["entropy_grid"], ["z1", "z2", "entropy_nats"]) as w:
        for k, (a, b) in enumerate((a, b) for a in axis for b in axis):
            w.row({"z1": a, "z2": b, "entropy_nats": H[k]})
    return 0


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    g = cfg.gradcheck
    tol = float(g.get("tolerance", 1e-5))
    cases = check_all_objectives(seed=cfg.seed, tolerance=tol, inject_fault=bool(g.get("inject_fault", False)))
    out = _out_dir(cfg)
    with CsvWriter(out / "gradcheck.csv", SCHEMAS["gradcheck"],
                   ["objective", "max_rel_error", "tolerance", "passed"]) as w:
        for c in cases:
            w.row({"objective": c.name, "max_rel_error": c.report.max_rel_error, "tolerance": tol,
                   "passed": c.passed})
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:32s} max rel err {c.report.max_rel_error:.3e}")
    ok = all(c.passed for c in cases)
    print("gradcheck:", "all objectives pass" if ok else "FAILED")
    return 0 if ok else 1


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "ibcurve": cmd_ibcurve,
    "embed2d": cmd_embed2d,
    "gradcheck": cmd_gradcheck,
}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepvib", description="Variational information bottleneck experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=_u64, help="root seed (overrides seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return HANDLERS[args.command](cfg)
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDiverged) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 3
