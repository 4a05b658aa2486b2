import json

import numpy as np
import pytest

from deepvib.cli import load_config, main, read_schema_csv
from deepvib.numcore import Rng
from deepvib.nn import ConfigError
from deepvib.train import MetricsRecord


SYNTH = {"synth": {"n_classes": 3, "per_class": 60, "dim": 4, "separation": 6.0, "test_per_class": 20}}
SMALL_TRAIN = {"lr0": 1e-2, "epochs": 5, "batch_size": 30, "ema_decay": 0.9}


def write_config(dirpath, name="config.json", **fields):
    cfg = {"dataset": SYNTH, "model": {"hidden": [16], "K": 2}, "train": SMALL_TRAIN, "vib": {"beta": 1e-3}}
    cfg.update(fields)
    path = dirpath / name
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    cfg = write_config(d)
    assert run("train", "--config", cfg, "--out", d / "out") == 0
    return d


def test_train_writes_one_row_per_epoch_and_checkpoint(trained):
    schema, rows = read_schema_csv(trained / "out" / "metrics.csv")
    assert schema == "deepvib.metrics/1"
    assert len(rows) == 5
    assert list(rows[0]) == MetricsRecord.columns()
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3, 4]
    assert (trained / "out" / "checkpoint.npz").is_file()
    assert (trained / "out" / "metrics.csv").read_bytes().startswith(b"# schema: deepvib.metrics/1\n")


def test_train_twice_is_byte_identical(trained, tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (trained / "out" / "metrics.csv").read_bytes()


def test_different_seed_changes_metrics(trained, tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--out", tmp_path / "s7", "--seed", 7) == 0
    assert (tmp_path / "s7" / "metrics.csv").read_bytes() != (trained / "out" / "metrics.csv").read_bytes()


def test_missing_dataset_file_fails_before_training(tmp_path, capsys):
    cfg = write_config(tmp_path, dataset={"csv": {"train": "nope.csv"}})
    assert run("train", "--config", cfg, "--out", tmp_path / "out") == 2
    assert "nope.csv" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("dataset", [{}, {"synth": {}, "csv": {"train": "a.csv"}}, {"mnist": {}}])
def test_dataset_needs_exactly_one_source(tmp_path, dataset):
    cfg = write_config(tmp_path, dataset=dataset)
    with pytest.raises(ConfigError):
        load_config(cfg)


@pytest.mark.parametrize("objective,field", [("dropout", "dropout_rate"), ("confidence_penalty", "cp_beta"),
                                             ("label_smoothing", "ls_eps")])
def test_objective_specific_field_required(tmp_path, objective, field):
    cfg = write_config(tmp_path, objective=objective)
    with pytest.raises(ConfigError, match=field):
        load_config(cfg)


def test_bad_config_exit_code_and_message(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert run("train", "--config", path) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_env_overrides_nested_and_top_level(tmp_path):
    cfg = write_config(tmp_path)
    env = {"APP_VIB__BETA": "0.5", "APP_TRAIN__EPOCHS": "2", "APP_OBJECTIVE": "deterministic", "HOME": "/x"}
    c = load_config(cfg, environ=env)
    assert c.vib["beta"] == 0.5 and c.train["epochs"] == 2 and c.objective == "deterministic"
    assert load_config(cfg, seed=9, environ=env).seed == 9


def test_seed_only_at_top_level(tmp_path):
    cfg = write_config(tmp_path, train=dict(SMALL_TRAIN, seed=3))
    with pytest.raises(ConfigError, match="top level"):
        load_config(cfg)


def test_seed_flag_rejects_values_outside_u64(tmp_path):
    cfg = write_config(tmp_path)
    with pytest.raises(SystemExit):
        run("train", "--config", cfg, "--seed", 2 ** 64)


def test_eval_rows_per_split(trained):
    cfg = write_config(trained, "eval.json", checkpoint="out/checkpoint.npz")
    assert run("eval", "--config", cfg, "--out", trained / "eval") == 0
    schema, rows = read_schema_csv(trained / "eval" / "eval.csv")
    assert schema == "deepvib.eval/1"
    assert [r["split"] for r in rows] == ["train", "test"]
    for r in rows:
        assert 0 <= float(r["err_mc"]) <= 1 and float(r["mi_zx_bits"]) >= 0


def test_ibcurve_two_betas_four_rows(tmp_path):
    cfg = write_config(tmp_path, betas=[0, 1e-3], train=dict(SMALL_TRAIN, epochs=2))
    assert run("ibcurve", "--config", cfg, "--out", tmp_path / "ib") == 0
    schema, rows = read_schema_csv(tmp_path / "ib" / "ibcurve.csv")
    assert schema == "deepvib.ibcurve/1"
    assert [(float(r["beta"]), r["split"]) for r in rows] == [(0.0, "train"), (0.0, "test"),
                                                              (1e-3, "train"), (1e-3, "test")]


def test_ibcurve_needs_two_betas(tmp_path):
    cfg = write_config(tmp_path, betas=[1e-3])
    assert run("ibcurve", "--config", cfg, "--out", tmp_path / "ib") == 2


def test_attack_zero_examples(trained):
    cfg = write_config(trained, "a0.json", checkpoint="out/checkpoint.npz", attack={"kind": "fgs", "n": 0})
    assert run("attack", "--config", cfg, "--out", trained / "a0") == 0
    assert (trained / "a0" / "attack.jsonl").read_text() == ""
    summary = json.loads((trained / "a0" / "summary.json").read_text())
    assert summary["n"] == 0 and summary["success_rate"] == 0.0 and summary["mean_l2"] == 0.0


def test_fgs_zero_epsilon_success_equals_clean_error(tmp_path):
    # a barely trained deterministic model so that some clean errors exist
    d = tmp_path
    cfg = write_config(d, objective="deterministic", train=dict(SMALL_TRAIN, epochs=1, lr0=1e-4))
    assert run("train", "--config", cfg, "--out", d / "m") == 0
    acfg = write_config(d, "a.json", objective="deterministic", checkpoint="m/checkpoint.npz",
                        attack={"kind": "fgs", "epsilon": 0.0, "mean_mode": True})
    assert run("attack", "--config", acfg, "--out", d / "a") == 0
    s = json.loads((d / "a" / "summary.json").read_text())
    assert s["n"] == 60
    assert 0 < s["success_rate"] < 1
    assert s["success_rate"] == pytest.approx(1 - s["clean_accuracy"], abs=1e-12)


def test_attack_with_baseline_reports_relative_norms(trained):
    cfg = write_config(trained, "ab.json", checkpoint="out/checkpoint.npz",
                       attack={"kind": "l2opt", "n": 3, "max_iterations": 50, "c_search_steps": 3,
                               "eval_samples": 4, "baseline_checkpoint": "out/checkpoint.npz"})
    assert run("attack", "--config", cfg, "--out", trained / "ab") == 0
    lines = (trained / "ab" / "attack.jsonl").read_text().splitlines()
    assert len(lines) == 3 and all(json.loads(line)["true_label"] in (0, 1, 2) for line in lines)
    s = json.loads((trained / "ab" / "summary.json").read_text())
    assert "baseline" in s and set(s["relative"]) == {"rel_l0", "rel_l2", "rel_linf"}


def test_attack_rejects_incompatible_checkpoint(trained, capsys):
    other = {"synth": {"n_classes": 3, "per_class": 10, "dim": 5}}
    cfg = write_config(trained, "bad.json", dataset=other, checkpoint="out/checkpoint.npz", attack={"n": 1})
    assert run("attack", "--config", cfg, "--out", trained / "bad") == 2
    assert "D=4" in capsys.readouterr().err


def test_attack_jsonl_is_deterministic(trained):
    cfg = write_config(trained, "ad.json", checkpoint="out/checkpoint.npz",
                       attack={"kind": "l2opt", "n": 2, "max_iterations": 30, "c_search_steps": 2, "eval_samples": 4})
    outs = []
    for k in range(2):
        assert run("attack", "--config", cfg, "--out", trained / f"ad{k}") == 0
        outs.append(((trained / f"ad{k}" / "attack.jsonl").read_bytes(),
                     (trained / f"ad{k}" / "summary.json").read_bytes()))
    assert outs[0] == outs[1]


def test_embed2d_rows_and_entropy_bounds(trained):
    cfg = write_config(trained, "e.json", checkpoint="out/checkpoint.npz", embed={"n": 3, "grid": 9})
    assert run("embed2d", "--config", cfg, "--out", trained / "emb") == 0
    schema, rows = read_schema_csv(trained / "emb" / "embeddings.csv")
    assert schema == "deepvib.embeddings/1" and len(rows) == 3
    assert list(rows[0]) == ["index", "label", "mu1", "mu2", "L11", "L21", "L22"]
    assert all(float(r["L11"]) > 0 and float(r["L22"]) > 0 for r in rows)
    schema, grid = read_schema_csv(trained / "emb" / "entropy_grid.csv")
    assert schema == "deepvib.entropy_grid/1" and len(grid) == 81
    h = np.array([float(r["entropy_nats"]) for r in grid])
    assert h.min() >= 0 and h.max() <= np.log(3)


def test_embed2d_needs_k2(tmp_path):
    cfg = write_config(tmp_path, model={"hidden": [8], "K": 3}, train=dict(SMALL_TRAIN, epochs=1))
    assert run("train", "--config", cfg, "--out", tmp_path / "m") == 0
    ecfg = write_config(tmp_path, "e.json", model={"hidden": [8], "K": 3}, checkpoint="m/checkpoint.npz")
    assert run("embed2d", "--config", ecfg, "--out", tmp_path / "e") == 2


def test_embed2d_large_beta_codes_overlap(tmp_path):
    """Compression pulls the class means together relative to the code spread."""
    ratios = {}
    for beta in (1e-4, 1.0):
        name = f"b{beta:g}"
        cfg = write_config(tmp_path, f"{name}.json", vib={"beta": beta}, model={"hidden": [16], "K": 2},
                           train=dict(SMALL_TRAIN, epochs=15))
        assert run("train", "--config", cfg, "--out", tmp_path / name) == 0
        ecfg = write_config(tmp_path, f"{name}e.json", checkpoint=f"{name}/checkpoint.npz", embed={"grid": 3})
        assert run("embed2d", "--config", ecfg, "--out", tmp_path / f"{name}e") == 0
        _, rows = read_schema_csv(tmp_path / f"{name}e" / "embeddings.csv")
        mu = np.array([[float(r["mu1"]), float(r["mu2"])] for r in rows])
        sd = np.array([[float(r["L11"]), float(r["L22"])] for r in rows])
        pair = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
        ratios[beta] = pair[np.triu_indices(len(mu), 1)].mean() / sd.mean()
    assert ratios[1.0] < ratios[1e-4]


def test_gradcheck_passes_and_reports_each_objective(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "g") == 0
    schema, rows = read_schema_csv(tmp_path / "g" / "gradcheck.csv")
    assert schema == "deepvib.gradcheck/1"
    names = [r["objective"] for r in rows]
    for expected in ("vib(beta=0)", "vib(beta=0.001)", "vib(beta=1)", "deterministic", "dropout(rate=0.4)",
                     "confidence_penalty(beta=0.5)", "label_smoothing(eps=0.1)", "unsup_vib(beta=0.5)",
                     "unsup_vib(beta=1)"):
        assert expected in names
    assert all(float(r["max_rel_error"]) < 1e-5 and r["passed"] == "1" for r in rows)
    assert "all objectives pass" in capsys.readouterr().out


def test_gradcheck_injected_fault_fails(tmp_path):
    cfg = write_config(tmp_path, gradcheck={"inject_fault": True})
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "g") == 1
    _, rows = read_schema_csv(tmp_path / "g" / "gradcheck.csv")
    assert all(r["passed"] == "0" for r in rows)


def _whitened_features(rng: Rng, n_per_class: int, D: int, C: int):
    """Class blobs pushed through a random linear map and then whitened, the
    way pooled features from a pretrained network are usually prepared."""
    centers = rng.substream("c").normal((C, D)) * 1.5
    y = np.repeat(np.arange(C), n_per_class)
    x = centers[y] + rng.substream("x").normal((len(y), D))
    x = x @ rng.substream("mix").normal((D, D))
    x -= x.mean(axis=0)
    evals, evecs = np.linalg.eigh(np.cov(x, rowvar=False))
    x = x @ evecs / np.sqrt(evals)
    perm = rng.substream("perm").permutation(len(y))
    return x[perm], y[perm]


def test_feature_csv_ingestion_on_whitened_features(tmp_path):
    rng = Rng(5, ("features",))
    D, C = 16, 4
    x, y = _whitened_features(rng, 150, D, C)
    np.testing.assert_allclose(np.cov(x, rowvar=False), np.eye(D), atol=1e-8)
    split = 480
    for name, sl in (("train.csv", slice(0, split)), ("test.csv", slice(split, None))):
        with open(tmp_path / name, "w") as fh:
            fh.write(",".join([f"f{i}" for i in range(D)] + ["label"]) + "\n")
            for xi, yi in zip(x[sl], y[sl]):
                fh.write(",".join(repr(float(v)) for v in xi) + f",{yi}\n")
    cfg = write_config(tmp_path, dataset={"csv": {"train": "train.csv", "test": "test.csv", "dim": D, "n_classes": C}},
                       model={"hidden": [32], "K": 8}, train=dict(SMALL_TRAIN, epochs=20))
    assert run("train", "--config", cfg, "--out", tmp_path / "out") == 0
    _, rows = read_schema_csv(tmp_path / "out" / "metrics.csv")
    assert float(rows[-1]["test_err_mc"]) < 0.1


def test_feature_csv_dimension_mismatch(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("0.1,0.2,1\n0.3,0.4,0\n")
    cfg = write_config(tmp_path, dataset={"csv": {"train": "t.csv", "dim": 3}})
    assert run("train", "--config", cfg, "--out", tmp_path / "out") == 2
    assert "dimension" in capsys.readouterr().err
