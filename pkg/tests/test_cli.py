import json

import numpy as np
import pandas as pd
import pytest

from gcfn.cli import main
from gcfn.experiment import ExperimentConfig, compare_baseline, file_sha256, verify_manifest
from gcfn.errors import ValidationError

TINY = {"n_samples": 600, "gan_epochs": 2, "pred_epochs": 2, "seeds": [0, 1], "lambda_grid": [0.0, 0.5]}


def write_config(path, **over):
    path.write_text(json.dumps({**TINY, **over}))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sweep")
    cfg = write_config(d / "cfg.json")
    assert main(["sweep", "--config", cfg, "--out", str(d / "run")]) == 0
    return d / "run"


def test_sweep_writes_reports(sweep_dir):
    frame = pd.read_csv(sweep_dir / "reports.csv")
    assert sorted(zip(frame.seed, frame["lambda"])) == [(0, 0.0), (0, 0.5), (1, 0.0), (1, 0.5)]
    summary = pd.read_csv(sweep_dir / "summary.csv")
    assert list(summary.n_runs) == [2, 2]
    manifests = json.loads((sweep_dir / "manifest.json").read_text())
    assert [m["status"] for m in manifests] == ["ok", "ok"]
    assert all(verify_manifest(m) == [] for m in manifests)
    assert (sweep_dir / "seed_0" / "density_lam0p5.csv").exists()


def test_rerun_from_saved_config_is_bit_exact(sweep_dir, tmp_path, capsys):
    code, _, _ = run(["sweep", "--config", str(sweep_dir / "config.json"), "--out", str(tmp_path / "again")], capsys)
    assert code == 0
    assert file_sha256(tmp_path / "again" / "reports.csv") == file_sha256(sweep_dir / "reports.csv")
    for name in ("gan.npz", "predictor_lam0p5.npz", "metrics_lam0p5.json"):
        assert file_sha256(tmp_path / "again" / "seed_1" / name) == file_sha256(sweep_dir / "seed_1" / name)


def test_compare_against_ablation(sweep_dir, capsys):
    code, out, _ = run(["compare", "--out", str(sweep_dir)], capsys)
    assert code == 0
    delta = pd.read_csv(sweep_dir / "compare.csv")
    frame = pd.read_csv(sweep_dir / "reports.csv").set_index(["seed", "lambda"])
    row = delta[(delta.seed == 1) & (delta["lambda"] == 0.5)].iloc[0]
    assert row["delta:accuracy"] == pytest.approx(frame.loc[(1, 0.5), "accuracy"] - frame.loc[(1, 0.0), "accuracy"])
    assert (delta.loc[delta["lambda"] == 0.0, "delta:accuracy"] == 0).all()
    assert len(json.loads(out)) == 2


def test_compare_baseline_rejects_mismatched_seeds():
    base = pd.DataFrame({"seed": [0, 1], "lambda": [0.0, 0.0], "accuracy": [0.8, 0.7]})
    with pytest.raises(ValidationError):
        compare_baseline(base, base.assign(seed=[0, 2]))


def test_report_renders_figures(sweep_dir, capsys):
    code, out, _ = run(["report", "--out", str(sweep_dir)], capsys)
    assert code == 0
    info = json.loads(out)
    assert info["manifest_mismatches"] == []
    for name in ("tradeoff.png", "utility.png", "density.png"):
        assert (sweep_dir / name).stat().st_size > 1000
    tradeoff = pd.read_csv(sweep_dir / "tradeoff.csv")
    assert list(tradeoff["lambda"]) == [0.0, 0.5]
    assert "cf_true:mean" in tradeoff


def test_step_by_step_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    out = tmp_path / "steps"
    code, text, _ = run(["simulate", "--config", cfg, "--dataset", "semi-sin", "--seed", "3", "--out", str(out)], capsys)
    assert code == 0 and json.loads(text)["rows"] == 600
    code, text, _ = run(["train-gan", "--config", cfg, "--seed", "3", "--out", str(out)], capsys)
    assert code == 0
    code, text, _ = run(["train-predictor", "--config", cfg, "--seed", "3", "--lambda", "0.5", "--out", str(out),
                         "--train", str(out / "train.csv"), "--gan", str(out / "gan.npz")], capsys)
    assert code == 0
    pred = json.loads(text)["predictor"]
    rows = pd.read_csv(out / "test.csv").head(4)
    rows.to_csv(tmp_path / "rows.csv", index=False)
    code, text, _ = run(["evaluate", "--config", cfg, "--out", str(out / "eval"), "--predictor", pred,
                         "--gan", str(out / "gan.npz"), "--test", str(out / "test.csv"),
                         "--predictions", str(tmp_path / "rows.csv")], capsys)
    assert code == 0
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert metrics["cf_true"] is not None and 0 <= metrics["accuracy"] <= 1
    scored = pd.read_csv(out / "eval" / "predictions.csv")
    assert scored["p_hat"].between(0, 1).all() and len(scored) == 4


def test_errors_print_json_and_exit_nonzero(tmp_path, capsys):
    code, _, err = run(["train-predictor", "--out", str(tmp_path), "--train", str(tmp_path / "missing.csv"),
                        "--gan", str(tmp_path / "missing.npz")], capsys)
    assert code == 1
    record = json.loads(err.strip().splitlines()[-1])
    assert record["command"] == "train-predictor" and record["error"]

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_key": 1}))
    code, _, err = run(["sweep", "--config", str(bad), "--out", str(tmp_path)], capsys)
    assert code == 1 and json.loads(err)["error"] == "ValidationError"


def test_failed_seed_does_not_stop_others(tmp_path, capsys, monkeypatch):
    import gcfn.experiment as exp

    real = exp.train_gan

    def fail_on_seed_one(train, cfg, progress=None):
        if cfg.seed == 1:
            raise ValueError("injected")
        return real(train, cfg, progress)

    monkeypatch.setattr(exp, "train_gan", fail_on_seed_one)
    cfg = write_config(tmp_path / "cfg.json", lambda_grid=[0.0])
    code, text, _ = run(["sweep", "--config", cfg, "--out", str(tmp_path / "run")], capsys)
    assert code == 0 and json.loads(text)["failed"] == [1]
    manifests = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifests[1]["status"] == "failed" and manifests[1]["error"]["message"] == "injected"
    assert list(pd.read_csv(tmp_path / "run" / "reports.csv").seed) == [0]


def test_config_rejects_empty_grids():
    with pytest.raises(ValidationError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ValidationError):
        ExperimentConfig(lambda_grid=[-1.0])
    assert ExperimentConfig().hash() == ExperimentConfig(output_dir="elsewhere").hash()
    assert np.isclose(ExperimentConfig().predictor_config(0, 0.5).lam, 0.5)
