from __future__ import annotations

import csv
import json
import logging

import pytest
from conftest import small_config

from mad_debate import pipeline
from mad_debate.cli import main
from mad_debate.config import load_config
from mad_debate.ingest import CORRUPTION_KINDS


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(small_config(tmp))]) == 0
    return tmp / "out"


def test_run_writes_artifacts(run_dir):
    for name in ("metrics.json", "ledger.json", "traces.ndjson", "split.csv", "scores.csv"):
        assert (run_dir / name).stat().st_size > 0
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert 0.5 < metrics["roc_auc"] <= 1.0
    assert metrics["conformal"]["alpha"] == 0.05
    rows = _read_csv(run_dir / "scores.csv")
    assert len(rows) == metrics["n_test"]
    assert set(rows[0]) == {"row_id", "score", "p_value", "flag"}
    traces = (run_dir / "traces.ndjson").read_text().splitlines()
    assert len(traces) == metrics["n_test"]
    assert json.loads((run_dir / "ledger.json").read_text())["holds"]


def test_run_is_deterministic(run_dir, tmp_path):
    assert main(["run", "--config", str(small_config(tmp_path)), "--out", str(tmp_path / "again")]) == 0
    for name in ("metrics.json", "traces.ndjson", "scores.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (run_dir / name).read_bytes()


def test_seed_flag_changes_output(run_dir, tmp_path):
    assert main(["run", "--config", str(small_config(tmp_path)), "--seed", "7"]) == 0
    assert (tmp_path / "out" / "scores.csv").read_bytes() != (run_dir / "scores.csv").read_bytes()


def test_bad_fractions_exit_2(tmp_path, capsys):
    path = small_config(tmp_path, split={"fractions": {"train": 0.5, "validation": 0.1, "calibration": 0.1,
                                                       "test": 0.2}})
    assert main(["run", "--config", str(path)]) == 2
    assert "split.fractions" in capsys.readouterr().err


def test_bad_json_exit_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json", encoding="utf-8")
    assert main(["run", "--config", str(path)]) == 2


def test_unknown_key_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(small_config(tmp_path, bogus=1))]) == 2
    assert "bogus" in capsys.readouterr().err


def test_bad_csv_exit_3(tmp_path, capsys):
    data = tmp_path / "data.csv"
    data.write_text("a,b,label\n1,2,0\n3,4\n", encoding="utf-8")
    path = small_config(tmp_path, data={"source": "csv", "path": str(data)})
    assert main(["run", "--config", str(path)]) == 3
    assert "[load]" in capsys.readouterr().err


def test_missing_csv_exit_3(tmp_path):
    path = small_config(tmp_path, data={"source": "csv", "path": str(tmp_path / "nope.csv")})
    assert main(["run", "--config", str(path)]) == 3


def test_bad_workers_exit_2(tmp_path):
    assert main(["run", "--config", str(small_config(tmp_path)), "--workers", "0"]) == 2


def test_workers_do_not_change_results(run_dir, tmp_path):
    assert main(["run", "--config", str(small_config(tmp_path)), "--workers", "3"]) == 0
    assert (tmp_path / "out" / "metrics.json").read_bytes() == (run_dir / "metrics.json").read_bytes()


def test_ablate_single_point(tmp_path):
    grid = {"eta": [1.0], "lambda": [0.5], "gamma": [0.5], "rounds_T": [1]}
    assert main(["ablate", "--config", str(small_config(tmp_path, ablate={"grid": grid}))]) == 0
    rows = _read_csv(tmp_path / "out" / "ablation.csv")
    assert len(rows) == 1 and tuple(rows[0]) == pipeline.ABLATION_COLUMNS
    selected = json.loads((tmp_path / "out" / "ablation_selected.json").read_text())
    assert selected["eta"] == 1.0


def test_ablate_full_grid(tmp_path):
    cfg = load_config(small_config(tmp_path))
    rows, best = pipeline.ablate(cfg)
    assert len(rows) == 144
    assert best["pr_auc"] == max(r["pr_auc"] for r in rows)


def test_select_config_tiebreak():
    rows = [{"pr_auc": 0.8, "ece": 0.10, "id": 0}, {"pr_auc": 0.8, "ece": 0.05, "id": 1},
            {"pr_auc": 0.7, "ece": 0.01, "id": 2}, {"pr_auc": 0.8, "ece": 0.05, "id": 3}]
    assert pipeline.select_config(rows)["id"] == 1


@pytest.fixture(scope="module")
def corrupt_setup(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("corrupt")
    cfg = load_config(small_config(tmp, corrupt={"severities": [0.0, 0.5, 0.9]}))
    fp = pipeline.fit_pipeline(cfg)
    return cfg, fp, pipeline.corruption_sweep(cfg, fp=fp)


def test_corruption_grid_shape(corrupt_setup):
    _, _, rows = corrupt_setup
    assert len(rows) == 12
    assert {r["kind"] for r in rows} == set(CORRUPTION_KINDS)


def test_corruption_severity_zero_matches_base(corrupt_setup):
    cfg, fp, rows = corrupt_setup
    test = fp.table.view("test")
    base = pipeline.metrics_report(fp, pipeline.score_view(fp, test))
    for r in rows:
        if r["severity"] == 0.0:
            for k in pipeline.CORRUPTION_COLUMNS[2:]:
                assert r[k] == base[k]


def test_heavy_missingness_does_not_help(corrupt_setup):
    _, _, rows = corrupt_setup
    base = next(r for r in rows if r["kind"] == "missing_injection" and r["severity"] == 0.0)
    heavy = next(r for r in rows if r["kind"] == "missing_injection" and r["severity"] == 0.9)
    assert heavy["roc_auc"] <= base["roc_auc"] + 0.02


def test_corrupt_cli(tmp_path):
    path = small_config(tmp_path, corrupt={"kinds": ["gaussian_noise"], "severities": [0.0, 0.25]})
    assert main(["corrupt", "--config", str(path)]) == 0
    rows = _read_csv(tmp_path / "out" / "corruption.csv")
    assert [r["severity"] for r in rows] == ["0.0", "0.25"]


@pytest.mark.parametrize("gen", ["adversarial", "uniform", "bernoulli", "psi"])
def test_regret_sim_holds(tmp_path, gen):
    path = small_config(tmp_path, regret={"N": 4, "eta": 0.5, "T": 300, "generator": gen, "seeds": 3})
    assert main(["regret-sim", "--config", str(path)]) == 0
    rows = _read_csv(tmp_path / "out" / "regret.csv")
    assert len(rows) == 3 and all(r["holds"] == "True" for r in rows)
    curves = _read_csv(tmp_path / "out" / "regret_curves.csv")
    assert len(curves) == 3 * 100


def test_regret_sim_degenerate(tmp_path):
    cfg = load_config(small_config(tmp_path, regret={"N": 3, "T": 100, "generator": "zeros", "seeds": 2}))
    assert all(r["regret"] == 0.0 for r in pipeline.regret_sim(cfg)[0])
    cfg = load_config(small_config(tmp_path, regret={"N": 1, "T": 100, "generator": "uniform", "seeds": 2}))
    assert all(r["regret"] == 0.0 for r in pipeline.regret_sim(cfg)[0])


def test_mad_log_env(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("MAD_LOG", "INFO")
    path = small_config(tmp_path, regret={"N": 2, "T": 50, "seeds": 1})
    with caplog.at_level(logging.INFO, logger="mad_debate"):
        assert main(["regret-sim", "--config", str(path)]) == 0
    assert any("regret bound held" in r.message for r in caplog.records)


def test_bundled_config_loads():
    cfg = load_config("bundled:two_gaussian")
    assert cfg.data.name == "two_gaussian" and cfg.conformal.enabled
