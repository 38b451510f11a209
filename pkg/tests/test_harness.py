import json
import logging
import math

import numpy as np
import pytest

from idmlab.cli import main
from idmlab.harness.config import BUILTIN, ExperimentConfig, from_dict, load_config
from idmlab.harness.experiments import FIELDNAMES, ResultRow, aggregate, expand_jobs, read_rows, rows_to_csv, run_experiment
from idmlab.harness.plots import plot_csv, plot_rows
from idmlab.models import ConfigError

TINY_POS = dict(experiment="complexity_pos", sizes=[10], splits=[0.5, 1.0], seeds=[0, 1], max_epochs=30)


def test_result_row_fields_in_csv_header():
    assert FIELDNAMES == ["experiment", "env", "method", "arch", "split_fraction", "seed", "metric", "value", "epochs_run", "wall_time"]


@pytest.mark.parametrize(
    "bad",
    [
        dict(experiment="nope"),
        dict(experiment="goal", methods=["BC-LC"]),
        dict(experiment="stochasticity", seeds=[]),
        dict(experiment="stochasticity", splits=[0.0]),
        dict(experiment="complexity_pos", sizes=[30]),
        dict(experiment="stochasticity", schema_version=2),
        dict(experiment="stochasticity", relabel_mode="mode"),
    ],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        from_dict(dict(experiment="goal", colour="red"))


def test_builtins_load_and_fill_methods():
    for name in BUILTIN:
        cfg = load_config(name)
        assert cfg.methods and cfg.experiment == name


def test_config_paths_relative_to_file(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "c.json"
    path.write_text(json.dumps(dict(TINY_POS, out="res")))
    assert load_config(str(path)).out == str(tmp_path / "sub" / "res")


def test_job_grid_size():
    cfg = from_dict(dict(TINY_POS))
    assert len(expand_jobs(cfg)) == 1 * 4 * 2 * 2
    assert {j["seed"] for j in expand_jobs(cfg, seed_offset=10)} == {10, 11}


def test_run_is_deterministic_and_aggregates(tmp_path):
    cfg = from_dict(dict(TINY_POS, out=str(tmp_path / "a")))
    rows = run_experiment(cfg)
    csv_a = (tmp_path / "a" / "results.csv").read_bytes()
    run_experiment(from_dict(dict(TINY_POS, out=str(tmp_path / "b"))), jobs=2)
    assert (tmp_path / "b" / "results.csv").read_bytes() == csv_a
    assert {r.method for r in rows} == {"BC-LC", "BC-MLP5", "VMIDM-LC", "VMIDM-MLP5"}
    assert all(math.isfinite(r.value) for r in rows)
    # aggregation matches recomputation from the raw rows
    for cell in aggregate(rows):
        vals = [r.value for r in rows if (r.env, r.method, r.split_fraction, r.metric) == (cell["env"], cell["method"], cell["split_fraction"], cell["metric"])]
        assert cell["n"] == len(vals) == 2
        assert cell["mean"] == pytest.approx(np.mean(vals), abs=1e-15)
        assert cell["std"] == pytest.approx(np.std(vals), abs=1e-15)
    assert read_rows(tmp_path / "a" / "results.csv") == rows


def test_csv_round_trip_and_missing_columns(tmp_path):
    rows = [ResultRow("e", "env", "m", "LC", 0.1, 0, "test_accuracy", 0.1 + 0.2, 3, None)]
    p = tmp_path / "r.csv"
    p.write_text(rows_to_csv(rows))
    assert read_rows(p) == rows
    p.write_text("experiment,method\nx,y\n")
    with pytest.raises(ValueError):
        read_rows(p)


def _fixture_rows():
    rows = []
    for method, base in (("BC", 0.3), ("IDM", 0.6), ("X", 0.1)):
        for split in (0.01, 0.025, 0.05, 0.1):
            for seed in range(3):
                rows.append(ResultRow("complexity_pos", "maze10", method, "LC", split, seed, "test_accuracy", base + split + 0.01 * seed, 10))
    return rows


def test_plot_series_count_and_byte_stability(tmp_path):
    rows = _fixture_rows()
    [a] = plot_rows(rows, tmp_path / "a")
    [b] = plot_rows(rows, tmp_path / "b")
    svg = a.read_bytes()
    assert svg == b.read_bytes()
    text = svg.decode()
    for m in ("BC", "IDM", "X"):
        assert f">{m}<" in text
    [c] = plot_rows(rows, tmp_path / "c", methods=["BC", "IDM"])
    assert ">X<" not in c.read_text()


def test_plot_empty_filter_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert plot_rows(_fixture_rows(), tmp_path, methods=["missing"]) == []
    assert "nothing plotted" in caplog.text
    assert not list(tmp_path.iterdir())


def test_cli_subcommands(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(TINY_POS, splits=[1.0], seeds=[0], max_epochs=5)))
    assert main(["run", str(cfg), "--out", str(tmp_path / "out"), "--seed-offset", "3"]) == 0
    rows = read_rows(tmp_path / "out" / "results.csv")
    assert {r.seed for r in rows} == {3}
    assert main(["plot", str(tmp_path / "out" / "results.csv"), "--out", str(tmp_path / "fig")]) == 0
    assert list((tmp_path / "fig").glob("*.svg"))
    assert main(["verify", "--trials", "10", "--out", str(tmp_path / "v")]) == 0
    assert len((tmp_path / "v" / "verify_report.jsonl").read_text().splitlines()) == 10
    assert main(["oracle", "10", "--mazes", "2"]) == 0
    assert "img_acc=1.0000" in capsys.readouterr().out
    assert main(["run", "no-such-experiment"]) == 2
