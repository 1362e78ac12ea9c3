import csv
import json
import warnings

import numpy as np
import pytest

from ipsur.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from ipsur.harness import (COLUMNS, ConfigError, ExperimentConfig, ExperimentRecord, emit_plots,
                           read_summary, run_experiment, summarize, write_summary)

QUICK = {"max_evals": 150, "seed": 0}


def small_config(tmp_path, **overrides):
    doc = dict(testbed="banana",
               strategies=[{"kind": "IPSUR", "optim": QUICK}, {"kind": "DOPT", "optim": QUICK}],
               n0=5, n_iterations=2, n_replicates=2, L=1500, reference_budget=20,
               output_dir=str(tmp_path / "out"), refit_restarts=1, kde_max_samples=1200,
               map_optim={"max_evals": 200, "seed": 0})
    doc.update(overrides)
    return ExperimentConfig.from_dict(doc)


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


@pytest.fixture(scope="module")
def small_record(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("campaign")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_experiment(small_config(tmp), workers=1)


# -- configuration -----------------------------------------------------------------


@pytest.mark.parametrize("bad,match", [
    ({"testbed": "rosenbrock"}, "test bed"),
    ({"strategies": []}, "at least one"),
    ({"strategies": [{"kind": "CSQ"}]}, "invalid strategy"),
    ({"strategies": [{"kind": "DOPT"}, {"kind": "DOPT"}]}, "duplicate"),
    ({"n_iterations": -1}, "n_iterations"),
    ({"n0": 1}, "n0"),
    ({"L": 10}, "chain length"),
    ({"seeds": [1]}, "one seed per replicate"),
    ({"seeds": [3, 3]}, "distinct"),
    ({"kernel_family": "periodic"}, "kernel family"),
    ({"bogus": 1}, "unknown configuration fields"),
])
def test_invalid_configurations(tmp_path, bad, match):
    with pytest.raises(ConfigError, match=match):
        small_config(tmp_path, **bad)


def test_configuration_json_round_trip(tmp_path):
    cfg = small_config(tmp_path)
    cfg.to_json(tmp_path / "c.json")
    back = ExperimentConfig.from_json(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.seeds == [0, 1]


def test_unreadable_configuration(tmp_path):
    (tmp_path / "c.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        ExperimentConfig.from_json(tmp_path / "c.json")
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_json(tmp_path / "missing.json")


# -- campaigns ---------------------------------------------------------------------


def test_record_layout(small_record):
    rows = small_record.rows
    assert len(rows) == 2 * 2 * 3
    assert all(r["status"] == "ok" for r in rows)
    with open(small_record.path, newline="") as fh:
        assert next(csv.reader(fh)) == COLUMNS
    first = [r for r in rows if r["strategy"] == "IPSUR" and r["replicate"] == "0"]
    assert [int(r["iteration"]) for r in first] == [0, 1, 2]
    assert [int(r["n_evals"]) for r in first] == [6, 7, 7]
    assert first[-1]["x_selected"] == "" and first[0]["x_selected"].count(";") == 1
    assert all(float(r["ivar"]) > 0 for r in rows)


def test_strategies_share_initial_state(small_record):
    cells = small_record.cells()
    for rep in (0, 1):
        a, b = cells[("IPSUR", rep)][0], cells[("DOPT", rep)][0]
        assert a["ivar"] == b["ivar"] and a["kl"] == b["kl"]


def test_same_configuration_same_record(tmp_path, small_record):
    cfg = small_config(tmp_path, strategies=[{"kind": "DOPT", "optim": QUICK}], n_replicates=1)
    again = run_experiment(cfg, workers=1)
    ref = [r for r in small_record.rows if r["strategy"] == "DOPT" and r["replicate"] == "0"]
    for a, b in zip(again.rows, ref):
        assert a["x_selected"] == b["x_selected"] and a["ivar"] == b["ivar"]


def test_zero_iterations_records_initial_metrics_only(tmp_path):
    rec = run_experiment(small_config(tmp_path, n_iterations=0, n_replicates=1), workers=1)
    assert len(rec.rows) == 2 and all(r["iteration"] == "0" and r["x_selected"] == "" for r in rec.rows)


def test_resume_keeps_finished_cells_and_drops_partial_ones(tmp_path, small_record):
    cfg = small_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    rows = small_record.rows
    finished = [r for r in rows if (r["strategy"], r["replicate"]) != ("DOPT", "1")]
    partial = [r for r in rows if (r["strategy"], r["replicate"]) == ("DOPT", "1")][:1]
    marked = [dict(r, wall_time="-1.0") for r in finished]
    ExperimentRecord(marked + partial).to_csv(out / "record.csv")
    resumed = run_experiment(cfg, workers=1)
    assert len(resumed.rows) == len(rows)
    redone = [r for r in resumed.rows if (r["strategy"], r["replicate"]) == ("DOPT", "1")]
    assert len(redone) == 3 and all(r["wall_time"] != "-1.0" for r in redone)
    kept = [r for r in resumed.rows if (r["strategy"], r["replicate"]) != ("DOPT", "1")]
    assert all(r["wall_time"] == "-1.0" for r in kept)


def test_failed_cell_is_recorded_not_raised(tmp_path, monkeypatch):
    import ipsur.harness as harness

    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("synthetic failure")

    monkeypatch.setattr(harness, "select", broken)
    rec = run_experiment(small_config(tmp_path, n_replicates=1, strategies=[{"kind": "DOPT", "optim": QUICK}]),
                         workers=1)
    assert len(rec.rows) == 1
    assert rec.rows[0]["status"].startswith("failed: LinAlgError")
    assert summarize(rec) == []


def test_final_values(small_record):
    vals = small_record.final("IPSUR")
    assert vals.shape == (2,) and np.all(vals > 0)


# -- summaries and plots -----------------------------------------------------------


def synthetic_record(values):
    rows = []
    for rep, series in enumerate(values):
        for it, v in enumerate(series):
            row = {c: "" for c in COLUMNS}
            row.update(schema_version=1, strategy="S", replicate=rep, seed=rep, iteration=it, ivar=repr(v),
                       status="ok")
            rows.append(row)
    return ExperimentRecord([{k: str(v) for k, v in r.items()} for r in rows])


def test_summary_matches_hand_computation():
    values = [[4.0, 2.0], [6.0, 1.0], [5.0, 3.0]]
    summary = summarize(synthetic_record(values), metrics=("ivar",))
    assert len(summary) == 2
    v = np.array([4.0, 6.0, 5.0])
    half = 1.96 * v.std(ddof=1) / np.sqrt(3)
    row = summary[0]
    assert row["mean"] == pytest.approx(5.0)
    assert row["ci_low"] == pytest.approx(5.0 - half) and row["ci_high"] == pytest.approx(5.0 + half)
    assert row["n"] == 3 and not row["degenerate"]


def test_single_replicate_summary_is_flagged():
    summary = summarize(synthetic_record([[1.0, 0.5]]), metrics=("ivar",))
    assert all(r["degenerate"] and r["ci_low"] == r["ci_high"] == r["mean"] for r in summary)


def test_summary_csv_round_trip(tmp_path, small_record):
    summary = summarize(small_record)
    write_summary(summary, tmp_path / "s.csv")
    assert read_summary(tmp_path / "s.csv") == summary


def test_plots_are_written(tmp_path, small_record):
    files = emit_plots(summarize(small_record), tmp_path / "plots")
    names = sorted(f.name for f in files)
    assert names == ["entropy.svg", "ivar.svg", "kl.svg", "summary.csv"]
    assert (tmp_path / "plots" / "ivar.svg").read_text().lstrip().startswith("<?xml")


def test_empty_summary_cannot_be_plotted(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        emit_plots([], tmp_path)


# -- command line ------------------------------------------------------------------


def test_cli_run_summarize_plot(tmp_path, capsys):
    cfg = small_config(tmp_path, n_iterations=1, n_replicates=1, strategies=[{"kind": "DOPT", "optim": QUICK}])
    cfg.to_json(tmp_path / "cfg.json")
    assert main(["run", str(tmp_path / "cfg.json"), "--output-dir", str(tmp_path / "cli")]) == EXIT_OK
    assert (tmp_path / "cli" / "record.csv").exists() and (tmp_path / "cli" / "config.json").exists()
    assert main(["summarize", str(tmp_path / "cli" / "record.csv")]) == EXIT_OK
    assert "single replicate" in capsys.readouterr().out
    assert main(["plot", str(tmp_path / "cli" / "summary.csv"), "-o", str(tmp_path / "figs")]) == EXIT_OK
    assert (tmp_path / "figs" / "ivar.svg").exists()


def test_cli_configuration_errors(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"testbed": "nowhere", "strategies": [{"kind": "DOPT"}]}))
    assert main(["run", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["summarize", str(tmp_path / "missing.csv")]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG


def test_cli_failed_cells_exit_numerical(tmp_path, monkeypatch):
    import ipsur.harness as harness

    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("synthetic failure")

    monkeypatch.setattr(harness, "select", broken)
    cfg = small_config(tmp_path, n_replicates=1, strategies=[{"kind": "DOPT", "optim": QUICK}])
    cfg.to_json(tmp_path / "cfg.json")
    assert main(["run", str(tmp_path / "cfg.json")]) == EXIT_NUMERICAL


def test_cli_oracle_suite(capsys):
    assert main(["oracle", "testbeds"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
