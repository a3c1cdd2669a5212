import csv
import json

import numpy as np
import pytest

from gridcast import harness
from gridcast.arima import rolling_origins
from gridcast.harness import (
    ConfigError,
    DataError,
    ExperimentConfig,
    MethodResult,
    Report,
    emit_plot_data,
    load_dataset,
    run,
    trimmed_indices,
    verify_provenance,
)
from gridcast.metrics import EvalResult

FAST = {
    "synthetic": {"days": 8, "seed": 3},
    "arima": {"train_days": 4, "test_days": 2},
    "tree": {"cv_min_leaf": "1, 5", "cv_folds": 3},
    "bagged": {"n_estimators": 5},
    "boost": {"n_estimators": 10, "curve_learning_rates": "0.5", "curve_max_splits": "1"},
    "narx": {"W": 2, "D": 4, "max_epochs": 3},
}


def fast_config(tmp_path=None, **extra):
    sections = {s: dict(v) for s, v in FAST.items()}
    for s, v in extra.items():
        sections.setdefault(s, {}).update(v)
    cfg = ExperimentConfig.default(**sections)
    if tmp_path is not None:
        cfg.set("run", "output_dir", str(tmp_path / "out"))
    return cfg


@pytest.fixture(scope="module")
def fast_report():
    cfg = fast_config()
    return cfg, run(cfg, write=False)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- configuration --------------------------------------------------------


def test_empty_config_gives_every_default():
    cfg = ExperimentConfig.from_string("", env={})
    assert cfg.methods == list(harness.METHODS)
    assert cfg["tree"]["min_leaf"] == 6 and cfg["tree"]["max_splits"] == 50
    assert cfg["bagged"]["n_estimators"] == 60
    assert cfg.arima_params() == {"ar_lags": (1, 2, 96), "ma_lags": (1, 2, 96), "d": 1}
    assert cfg.narx_config().W == 16 and cfg.synthetic_config().days == 180


def test_config_values_are_typed():
    text = "[run]\nseed = 9\nunified_eval = yes\n[boost]\nlearning_rate = 0.25\n"
    cfg = ExperimentConfig.from_string(text, env={})
    assert cfg.seed == 9 and cfg["run"]["unified_eval"] is True
    assert cfg["boost"]["learning_rate"] == 0.25


@pytest.mark.parametrize("text", [
    "[nope]\na = 1\n",
    "[run]\ncolour = red\n",
    "[run]\nseed = abc\n",
    "[run]\nmethods = arima, magic\n",
    "[run]\nmethods = arima, arima\n",
    "[tree]\ntrain_fraction = 1.5\n",
    "[narx]\nhidden_layers = 7\n",
    "[arima]\nar_lags = 1, x\n",
    "[data]\nsource = csv\n",
    "no section header\n",
])
def test_bad_config_raises(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_string(text, env={})


def test_seed_env_override(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[run]\nseed = 3\n")
    assert ExperimentConfig.from_file(path, env={}).seed == 3
    assert ExperimentConfig.from_file(path, env={"GRIDCAST_SEED": "11"}).seed == 11
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(path, env={"GRIDCAST_SEED": "x"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "missing.ini", env={})


def test_relative_paths_resolve_against_config_file(tmp_path):
    path = tmp_path / "sub" / "exp.ini"
    path.parent.mkdir()
    path.write_text("[run]\noutput_dir = out\n[data]\nsource = csv\ndir = data\n")
    cfg = ExperimentConfig.from_file(path, env={})
    assert cfg.output_dir == tmp_path / "sub" / "out"
    assert cfg.csv_paths()["rt_price"] == [tmp_path / "sub" / "data" / "rt_price.csv"]


def test_missing_csv_is_data_error(tmp_path):
    cfg = ExperimentConfig.from_string(f"[data]\nsource = csv\ndir = {tmp_path}\n", env={})
    with pytest.raises(DataError):
        load_dataset(cfg)


# --- run and report -------------------------------------------------------


def test_perfect_predictor_scores_zero(monkeypatch):
    def perfect(ctx):
        fm = ctx.fm
        return MethodResult("persistence", protocol="stub", steps=fm.steps,
                            result=EvalResult.from_pairs(fm.y, fm.y.copy()))

    monkeypatch.setitem(harness.RUNNERS, "persistence", perfect)
    rep = run(fast_config(run={"methods": "persistence"}), write=False)
    r = rep.methods["persistence"].result
    assert r.mae == 0.0 and r.rmse == 0.0 and r.n > 0


def test_all_methods_reported(fast_report):
    _, rep = fast_report
    assert list(rep.methods) == list(harness.METHODS)
    assert rep.failed == []
    d = json.loads(rep.to_json())
    for m in harness.METHODS:
        assert d["methods"][m]["status"] == "ok"
        assert d["methods"][m]["mae"] <= d["methods"][m]["rmse"]
    assert d["methods"]["tree"]["feature_importance"]


def test_differing_test_sets_carry_caveat_and_common_block(fast_report):
    _, rep = fast_report
    comp = rep.comparison
    assert comp["shared_test_points"] is False and "caveat" in comp
    common = set(rep.methods["arima"].steps)
    for r in rep.methods.values():
        common &= set(r.steps)
    assert comp["common"]["n"] == len(common)
    r = rep.methods["tree"]
    keep = np.isin(r.steps, sorted(common))
    assert comp["common"]["mae"]["tree"] == pytest.approx(
        np.mean(np.abs(r.result.real[keep] - r.result.predicted[keep])))


def test_report_is_deterministic_modulo_timestamp():
    a = json.loads(run(fast_config(run={"methods": "arima, tree, bagged"}), write=False).to_json())
    b = json.loads(run(fast_config(run={"methods": "arima, tree, bagged"}), write=False).to_json())
    a.pop("generated_at"), b.pop("generated_at")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_failed_method_is_isolated(monkeypatch):
    def boom(ctx):
        raise RuntimeError("kaput")

    monkeypatch.setitem(harness.RUNNERS, "tree", boom)
    rep = run(fast_config(run={"methods": "persistence, tree, boost"}), write=False)
    assert rep.failed == ["tree"]
    assert "kaput" in rep.methods["tree"].error
    assert rep.methods["boost"].status == "ok"


def test_provenance_hash_verifies(fast_report):
    cfg, rep = fast_report
    d = json.loads(rep.to_json())
    assert verify_provenance(d)
    assert d["provenance"]["config_hash"] == cfg.hash()
    d["provenance"]["config"]["tree"]["min_leaf"] = 7
    assert not verify_provenance(d)
    ds = d["provenance"]["dataset"]
    assert {"mean", "sd", "max"} <= set(ds)
    assert d["provenance"]["reference"]["price_stats"] == {"mean": 20.15, "sd": 59.22, "max": 5040.40}


def test_seed_changes_stochastic_methods_but_not_arima():
    methods = {"methods": "arima, bagged, narx"}
    a = run(fast_config(run={**methods, "seed": 1}), write=False)
    b = run(fast_config(run={**methods, "seed": 2}), write=False)
    assert np.array_equal(a.methods["arima"].result.predicted, b.methods["arima"].result.predicted)
    assert not np.array_equal(a.methods["bagged"].result.predicted,
                              b.methods["bagged"].result.predicted)
    assert not np.array_equal(a.methods["narx"].result.predicted,
                              b.methods["narx"].result.predicted)


def test_unified_mode_shares_test_points():
    rep = run(fast_config(run={"unified_eval": True,
                               "methods": "persistence, arima, tree, boost, narx"}), write=False)
    assert all(r.protocol == "rolling-origin" for r in rep.methods.values())
    tree = set(rep.methods["tree"].steps)
    assert tree == set(rep.methods["persistence"].steps) == set(rep.methods["boost"].steps)
    assert set(rep.methods["narx"].steps) <= set(rep.methods["arima"].steps)
    # every scored point lies in some rolling test window
    n = 8 * 96
    windows = rolling_origins(n, 4 * 96, 2 * 96)
    for m, r in rep.methods.items():
        inside = np.zeros(r.steps.size, bool)
        for _, b, c in windows:
            inside |= (r.steps >= b) & (r.steps < c)
        assert inside.all(), m


def test_parallel_methods_match_serial():
    serial = run(fast_config(run={"methods": "arima, tree, bagged"}), write=False)
    par = run(fast_config(run={"methods": "arima, tree, bagged", "parallel_methods": True}),
              write=False)
    for m in ("arima", "tree", "bagged"):
        assert np.array_equal(serial.methods[m].result.predicted, par.methods[m].result.predicted)


# --- plot data ------------------------------------------------------------


def test_empty_method_set_gives_empty_bundle(tmp_path):
    rep = Report({}, {"output_dir": str(tmp_path)}, {})
    assert emit_plot_data(rep, tmp_path / "plots") == []
    assert list((tmp_path / "plots").iterdir()) == []


def test_bundle_row_counts(fast_report, tmp_path):
    cfg, rep = fast_report
    rep.write(tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["methods"]
    oob = read_csv(tmp_path / "oob_curve.csv")
    assert oob[0] == ["n_trees", "oob_mae"] and len(oob) - 1 == cfg["bagged"]["n_estimators"]
    for m, r in rep.methods.items():
        rows = read_csv(tmp_path / f"errors_{m}.csv")
        assert len(rows) - 1 == r.result.n
        assert len(read_csv(tmp_path / f"predictions_{m}.csv")) - 1 == r.result.n
        trimmed = read_csv(tmp_path / f"errors_{m}_trimmed.csv")
        assert len(trimmed) - 1 == r.result.n - int(np.ceil(0.1 * r.result.n))
    cv = read_csv(tmp_path / "cv_min_leaf.csv")
    assert [row[0] for row in cv[1:]] == ["1", "5"]
    boost = read_csv(tmp_path / "boost_curve.csv")
    assert len(boost) - 1 == 2 * (cfg["boost"]["n_estimators"] + 1)
    trace = read_csv(tmp_path / "narx_trace.csv")
    assert len(trace) - 1 == rep.methods["narx"].details["epochs"]


def test_trimmed_indices_drop_largest_errors():
    e = np.array([5.0, 1.0, 9.0, 2.0, 3.0, 4.0, 0.5, 7.0, 6.0, 8.0])
    keep = trimmed_indices(e)
    assert keep.size == 9 and 2 not in keep
    assert trimmed_indices(np.arange(20.0)).tolist() == list(range(18))
