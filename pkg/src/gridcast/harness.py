"""Experiment orchestration: configuration, method dispatch, report and plot data.

Each method keeps its own evaluation protocol by default:

* ``arima``: rolling origin (train/test windows in days);
* ``tree``, ``bagged``, ``boost`` and ``persistence``: a seeded random
  70/30 split of the feature rows;
* ``narx``: contiguous 70/15/15 blocks in time order.

With ``unified_eval`` every method is evaluated on the rolling-origin
windows instead. The report always says whether the methods share their
test points, and scores every method on the common points as well.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .arima import RollingConfig, SubsetARIMA, rolling_evaluate, rolling_origins
from .core import STREAM_NAMES, MarketDataset
from .features import FeatureSpec, build_matrix
from .ingest import (CSVParseError, DataGapError, DedupMode, GapMode, GapPolicy, SyntheticConfig,
                     dataset_stats, generate_synthetic, load_csv)
from .metrics import EvalResult
from .narx import NarxConfig, build_inputs, fit_network, split_blocks
from .trees import (BaggedTrees, LSBoostRegressor, RegressionTree, kfold_cv,
                    train_test_split_rows)

logger = logging.getLogger(__name__)

METHODS = ("persistence", "arima", "tree", "bagged", "boost", "narx")
TRIM_FRACTION = 0.10

# published 2014-2015 statistics of the reference ERCOT node and the errors
# reported for it; shown next to real-data runs, never asserted
REFERENCE = {
    "price_stats": {"mean": 20.15, "sd": 59.22, "max": 5040.40},
    "mae": {"arima": 5.09, "bagged": 1.03, "boost": 0.30, "narx": 5.38},
    "rmse": {"arima": 23.39},
    "mae_upper_bound": {"tree": 1.0},
    "oob_mae": {"bagged": 0.89},
}


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


class DataError(RuntimeError):
    """The configured data could not be loaded."""


# ------------------------------------------------------------------ config

_SYNTH_DEFAULTS = {f.name: f.default for f in dataclasses.fields(SyntheticConfig)}
_SYNTH_DEFAULTS["days"] = 180

DEFAULTS = {
    "run": {"seed": 0, "methods": "persistence, arima, tree, bagged, boost, narx",
            "output_dir": "gridcast-run", "unified_eval": False, "parallel_methods": False},
    "data": {"source": "synthetic", "dir": "", "gap_mode": "mark-invalid",
             "dedup": "keep-first", **{name: "" for name in STREAM_NAMES}},
    "synthetic": _SYNTH_DEFAULTS,
    "features": {"w_past": 8, "w_future": 4},
    "arima": {"ar_lags": "1, 2, 96", "ma_lags": "1, 2, 96", "d": 1, "train_days": 20,
              "test_days": 5, "n_jobs": 1},
    "tree": {"min_leaf": 6, "max_splits": 50, "train_fraction": 0.7,
             "cv_min_leaf": "1, 2, 5, 10, 20, 50", "cv_folds": 5},
    "bagged": {"n_estimators": 60, "n_jobs": 1},
    "boost": {"learning_rate": 0.1, "max_splits": 16, "n_estimators": 256, "min_leaf": 5,
              "curve_learning_rates": "", "curve_max_splits": ""},
    "narx": {"W": 16, "D": 16, "hidden_layers": 1, "hidden_units": 10, "loss": "MAE",
             "patience": 6, "max_epochs": 100, "learning_rate": 1e-3, "batch_size": 64},
}


def _convert(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _int_list(text, what):
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{what}: expected integers, got {text!r}") from None


def _float_list(text, what):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {text!r}") from None


@dataclass
class ExperimentConfig:
    """Resolved experiment settings, one dict of typed values per section.

    ``base_dir`` anchors relative data and output paths.
    """

    sections: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def default(cls, **overrides) -> "ExperimentConfig":
        cfg = cls({s: dict(v) for s, v in DEFAULTS.items()})
        for section, values in overrides.items():
            for key, value in values.items():
                cfg.set(section, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def from_string(cls, text: str, base_dir=None, env=None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls({s: dict(v) for s, v in DEFAULTS.items()},
                  Path(base_dir) if base_dir is not None else Path.cwd())
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg.sections[section][key] = _convert(section, key, raw, DEFAULTS[section][key])
        env = os.environ if env is None else env
        if env.get("GRIDCAST_SEED"):
            cfg.sections["run"]["seed"] = _convert("run", "seed", env["GRIDCAST_SEED"], 0)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, env=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_string(text, base_dir=path.parent, env=env)

    def set(self, section, key, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting [{section}] {key}")
        self.sections[section][key] = value

    def __getitem__(self, section) -> dict:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self["run"]["seed"]

    @property
    def methods(self) -> list[str]:
        return [m.strip() for m in self["run"]["methods"].split(",") if m.strip()]

    @property
    def output_dir(self) -> Path:
        return self._resolve(self["run"]["output_dir"])

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        """Build every derived object once so errors surface before a run."""
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods listed more than once")
        if self["data"]["source"] not in ("synthetic", "csv"):
            raise ConfigError("[data] source must be 'synthetic' or 'csv'")
        try:
            self.synthetic_config()
            self.feature_spec()
            self.arima_params()
            self.rolling_config()
            self.narx_config()
            self.gap_policy()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        frac = self["tree"]["train_fraction"]
        if not 0.0 < frac < 1.0:
            raise ConfigError("[tree] train_fraction must lie in (0, 1)")
        for key in ("min_leaf", "max_splits", "cv_folds"):
            if self["tree"][key] < 1:
                raise ConfigError(f"[tree] {key} must be >= 1")
        if self["bagged"]["n_estimators"] < 1:
            raise ConfigError("[bagged] n_estimators must be >= 1")
        b = self["boost"]
        if b["n_estimators"] < 1 or b["max_splits"] < 1 or b["min_leaf"] < 1:
            raise ConfigError("[boost] n_estimators, max_splits and min_leaf must be >= 1")
        if not b["learning_rate"] > 0:
            raise ConfigError("[boost] learning_rate must be positive")
        self.cv_grid()
        self.boost_grid()
        if self["data"]["source"] == "csv":
            self.csv_paths()

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(**self["synthetic"])

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self["features"]["w_past"], self["features"]["w_future"])

    def arima_params(self) -> dict:
        a = self["arima"]
        params = {"ar_lags": tuple(_int_list(a["ar_lags"], "[arima] ar_lags")),
                  "ma_lags": tuple(_int_list(a["ma_lags"], "[arima] ma_lags")), "d": a["d"]}
        SubsetARIMA(**params)._check_spec()
        return params

    def rolling_config(self) -> RollingConfig:
        return RollingConfig(self["arima"]["train_days"], self["arima"]["test_days"])

    def narx_config(self) -> NarxConfig:
        return NarxConfig(seed=self.seed, **self["narx"])

    def gap_policy(self) -> GapPolicy:
        return GapPolicy(GapMode(self["data"]["gap_mode"]), DedupMode(self["data"]["dedup"]))

    def cv_grid(self) -> list[int]:
        grid = _int_list(self["tree"]["cv_min_leaf"], "[tree] cv_min_leaf")
        if any(v < 1 for v in grid):
            raise ConfigError("[tree] cv_min_leaf values must be >= 1")
        return grid

    def boost_grid(self) -> list[tuple[float, int]]:
        """(learning_rate, max_splits) pairs for the boosting curves."""
        b = self["boost"]
        rates = _float_list(b["curve_learning_rates"], "[boost] curve_learning_rates")
        splits = _int_list(b["curve_max_splits"], "[boost] curve_max_splits")
        rates = rates or [b["learning_rate"]]
        splits = splits or [b["max_splits"]]
        pairs = [(b["learning_rate"], b["max_splits"])]
        pairs += [(r, s) for r in rates for s in splits if (r, s) != pairs[0]]
        if any(r <= 0 or s < 1 for r, s in pairs):
            raise ConfigError("[boost] curve grid values must be positive")
        return pairs

    def csv_paths(self) -> dict:
        d = self["data"]
        paths = {}
        for name in STREAM_NAMES:
            if d[name]:
                paths[name] = [self._resolve(p.strip()) for p in d[name].split(",") if p.strip()]
            elif d["dir"]:
                paths[name] = [self._resolve(d["dir"]) / f"{name}.csv"]
            else:
                raise ConfigError(f"[data] no file for stream {name!r}; set dir or {name}")
        return paths

    def to_dict(self) -> dict:
        """Canonical settings; data paths are kept as written."""
        out = {s: dict(v) for s, v in self.sections.items()}
        if out["data"]["source"] == "synthetic":
            out["data"] = {"source": "synthetic"}
        else:
            out.pop("synthetic")
        return out

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(settings: dict) -> str:
    text = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_dataset(config: ExperimentConfig) -> MarketDataset:
    if config["data"]["source"] == "synthetic":
        return generate_synthetic(config.synthetic_config())
    try:
        return load_csv(config.csv_paths(), config.gap_policy())
    except (OSError, CSVParseError, DataGapError, ValueError) as exc:
        raise DataError(str(exc)) from exc


# ------------------------------------------------------------------ report

@dataclass
class MethodResult:
    """Outcome of one method: status, scores, traces and plot inputs."""

    name: str
    status: str = "ok"
    protocol: str = ""
    result: EvalResult | None = None
    steps: np.ndarray | None = None
    error: str = ""
    details: dict = field(default_factory=dict)
    importance: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"status": self.status, "protocol": self.protocol}
        if self.error:
            out["error"] = self.error
        if self.result is not None:
            out.update(self.result.summary())
        out.update(self.details)
        if self.importance:
            out["feature_importance"] = [{"feature": f, "share": s} for f, s in self.importance]
        return out


@dataclass
class Report:
    methods: dict
    provenance: dict
    comparison: dict
    timestamps: np.ndarray | None = None
    generated_at: str = ""

    @property
    def failed(self) -> list[str]:
        return [m for m, r in self.methods.items() if r.status != "ok"]

    def to_dict(self) -> dict:
        return {
            "generated_at": self.generated_at,
            "provenance": self.provenance,
            "comparison": self.comparison,
            "methods": {m: r.to_dict() for m, r in self.methods.items()},
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def write(self, directory=None, provenance_only=False) -> Path:
        directory = Path(directory or self.provenance["output_dir"])
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json(), encoding="utf-8")
        if not provenance_only:
            emit_plot_data(self, directory)
        return directory


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def verify_provenance(report: dict) -> bool:
    """True when the stored config hash matches the stored settings."""
    prov = report["provenance"]
    return config_hash(prov["config"]) == prov["config_hash"]


# --------------------------------------------------------------- methods

class _Context:
    """Shared immutable inputs; derived data is built once on demand."""

    def __init__(self, ds: MarketDataset, config: ExperimentConfig):
        self.ds = ds
        self.config = config
        self.unified = config["run"]["unified_eval"]
        self._fm = None
        self._split = None
        self._windows = None

    @property
    def fm(self):
        if self._fm is None:
            self._fm = build_matrix(self.ds, self.config.feature_spec())
        return self._fm

    @property
    def split(self):
        if self._split is None:
            self._split = train_test_split_rows(len(self.fm), self.config["tree"]["train_fraction"],
                                                self.config.seed)
        return self._split

    @property
    def windows(self):
        if self._windows is None:
            rc = self.config.rolling_config()
            self._windows = rolling_origins(self.ds.n_steps, rc.train_steps, rc.test_steps)
        return self._windows

    def window_rows(self, steps):
        """(train_rows, test_rows) index pairs of ``steps`` per rolling window."""
        out = []
        for a, b, c in self.windows:
            tr = np.flatnonzero((steps >= a) & (steps < b))
            te = np.flatnonzero((steps >= b) & (steps < c))
            if tr.size >= 2 and te.size:
                out.append((tr, te))
        return out


def _rolling_fit_predict(ctx, make_model):
    fm = ctx.fm
    rows, preds = [], []
    for tr, te in ctx.window_rows(fm.steps):
        model = make_model().fit(fm.X[tr], fm.y[tr])
        rows.append(te)
        preds.append(model.predict(fm.X[te]))
    if not rows:
        raise ValueError("no rolling window has enough feature rows")
    rows = np.concatenate(rows)
    return rows, np.concatenate(preds)


def _tree_like(ctx, name, make_model, extra=None):
    fm = ctx.fm
    res = MethodResult(name)
    if ctx.unified:
        res.protocol = "rolling-origin"
        rows, pred = _rolling_fit_predict(ctx, make_model)
        model = None
    else:
        res.protocol = f"random {ctx.config['tree']['train_fraction']:g} split"
        tr, rows = ctx.split
        model = make_model().fit(fm.X[tr], fm.y[tr])
        pred = model.predict(fm.X[rows])
        res.importance = model.feature_importance_table(fm.feature_names)
        if extra is not None:
            extra(res, model, tr, rows)
    res.steps = fm.steps[rows]
    res.result = EvalResult.from_pairs(fm.y[rows], pred, timestamps=fm.timestamps[rows])
    return res


def _run_persistence(ctx):
    fm = ctx.fm
    res = MethodResult("persistence")
    if ctx.unified:
        res.protocol = "rolling-origin"
        rows = np.concatenate([te for _, te in ctx.window_rows(fm.steps)])
    else:
        res.protocol = f"random {ctx.config['tree']['train_fraction']:g} split"
        rows = ctx.split[1]
    prev = ctx.ds.rt_price.values[fm.steps[rows] - 1]
    res.steps = fm.steps[rows]
    res.result = EvalResult.from_pairs(fm.y[rows], prev, timestamps=fm.timestamps[rows])
    return res


def _run_arima(ctx):
    cfg = ctx.config
    out = rolling_evaluate(ctx.ds, cfg.arima_params(), cfg.rolling_config(),
                           n_jobs=cfg["arima"]["n_jobs"])
    if out.result is None:
        raise ValueError("no rolling window produced a forecast")
    res = MethodResult("arima", protocol="rolling-origin", result=out.result, steps=out.steps)
    res.details = {
        "windows": len(out.windows),
        "windows_skipped": sum(w.status != "ok" for w in out.windows),
        "persistence_mae": out.persistence_result().mae,
    }
    return res


def _run_tree(ctx):
    t = ctx.config["tree"]

    def make():
        return RegressionTree(min_leaf=t["min_leaf"], max_splits=t["max_splits"])

    def extra(res, model, tr, te):
        res.details["splits"] = model.tree_.n_splits
        grid = ctx.config.cv_grid()
        if grid:
            fm = ctx.fm
            cv = kfold_cv(fm.X[tr], fm.y[tr], {"min_leaf": grid}, k=t["cv_folds"],
                          seed=ctx.config.seed, estimator=make())
            res.curves["cv"] = [(row["params"]["min_leaf"], row["mae"], row["mse"])
                                for row in cv.table]
            res.details["cv_best_min_leaf"] = cv.best_params["min_leaf"]

    return _tree_like(ctx, "tree", make, extra)


def _run_bagged(ctx):
    b = ctx.config["bagged"]

    def make():
        return BaggedTrees(n_estimators=b["n_estimators"], random_state=ctx.config.seed,
                           n_jobs=b["n_jobs"])

    def extra(res, model, tr, te):
        fm = ctx.fm
        curve = model.oob_curve(fm.X[tr], fm.y[tr])
        res.curves["oob"] = curve
        res.details["oob_mae"] = float(curve[-1])

    return _tree_like(ctx, "bagged", make, extra)


def _run_boost(ctx):
    b = ctx.config["boost"]

    def make(rate=b["learning_rate"], splits=b["max_splits"]):
        return LSBoostRegressor(n_estimators=b["n_estimators"], learning_rate=rate,
                                max_splits=splits, min_leaf=b["min_leaf"])

    def extra(res, model, tr, te):
        fm = ctx.fm
        curves = []
        for rate, splits in ctx.config.boost_grid():
            m = model if (rate, splits) == (b["learning_rate"], b["max_splits"]) else \
                make(rate, splits).fit(fm.X[tr], fm.y[tr])
            test = [float(np.mean(np.abs(fm.y[te] - p))) for p in m.staged_predict(fm.X[te])]
            curves.append((rate, splits, list(m.train_mae_), test))
        res.curves["boost"] = curves
        res.details["train_mae"] = model.train_mae_[-1]

    return _tree_like(ctx, "boost", make, extra)


def _run_narx(ctx):
    cfg = ctx.config.narx_config()
    Z, y, steps = build_inputs(ctx.ds, cfg)
    names = cfg.input_names()
    res = MethodResult("narx")
    if ctx.unified:
        res.protocol = "rolling-origin"
        rows, preds = [], []
        for tr, te in ctx.window_rows(steps):
            # the last 15% of each training window drives early stopping
            cut = min(max(int(round(0.85 * tr.size)), 1), tr.size - 1)
            fit, val = tr[:cut], tr[cut:]
            net, _ = fit_network(Z[fit], y[fit], Z[val], y[val], cfg, input_names=names)
            rows.append(te)
            preds.append(net.forward(Z[te]))
        if not rows:
            raise ValueError("no rolling window has enough network inputs")
        rows, pred = np.concatenate(rows), np.concatenate(preds)
    else:
        res.protocol = "temporal 70/15/15 blocks"
        tr, va, rows = split_blocks(y.size)
        net, trace = fit_network(Z[tr], y[tr], Z[va], y[va], cfg, input_names=names)
        pred = net.forward(Z[rows])
        res.curves["trace"] = trace
        res.details.update({
            "epochs": trace.epochs, "best_epoch": trace.best_epoch,
            "stop_reason": trace.stop_reason,
            "train_mae": float(np.mean(np.abs(y[tr] - net.forward(Z[tr])))),
        })
    res.steps = steps[rows]
    res.result = EvalResult.from_pairs(y[rows], pred, timestamps=ctx.ds.timestamps[steps[rows]])
    return res


RUNNERS = {
    "persistence": _run_persistence,
    "arima": _run_arima,
    "tree": _run_tree,
    "bagged": _run_bagged,
    "boost": _run_boost,
    "narx": _run_narx,
}


def _run_method(name, ctx) -> MethodResult:
    try:
        return RUNNERS[name](ctx)
    except Exception as exc:  # isolate failures: the other methods still run
        logger.exception("method %s failed", name)
        return MethodResult(name, status="failed", error=f"{type(exc).__name__}: {exc}")


def _comparison(ds, methods: dict) -> dict:
    ok = {m: r for m, r in methods.items() if r.status == "ok"}
    sets = {m: np.unique(r.steps) for m, r in ok.items()}
    shared = len({s.tobytes() for s in sets.values()}) <= 1
    out = {"shared_test_points": shared, "test_points": {m: int(s.size) for m, s in sets.items()}}
    if not shared:
        out["caveat"] = ("Methods were scored on different test points; compare the "
                         "'common' block, not the per-method errors.")
    if sets:
        common = sets[next(iter(sets))]
        for s in sets.values():
            common = np.intersect1d(common, s)
        out["common"] = {"n": int(common.size), "mae": {}, "rmse": {}}
        if common.size:
            for m, r in ok.items():
                keep = np.isin(r.steps, common)
                sub = EvalResult.from_pairs(r.result.real[keep], r.result.predicted[keep],
                                            keep_points=False)
                out["common"]["mae"][m] = sub.mae
                out["common"]["rmse"][m] = sub.rmse
    return out


def run(config: ExperimentConfig, dataset: MarketDataset | None = None,
        write: bool = True) -> Report:
    """Run every configured method and assemble the report.

    Raises
    ------
    DataError
        If the configured data cannot be loaded.
    """
    ds = dataset if dataset is not None else load_dataset(config)
    ctx = _Context(ds, config)
    names = config.methods
    if config["run"]["parallel_methods"] and len(names) > 1:
        with ThreadPoolExecutor(max_workers=len(names)) as pool:
            results = list(pool.map(lambda m: _run_method(m, ctx), names))
    else:
        results = [_run_method(m, ctx) for m in names]
    methods = {r.name: r for r in results}

    stats = dataset_stats(ds)
    provenance = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "version": __version__,
        "output_dir": str(config.output_dir),
        "dataset": {**stats, "start": str(ds.timestamps[0]), "end": str(ds.timestamps[-1]),
                    "invalid_fraction": ds.invalid_fraction()},
        "reference": REFERENCE,
    }
    if ds.report is not None:
        provenance["load_report"] = ds.report.to_dict()
    report = Report(methods, provenance, _comparison(ds, methods),
                    generated_at=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    if write:
        report.write(config.output_dir)
    return report


# ------------------------------------------------------------- plot data

def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def trimmed_indices(abs_errors, fraction: float = TRIM_FRACTION) -> np.ndarray:
    """Indices kept after dropping the ``fraction`` largest absolute errors."""
    e = np.asarray(abs_errors, dtype=float)
    drop = int(math.ceil(fraction * e.size))
    keep = np.argsort(e, kind="stable")[:e.size - drop]
    return np.sort(keep)


def emit_plot_data(report: Report, directory) -> list[Path]:
    """Write one CSV per figure family into ``directory``; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, header, rows):
        path = directory / name
        _write_rows(path, header, rows)
        written.append(path)

    for m, r in report.methods.items():
        if r.status != "ok":
            continue
        ev = r.result
        stamps = [str(t) for t in ev.timestamps] if ev.timestamps is not None else [""] * ev.n
        real = [float(v) for v in ev.real]
        pred = [float(v) for v in ev.predicted]
        err = ev.abs_errors
        emit(f"predictions_{m}.csv", ["timestamp", "real", "predicted"],
             zip(stamps, real, pred))
        emit(f"errors_{m}.csv", ["real", "abs_error"], zip(real, map(float, err)))
        keep = trimmed_indices(err)
        emit(f"errors_{m}_trimmed.csv", ["real", "abs_error"],
             ((real[i], float(err[i])) for i in keep))
        if r.importance:
            emit(f"importance_{m}.csv", ["feature", "share"], r.importance)
        if "cv" in r.curves:
            emit("cv_min_leaf.csv", ["min_leaf", "mae", "mse"], r.curves["cv"])
        if "oob" in r.curves:
            emit("oob_curve.csv", ["n_trees", "oob_mae"],
                 ((i + 1, float(v)) for i, v in enumerate(r.curves["oob"])))
        if "boost" in r.curves:
            emit("boost_curve.csv",
                 ["learning_rate", "max_splits", "iteration", "train_mae", "test_mae"],
                 ((rate, splits, i, float(a), float(b))
                  for rate, splits, tr, te in r.curves["boost"]
                  for i, (a, b) in enumerate(zip(tr, te))))
        if "trace" in r.curves:
            path = directory / "narx_trace.csv"
            r.curves["trace"].to_csv(path)
            written.append(path)
    return written
