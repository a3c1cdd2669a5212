"""Windowed feature vectors for a target timestamp.

For a target step ``t`` and windows ``w_past`` / ``w_future`` (hours):

* calendar fields of ``t``;
* ``rt_price`` and ``rt_demand`` at 15-minute steps ``t-4*w_past .. t-1``;
* ``wind`` for the ``w_past`` completed hours before the hour of ``t``;
* ``demand_forecast`` and ``da_price`` for the ``w_past`` hours ending with
  the hour of ``t`` followed by ``w_future`` hours ahead.

Nothing at or after ``t`` is read from the real-time streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (
    CALENDAR_FIELDS,
    STEPS_PER_HOUR,
    STREAM_NAMES,
    MarketDataset,
    RangeError,
    calendar_fields,
    calendar_matrix,
    to_timestamp,
)

MAX_FUTURE_HOURS = 24


class EmptyMatrixError(ValueError):
    """No target step in the requested range has a fully valid window."""


@dataclass(frozen=True)
class FeatureSpec:
    """Window sizes (hours), included streams and the derived column registry."""

    w_past: int = 8
    w_future: int = 4
    include: frozenset = frozenset(STREAM_NAMES)
    calendar: bool = True

    def __post_init__(self):
        if self.w_past < 0 or self.w_future < 0:
            raise ValueError("windows must be non-negative")
        if self.w_future > MAX_FUTURE_HOURS:
            raise ValueError("day-ahead information reaches at most 24 hours forward")
        include = frozenset(self.include)
        unknown = include - set(STREAM_NAMES)
        if unknown:
            raise ValueError(f"unknown streams {sorted(unknown)}")
        object.__setattr__(self, "include", include)

    def blocks(self) -> list[tuple[str, str, np.ndarray]]:
        """(stream, kind, offsets) per block in registry order.

        ``kind`` is ``"step"`` for offsets in 15-minute steps relative to
        ``t`` and ``"hour"`` for offsets in hours relative to the hour of
        ``t``.
        """
        lags = np.arange(-STEPS_PER_HOUR * self.w_past, 0)
        out = []
        for name in ("rt_price", "rt_demand"):
            if name in self.include and lags.size:
                out.append((name, "step", lags))
        if "wind" in self.include and self.w_past:
            out.append(("wind", "hour", np.arange(-self.w_past, 0)))
        fwd = np.arange(-self.w_past + 1, self.w_future + 1)
        for name in ("demand_forecast", "da_price"):
            if name in self.include and fwd.size:
                out.append((name, "hour", fwd))
        return out

    @property
    def registry(self) -> list[str]:
        names = list(CALENDAR_FIELDS) if self.calendar else []
        for name, kind, offsets in self.blocks():
            if kind == "step":
                names += [f"{name}_lag{-k}" for k in offsets]
            else:
                names += [f"{name}_h{k:+d}" for k in offsets]
        return names

    def margins(self) -> tuple[int, int]:
        """Steps needed before and after ``t`` for the widest block."""
        return STEPS_PER_HOUR * self.w_past, STEPS_PER_HOUR * (self.w_future + 1)

    def registry_json(self) -> str:
        return json.dumps(self.registry)


@dataclass
class FeatureMatrix:
    """Feature rows with aligned targets, timestamps and dataset step indices."""

    X: np.ndarray
    y: np.ndarray
    timestamps: np.ndarray
    steps: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.X[idx], self.y[idx], self.timestamps[idx], self.steps[idx],
                             self.feature_names)


def _block_indices(ds: MarketDataset, steps: np.ndarray, kind: str, offsets: np.ndarray):
    if kind == "step":
        return steps[:, None] + offsets[None, :]
    return ds.hour_index(steps)[:, None] + offsets[None, :]


def _in_range(ds: MarketDataset, spec: FeatureSpec, steps: np.ndarray) -> np.ndarray:
    ok = (steps >= 0) & (steps < ds.n_steps)
    n_hours = len(ds.da_price)
    for name, kind, offsets in spec.blocks():
        idx = _block_indices(ds, steps, kind, offsets)
        limit = ds.n_steps if kind == "step" else n_hours
        ok &= (idx.min(axis=1) >= 0) & (idx.max(axis=1) < limit)
    return ok


def _gather(ds: MarketDataset, spec: FeatureSpec, steps: np.ndarray, with_target: bool = True):
    """Raw feature rows, row validity and targets for in-range ``steps``.

    With ``with_target=False`` row validity ignores the price at the step
    itself.
    """
    if with_target:
        valid = ds.rt_price.valid[steps].copy()
    else:
        valid = np.ones(steps.size, dtype=bool)
    cols = []
    if spec.calendar:
        cols.append(calendar_matrix(ds.timestamps[steps]).astype(float))
    for name, kind, offsets in spec.blocks():
        s = ds.stream(name)
        idx = _block_indices(ds, steps, kind, offsets)
        cols.append(s.values[idx])
        valid &= s.valid[idx].all(axis=1)
    X = np.hstack(cols) if cols else np.empty((steps.size, 0))
    return X, valid, ds.rt_price.values[steps]


def build_vector(ds: MarketDataset, t, spec: FeatureSpec):
    """Feature vector for target ``t``, or ``None`` when its window is invalid.

    Raises
    ------
    RangeError
        If the windows do not fit inside the dataset span.
    """
    t = to_timestamp(t)
    step = ds.step_index(t)
    steps = np.array([step])
    if not _in_range(ds, spec, steps)[0]:
        raise RangeError(f"insufficient margin around {t} for {spec}")
    parts = [list(calendar_fields(t).values())] if spec.calendar else []
    valid = bool(ds.rt_price.valid[step])
    for name, kind, offsets in spec.blocks():
        s = ds.stream(name)
        idx = _block_indices(ds, steps, kind, offsets)[0]
        parts.append(s.values[idx])
        valid &= bool(s.valid[idx].all())
    if not valid:
        return None
    return np.concatenate([np.asarray(p, dtype=float) for p in parts]) if parts else np.empty(0)


def build_matrix(ds: MarketDataset, spec: FeatureSpec, start=None, end=None,
                 allow_empty: bool = False) -> FeatureMatrix:
    """Rows for every 15-minute target in ``[start, end]`` with a valid window.

    Targets without enough margin are skipped silently, as are targets whose
    window or own price is invalid.
    """
    lo = 0 if start is None else ds.step_index(start)
    hi = ds.n_steps - 1 if end is None else ds.step_index(end)
    steps = np.arange(lo, hi + 1)
    steps = steps[_in_range(ds, spec, steps)]
    X, valid, y = _gather(ds, spec, steps)
    steps = steps[valid]
    if steps.size == 0 and not allow_empty:
        raise EmptyMatrixError("no usable rows in range")
    return FeatureMatrix(X[valid], y[valid], ds.timestamps[steps], steps, spec.registry)


class WindowFeatures(BaseEstimator, TransformerMixin):
    """Transformer from target timestamps to feature rows over a fixed dataset.

    ``transform`` returns NaN rows for targets whose window is invalid so the
    output stays aligned with the input.
    """

    def __init__(self, dataset=None, w_past=8, w_future=4, calendar=True):
        self.dataset = dataset
        self.w_past = w_past
        self.w_future = w_future
        self.calendar = calendar

    def fit(self, X=None, y=None):
        self.spec_ = FeatureSpec(self.w_past, self.w_future, calendar=self.calendar)
        self.feature_names_in_ = None
        return self

    def get_feature_names_out(self, input_features=None):
        return np.array(self.spec_.registry, dtype=object)

    def transform(self, X):
        times = np.asarray(X, dtype="datetime64[m]").ravel()
        out = np.full((times.size, len(self.spec_.registry)), np.nan)
        for i, t in enumerate(times):
            v = build_vector(self.dataset, t, self.spec_)
            if v is not None:
                out[i] = v
        return out
