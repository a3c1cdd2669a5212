"""Point and aggregate accuracy metrics for price forecasts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def abs_error(real, pred):
    return abs(real - pred)


def abs_pct_error(real, pred):
    """Absolute percentage error as a ratio; ``None`` when ``real == 0``."""
    if real == 0:
        return None
    return abs(real - pred) / abs(real)


def _pairs(real, pred, valid=None):
    real = np.asarray(real, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    if real.shape != pred.shape:
        raise ValueError(f"length mismatch: {real.size} real vs {pred.size} predicted")
    if valid is not None:
        valid = np.asarray(valid, dtype=bool).ravel()
        real, pred = real[valid], pred[valid]
    if real.size == 0:
        raise ValueError("no valid pairs to aggregate")
    return real, pred


def mae(real, pred, valid=None) -> float:
    """Mean absolute error with compensated summation.

    Entries where ``valid`` is false are excluded from ``N``.
    """
    real, pred = _pairs(real, pred, valid)
    return math.fsum(np.abs(real - pred)) / real.size


def rmse(real, pred, valid=None) -> float:
    real, pred = _pairs(real, pred, valid)
    d = real - pred
    return math.sqrt(math.fsum(d * d) / real.size)


def mape(real, pred, valid=None) -> float:
    """Mean absolute percentage error over points with nonzero ``real``.

    Reporting only; never used as a training loss.
    """
    real, pred = _pairs(real, pred, valid)
    keep = real != 0
    if not keep.any():
        raise ValueError("every real value is zero")
    return math.fsum(np.abs(real[keep] - pred[keep]) / np.abs(real[keep])) / keep.sum()


@dataclass
class EvalResult:
    """Aggregate errors plus an optional per-point trace."""

    mae: float
    rmse: float
    n: int
    timestamps: np.ndarray | None = field(default=None, repr=False)
    real: np.ndarray | None = field(default=None, repr=False)
    predicted: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_pairs(cls, real, pred, valid=None, timestamps=None, keep_points=True):
        real = np.asarray(real, dtype=float).ravel()
        pred = np.asarray(pred, dtype=float).ravel()
        if valid is not None:
            valid = np.asarray(valid, dtype=bool).ravel()
            real, pred = real[valid], pred[valid]
            if timestamps is not None:
                timestamps = np.asarray(timestamps)[valid]
        result = cls(mae(real, pred), rmse(real, pred), int(real.size))
        if keep_points:
            result.real, result.predicted = real, pred
            result.timestamps = None if timestamps is None else np.asarray(timestamps)
        return result

    @property
    def abs_errors(self) -> np.ndarray:
        if self.real is None:
            raise ValueError("per-point trace was not kept")
        return np.abs(self.real - self.predicted)

    def summary(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "n": self.n}
