"""Time-series data model shared by every forecaster.

Timestamps are naive ``datetime`` objects on a 15-minute grid. Streams keep
their values on a regular native grid (15 or 60 minutes) together with a
validity mask; nothing is ever imputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

STEP_MINUTES = 15
STEPS_PER_HOUR = 60 // STEP_MINUTES
STEPS_PER_DAY = 24 * STEPS_PER_HOUR

CALENDAR_FIELDS = ("year", "month", "day_of_year", "day_of_week", "hour", "quarter")
STREAM_NAMES = ("rt_price", "rt_demand", "demand_forecast", "da_price", "wind")
HOURLY_STREAMS = ("demand_forecast", "da_price", "wind")


class RangeError(IndexError):
    """Raised when a window or lookup falls outside a stream's span."""


def to_timestamp(value) -> datetime:
    """Coerce ``value`` to a naive datetime on the 15-minute grid.

    Accepts ``datetime``, ``numpy.datetime64`` or an ISO-8601 string.
    """
    if isinstance(value, np.datetime64):
        value = value.astype("datetime64[m]").item()
    elif isinstance(value, str):
        value = datetime.fromisoformat(value)
    elif not isinstance(value, datetime):
        raise TypeError(f"cannot interpret {value!r} as a timestamp")
    if value.tzinfo is not None:
        raise ValueError("timestamps must be time-zone naive")
    if value.minute % STEP_MINUTES or value.second or value.microsecond:
        raise ValueError(f"{value} is not on the 15-minute grid")
    return value


def calendar_fields(t) -> dict[str, int]:
    """Calendar fields of a timestamp (day_of_week: Monday=0)."""
    t = to_timestamp(t)
    return {
        "year": t.year,
        "month": t.month,
        "day_of_year": t.timetuple().tm_yday,
        "day_of_week": t.weekday(),
        "hour": t.hour,
        "quarter": t.minute // STEP_MINUTES,
    }


def calendar_matrix(times: np.ndarray) -> np.ndarray:
    """Vectorised :func:`calendar_fields` for a ``datetime64`` array.

    Returns an integer array of shape ``(len(times), 6)`` ordered as
    :data:`CALENDAR_FIELDS`.
    """
    minutes = np.asarray(times, dtype="datetime64[m]")
    days = minutes.astype("datetime64[D]")
    years = days.astype("datetime64[Y]")
    months = days.astype("datetime64[M]")
    out = np.empty((minutes.size, 6), dtype=np.int64)
    out[:, 0] = years.astype(np.int64) + 1970
    out[:, 1] = months.astype(np.int64) % 12 + 1
    out[:, 2] = (days - years.astype("datetime64[D]")).astype(np.int64) + 1
    # 1970-01-01 was a Thursday
    out[:, 3] = (days.astype(np.int64) + 3) % 7
    minute_of_day = (minutes - days.astype("datetime64[m]")).astype(np.int64)
    out[:, 4] = minute_of_day // 60
    out[:, 5] = (minute_of_day % 60) // STEP_MINUTES
    return out


def _readonly(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Stream:
    """A regularly sampled series with a validity mask.

    Parameters
    ----------
    name : str
        Stream identifier, e.g. ``"rt_price"``.
    resolution : int
        Sampling interval in minutes, 15 or 60.
    start : datetime
        Timestamp of the first sample.
    values : array-like of float
    valid : array-like of bool, optional
        Defaults to all-valid.
    """

    name: str
    resolution: int
    start: datetime
    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        if self.resolution not in (15, 60):
            raise ValueError(f"resolution must be 15 or 60 minutes, got {self.resolution}")
        start = to_timestamp(self.start)
        if self.resolution == 60 and start.minute:
            raise ValueError("hourly streams must start on the hour")
        values = _readonly(self.values, float)
        if values.ndim != 1:
            raise ValueError("stream values must be one-dimensional")
        valid = np.ones(values.shape, bool) if self.valid is None else self.valid
        valid = _readonly(valid, bool)
        if valid.shape != values.shape:
            raise ValueError("valid mask must match values in length")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return self.values.size

    @property
    def step(self) -> timedelta:
        return timedelta(minutes=self.resolution)

    @property
    def end(self) -> datetime:
        """Timestamp of the last sample."""
        return self.start + (len(self) - 1) * self.step

    @property
    def timestamps(self) -> np.ndarray:
        base = np.datetime64(self.start, "m")
        return base + np.arange(len(self)) * np.timedelta64(self.resolution, "m")

    def index_of(self, t) -> int:
        """Index of the sample whose interval contains ``t``."""
        t = to_timestamp(t)
        offset = (t - self.start) // timedelta(minutes=1)
        idx = offset // self.resolution
        if offset < 0 or idx >= len(self):
            raise RangeError(f"{t} outside {self.name} span [{self.start}, {self.end}]")
        return int(idx)


def slice_window(stream: Stream, t, past_steps: int, future_steps: int = 0,
                 include_t: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Values and validity flags around ``t`` at the stream's native step.

    The past part covers steps ``t-past_steps .. t-1``. When ``include_t`` is
    set, step ``t`` follows, then ``t+1 .. t+future_steps``. Without
    ``include_t`` the future part is ``t .. t+future_steps-1``, so that
    consecutive calls tile the stream.

    Raises
    ------
    RangeError
        If any requested step lies outside the stream.
    """
    if past_steps < 0 or future_steps < 0:
        raise ValueError("window sizes must be non-negative")
    i = stream.index_of(t)
    lo = i - past_steps
    hi = i + future_steps + (1 if include_t else 0)
    if lo < 0 or hi > len(stream):
        raise RangeError(
            f"window [{lo}, {hi}) around {t} exceeds {stream.name} of length {len(stream)}"
        )
    return stream.values[lo:hi], stream.valid[lo:hi]


def hourly_at(stream: Stream, t) -> tuple[float, bool]:
    """Value of an hourly stream for the hour enclosing 15-minute ``t``."""
    if stream.resolution != 60:
        raise ValueError(f"{stream.name} is not an hourly stream")
    i = stream.index_of(t)
    return float(stream.values[i]), bool(stream.valid[i])


def _floor_hour(t: datetime) -> datetime:
    return t.replace(minute=0)


@dataclass(frozen=True, eq=False)
class MarketDataset:
    """Aligned real-time (15-min) and hourly market streams over one span.

    All streams cover ``[start, end]``; hourly streams cover every hour that
    intersects the span.
    """

    rt_price: Stream
    rt_demand: Stream
    demand_forecast: Stream
    da_price: Stream
    wind: Stream
    report: object = field(default=None, repr=False)

    def __post_init__(self):
        start, end = self.rt_price.start, self.rt_price.end
        for s in (self.rt_price, self.rt_demand):
            if s.resolution != 15 or s.start != start or s.end != end:
                raise ValueError(f"{s.name} must be 15-minute and cover [{start}, {end}]")
        h0, h1 = _floor_hour(start), _floor_hour(end)
        for name in HOURLY_STREAMS:
            s = getattr(self, name)
            if s.resolution != 60 or s.start != h0 or s.end != h1:
                raise ValueError(f"{name} must be hourly and cover [{h0}, {h1}]")

    @property
    def start(self) -> datetime:
        return self.rt_price.start

    @property
    def end(self) -> datetime:
        return self.rt_price.end

    @property
    def span(self) -> tuple[datetime, datetime]:
        return self.start, self.end

    @property
    def n_steps(self) -> int:
        return len(self.rt_price)

    @property
    def timestamps(self) -> np.ndarray:
        return self.rt_price.timestamps

    def stream(self, name: str) -> Stream:
        if name not in STREAM_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def streams(self) -> dict[str, Stream]:
        return {name: getattr(self, name) for name in STREAM_NAMES}

    def step_index(self, t) -> int:
        return self.rt_price.index_of(t)

    def hour_index(self, steps) -> np.ndarray:
        """Map 15-minute step indices to indices into the hourly streams."""
        offset = self.start.minute // STEP_MINUTES
        return (np.asarray(steps) + offset) // STEPS_PER_HOUR

    def hourly_values(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Hourly stream broadcast onto the 15-minute grid (values, valid)."""
        s = self.stream(name)
        if s.resolution == 15:
            return s.values, s.valid
        h = self.hour_index(np.arange(self.n_steps))
        return s.values[h], s.valid[h]

    def invalid_fraction(self) -> dict[str, float]:
        return {name: float(1.0 - s.valid.mean()) for name, s in self.streams().items()}
