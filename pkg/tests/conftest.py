from datetime import datetime

import numpy as np
import pytest

from gridcast.core import HOURLY_STREAMS, STEPS_PER_HOUR, MarketDataset, Stream


def make_dataset(n_hours=48, start=datetime(2014, 1, 1), price=10.0, demand=100.0,
                 hourly=5.0, valid=None):
    """Dataset from scalars or arrays; ``valid`` maps stream name -> mask."""
    n = n_hours * STEPS_PER_HOUR
    valid = valid or {}

    def arr(v, size):
        a = np.asarray(v, dtype=float)
        return np.full(size, float(a)) if a.ndim == 0 else a.copy()

    values = {"rt_price": arr(price, n), "rt_demand": arr(demand, n)}
    hourly = hourly if isinstance(hourly, dict) else {k: hourly for k in HOURLY_STREAMS}
    for name in HOURLY_STREAMS:
        values[name] = arr(hourly[name], n_hours)
    streams = {}
    for name, v in values.items():
        res = 60 if name in HOURLY_STREAMS else 15
        streams[name] = Stream(name, res, start, v, valid.get(name))
    return MarketDataset(**streams)


@pytest.fixture
def constant_ds():
    return make_dataset()


@pytest.fixture(scope="session")
def synth_small():
    from gridcast.ingest import SyntheticConfig, generate_synthetic
    return generate_synthetic(SyntheticConfig(seed=7, days=12))
