"""Short-term electricity price forecasting on aligned market data.

Subset ARIMA with rolling-origin backtesting, regression trees with bagging
and least-squares boosting, and a NARX network, compared on a shared
feature layout with MAE/RMSE reporting.
"""

__version__ = "0.1.0"

from .core import MarketDataset, RangeError, Stream  # noqa: E402
from .metrics import EvalResult, mae, rmse  # noqa: E402

__all__ = ["MarketDataset", "RangeError", "Stream", "EvalResult", "mae", "rmse", "__version__"]
