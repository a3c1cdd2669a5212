"""Recurrent network with exogenous inputs (NARX), trained open loop.

The input for target step ``t`` is the exogenous block for steps
``t-W+1 .. t`` followed by the true price and demand history at steps
``t-D .. t-1``. The exogenous row of a step is its feature-registry vector
without the real-time price and demand lags. Hidden layers use the logistic
sigmoid and the single output is linear. Inputs and target are z-scored
with constants frozen on the training block.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import MarketDataset, RangeError, to_timestamp
from .features import FeatureSpec, _gather, _in_range
from .metrics import EvalResult

EXOGENOUS_STREAMS = frozenset({"wind", "demand_forecast", "da_price"})
SD_FLOOR = 1e-8
LOSSES = ("MAE", "MSE")


class NarxDivergenceError(RuntimeError):
    """Training loss became NaN or infinite. The partial trace is attached."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class NarxConfig:
    """Layout, architecture and training settings.

    ``W`` and ``D`` are in 15-minute steps, ``patience`` counts successive
    epochs with a rising validation loss.
    """

    W: int = 16
    D: int = 16
    hidden_layers: int = 1
    hidden_units: int = 10
    loss: str = "MAE"
    patience: int = 6
    max_epochs: int = 100
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    lr_decay: float = 0.5
    plateau_epochs: int = 3
    seed: int = 0
    n_targets: int = 1
    exogenous: FeatureSpec = field(
        default_factory=lambda: FeatureSpec(include=EXOGENOUS_STREAMS))

    def __post_init__(self):
        if self.W < 1 or self.D < 1:
            raise ValueError("W and D must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.hidden_layers not in (1, 2, 3):
            raise ValueError("hidden_layers must be 1, 2 or 3")
        if self.hidden_units < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("hidden_units, batch_size and max_epochs must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.n_targets != 1:
            raise ValueError("only a single target is supported")
        if self.exogenous.include & {"rt_price", "rt_demand"}:
            raise ValueError("exogenous block must not contain real-time streams")

    @property
    def n_exogenous(self) -> int:
        return len(self.exogenous.registry)

    @property
    def n_inputs(self) -> int:
        return self.W * self.n_exogenous + 2 * self.D

    def input_names(self) -> list[str]:
        names = [f"{n}@t{s - self.W + 1:+d}" for s in range(self.W)
                 for n in self.exogenous.registry]
        names += [f"rt_price@t{-k:+d}" for k in range(self.D, 0, -1)]
        names += [f"rt_demand@t{-k:+d}" for k in range(self.D, 0, -1)]
        return names


# ---------------------------------------------------------------- inputs

def _exogenous_table(ds: MarketDataset, spec: FeatureSpec):
    """Exogenous row and validity for every dataset step (invalid off range)."""
    steps = np.arange(ds.n_steps)
    ok = _in_range(ds, spec, steps)
    X = np.zeros((ds.n_steps, len(spec.registry)))
    valid = np.zeros(ds.n_steps, dtype=bool)
    Xs, vs, _ = _gather(ds, spec, steps[ok], with_target=False)
    X[ok], valid[ok] = Xs, vs
    return X, valid


def build_inputs(ds: MarketDataset, cfg: NarxConfig, start=None, end=None):
    """Raw input rows for every valid target in ``[start, end]``.

    Returns ``(Z, y, steps)``. Targets without margin or with any invalid
    input or target value are skipped.
    """
    lo = 0 if start is None else ds.step_index(start)
    hi = ds.n_steps - 1 if end is None else ds.step_index(end)
    first = max(cfg.W - 1, cfg.D)
    steps = np.arange(max(lo, first), hi + 1)
    exo, exo_valid = _exogenous_table(ds, cfg.exogenous)
    win = steps[:, None] + np.arange(-cfg.W + 1, 1)[None, :]
    hist = steps[:, None] + np.arange(-cfg.D, 0)[None, :]
    price, demand = ds.rt_price, ds.rt_demand
    valid = (exo_valid[win].all(axis=1) & price.valid[hist].all(axis=1)
             & demand.valid[hist].all(axis=1) & price.valid[steps])
    steps, win, hist = steps[valid], win[valid], hist[valid]
    Z = np.hstack([exo[win].reshape(steps.size, -1), price.values[hist], demand.values[hist]])
    return Z, price.values[steps], steps


def assemble_input(ds: MarketDataset, t, cfg: NarxConfig, net: "NarxNetwork | None" = None):
    """Input vector for target ``t``, or ``None`` for an invalid window.

    The vector is raw unless ``net`` is given, in which case its frozen
    input scaling is applied.

    Raises
    ------
    RangeError
        If the windows do not fit inside the dataset span.
    """
    step = ds.step_index(to_timestamp(t))
    win = np.arange(step - cfg.W + 1, step + 1)
    if step - max(cfg.W - 1, cfg.D) < 0 or not _in_range(ds, cfg.exogenous, win).all():
        raise RangeError(f"insufficient margin around {t}")
    exo, exo_valid, _ = _gather(ds, cfg.exogenous, win, with_target=False)
    hist = np.arange(step - cfg.D, step)
    price, demand = ds.rt_price, ds.rt_demand
    if not (exo_valid.all() and price.valid[hist].all() and demand.valid[hist].all()):
        return None
    z = np.concatenate([exo.ravel(), price.values[hist], demand.values[hist]])
    return z if net is None else net.scale_inputs(z)


def fit_scaling(Z, y):
    """Per-column mean and SD (floored) of inputs and target."""
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    x_sd = np.maximum(Z.std(axis=0), SD_FLOOR)
    y_sd = max(float(y.std()), SD_FLOOR)
    return Z.mean(axis=0), x_sd, float(y.mean()), y_sd


# --------------------------------------------------------------- network

@dataclass
class NarxNetwork:
    """Weights, biases and frozen scaling of a sigmoid MLP with linear output.

    ``weights[l]`` has shape ``(n_in, n_out)`` so a layer computes
    ``a @ W + b``.
    """

    weights: list
    biases: list
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: float = 0.0
    y_sd: float = 1.0
    input_names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and paired")
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError("bias shape must match layer output width")
        for W0, W1 in zip(self.weights[:-1], self.weights[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise ValueError("layer dimensions do not chain")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have one unit")
        if self.x_mean.shape != (self.n_inputs,) or self.x_sd.shape != (self.n_inputs,):
            raise ValueError("scaling constants do not match the input width")

    @classmethod
    def initialize(cls, n_inputs, hidden_units=10, hidden_layers=1, rng=None, scaling=None):
        """Uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, zero biases."""
        rng = np.random.default_rng(rng)
        sizes = [n_inputs] + [hidden_units] * hidden_layers + [1]
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            r = 1.0 / math.sqrt(a)
            weights.append(rng.uniform(-r, r, size=(a, b)))
            biases.append(np.zeros(b))
        if scaling is None:
            scaling = (np.zeros(n_inputs), np.ones(n_inputs), 0.0, 1.0)
        return cls(weights, biases, *scaling)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def scale_inputs(self, Z):
        return (np.asarray(Z, dtype=float) - self.x_mean) / self.x_sd

    def scale_target(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_sd

    def unscale_target(self, yz):
        return np.asarray(yz, dtype=float) * self.y_sd + self.y_mean

    def _activations(self, Zs):
        acts = [np.atleast_2d(Zs)]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            acts.append(expit(acts[-1] @ W + b))
        return acts

    def forward_scaled(self, Zs) -> np.ndarray:
        """Output in scaled target units for already scaled inputs."""
        a = self._activations(Zs)[-1]
        return (a @ self.weights[-1] + self.biases[-1])[:, 0]

    def forward(self, Z) -> np.ndarray:
        """Predictions in USD/MWh for raw input rows."""
        return self.unscale_target(self.forward_scaled(self.scale_inputs(Z)))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for W, b in zip(self.weights, self.biases) for p in (W, b)])

    def set_flat(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        k = 0
        for W, b in zip(self.weights, self.biases):
            for p in (W, b):
                p[...] = theta[k:k + p.size].reshape(p.shape)
                k += p.size

    def copy(self) -> "NarxNetwork":
        return NarxNetwork([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           self.x_mean.copy(), self.x_sd.copy(), self.y_mean, self.y_sd,
                           list(self.input_names))

    def to_dict(self) -> dict:
        return {
            "layout": [W.shape[0] for W in self.weights] + [1],
            "activation": "sigmoid",
            "output": "linear",
            "input_names": list(self.input_names),
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "y_mean": self.y_mean,
            "y_sd": self.y_sd,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "NarxNetwork":
        return cls([np.array(W, dtype=float) for W in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]],
                   np.array(d["x_mean"], dtype=float), np.array(d["x_sd"], dtype=float),
                   float(d["y_mean"]), float(d["y_sd"]), list(d.get("input_names", [])))


def forward(net: NarxNetwork, Z) -> np.ndarray:
    return net.forward(Z)


def loss(net: NarxNetwork, Zs, yz, kind: str = "MAE") -> float:
    """MAE or MSE in scaled target space for scaled inputs ``Zs``."""
    e = net.forward_scaled(Zs) - np.asarray(yz, dtype=float)
    if kind == "MAE":
        return math.fsum(np.abs(e)) / e.size
    if kind == "MSE":
        return math.fsum(e * e) / e.size
    raise ValueError(f"unknown loss {kind!r}")


def gradient(net: NarxNetwork, Zs, yz, kind: str = "MAE"):
    """Reverse-mode gradient of ``loss`` as ``(dW list, db list)``.

    The MAE subgradient at an exactly zero error is 0.
    """
    yz = np.asarray(yz, dtype=float)
    if yz.size == 0:
        raise ValueError("empty batch")
    acts = net._activations(Zs)
    out = (acts[-1] @ net.weights[-1] + net.biases[-1])[:, 0]
    e = out - yz
    if kind == "MAE":
        delta = np.sign(e) / e.size
    elif kind == "MSE":
        delta = 2.0 * e / e.size
    else:
        raise ValueError(f"unknown loss {kind!r}")
    delta = delta[:, None]
    dWs, dbs = [], []
    for layer in range(len(net.weights) - 1, -1, -1):
        a = acts[layer]
        dWs.append(a.T @ delta)
        dbs.append(delta.sum(axis=0))
        if layer:
            delta = (delta @ net.weights[layer].T) * a * (1.0 - a)
    return dWs[::-1], dbs[::-1]


def flat_gradient(net: NarxNetwork, Zs, yz, kind: str = "MAE") -> np.ndarray:
    dWs, dbs = gradient(net, Zs, yz, kind)
    return np.concatenate([p.ravel() for W, b in zip(dWs, dbs) for p in (W, b)])


# -------------------------------------------------------------- training

@dataclass
class TrainTrace:
    """Per-epoch losses (scaled units), stop reason and best snapshot."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_weights: NarxNetwork | None = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            w.writerow([i, repr(a), repr(b)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _sgd(net, Zs, yz, Vs, vz, cfg: NarxConfig, rng, val_loss_hook=None):
    trace = TrainTrace()
    velocity = np.zeros(net.n_params)
    lr = cfg.learning_rate
    best = math.inf
    rises = 0
    stale = 0
    prev = math.inf
    n = yz.size
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        theta = net.get_flat()
        for s in range(0, n, cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            g = flat_gradient(net, Zs[b], yz[b], cfg.loss)
            velocity = cfg.momentum * velocity - lr * g
            theta = theta + velocity
            net.set_flat(theta)
        tr = loss(net, Zs, yz, cfg.loss)
        va = loss(net, Vs, vz, cfg.loss)
        if val_loss_hook is not None:
            va = float(val_loss_hook(epoch, va))
        trace.train_loss.append(tr)
        trace.val_loss.append(va)
        trace.learning_rate.append(lr)
        if not (math.isfinite(tr) and math.isfinite(va)):
            trace.stop_reason = "diverged"
            raise NarxDivergenceError(f"loss diverged at epoch {epoch}", trace)
        if va < best:
            best, stale = va, 0
            trace.best_epoch = epoch
            trace.best_weights = net.copy()
        else:
            stale += 1
            if stale >= cfg.plateau_epochs:
                lr *= cfg.lr_decay
                stale = 0
        rises = rises + 1 if va > prev else 0
        prev = va
        if rises >= cfg.patience:
            trace.stop_reason = "patience"
            break
    else:
        trace.stop_reason = "max_epochs"
    return trace


def split_blocks(n: int, fractions=(0.70, 0.15, 0.15)):
    """Contiguous train/validation/test index blocks in time order."""
    if n < 3:
        raise ValueError("need at least three rows to split")
    a = int(round(fractions[0] * n))
    b = int(round((fractions[0] + fractions[1]) * n))
    a = min(max(a, 1), n - 2)
    b = min(max(b, a + 1), n - 1)
    return np.arange(a), np.arange(a, b), np.arange(b, n)


def fit_network(Z_train, y_train, Z_val, y_val, cfg: NarxConfig, val_loss_hook=None,
                input_names=None):
    """Train on raw rows with scaling frozen on the training block."""
    scaling = fit_scaling(Z_train, y_train)
    rng = np.random.default_rng(cfg.seed)
    net = NarxNetwork.initialize(Z_train.shape[1], cfg.hidden_units, cfg.hidden_layers,
                                 rng=rng, scaling=scaling)
    if input_names is not None:
        net.input_names = list(input_names)
    trace = _sgd(net, net.scale_inputs(Z_train), net.scale_target(y_train),
                 net.scale_inputs(Z_val), net.scale_target(y_val), cfg, rng, val_loss_hook)
    return trace.best_weights, trace


@dataclass
class NarxSplit:
    """Step indices of the contiguous train/validation/test blocks."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def train(ds: MarketDataset, cfg: NarxConfig = NarxConfig(), val_loss_hook=None):
    """Assemble inputs, split 70/15/15 in time order and train.

    Returns ``(network, trace, split)`` where ``split`` holds dataset step
    indices of each block.
    """
    Z, y, steps = build_inputs(ds, cfg)
    tr, va, te = split_blocks(y.size)
    net, trace = fit_network(Z[tr], y[tr], Z[va], y[va], cfg, val_loss_hook,
                             input_names=cfg.input_names())
    return net, trace, NarxSplit(steps[tr], steps[va], steps[te])


def predict_series(net: NarxNetwork, ds: MarketDataset, cfg: NarxConfig, start=None, end=None,
                   steps=None):
    """Open-loop one-step predictions over a range.

    The history block always holds observed values, never predictions.
    ``steps`` restricts the output to the given dataset step indices.
    Returns ``(predictions, EvalResult)``.
    """
    Z, y, got = build_inputs(ds, cfg, start, end)
    if steps is not None:
        keep = np.isin(got, steps)
        Z, y, got = Z[keep], y[keep], got[keep]
    if y.size == 0:
        raise ValueError("no valid targets in range")
    pred = net.forward(Z)
    return pred, EvalResult.from_pairs(y, pred, timestamps=ds.timestamps[got])


# ---------------------------------------------------------------- estimator

class NarxRegressor(BaseEstimator, RegressorMixin):
    """Estimator over pre-assembled input rows.

    Without explicit validation data the last ``validation_fraction`` of
    the rows (in given order) is held out for early stopping.
    """

    def __init__(self, hidden_layers=1, hidden_units=10, loss="MAE", patience=6,
                 max_epochs=100, learning_rate=1e-3, momentum=0.9, batch_size=64,
                 validation_fraction=0.15 / 0.85, random_state=0):
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.loss = loss
        self.patience = patience
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> NarxConfig:
        return NarxConfig(hidden_layers=self.hidden_layers, hidden_units=self.hidden_units,
                          loss=self.loss, patience=self.patience, max_epochs=self.max_epochs,
                          learning_rate=self.learning_rate, momentum=self.momentum,
                          batch_size=self.batch_size, seed=self.random_state)

    def fit(self, X, y, X_val=None, y_val=None, val_loss_hook=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * y.size)))
            if n_val >= y.size:
                raise ValueError("too few rows for a validation block")
            X, X_val, y, y_val = X[:-n_val], X[-n_val:], y[:-n_val], y[-n_val:]
        else:
            X_val, y_val = check_X_y(X_val, y_val, y_numeric=True)
        self.network_, self.trace_ = fit_network(X, y, X_val, y_val, self._config(),
                                                 val_loss_hook)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X)
        return self.network_.forward(X)
