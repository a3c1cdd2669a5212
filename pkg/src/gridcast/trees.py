"""Regression trees and the bagged / least-squares boosted ensembles.

Trees grow best-first: the frontier leaf whose best split gives the largest
reduction in squared error is split next, so ``max_splits`` bounds the
number of internal nodes rather than the depth. Candidate thresholds are the
midpoints between consecutive distinct feature values; ties go to the lowest
feature index, then the lowest threshold. Rows with ``x < threshold`` go
left.
"""

from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.model_selection import KFold, ParameterGrid
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _splitter

LEAF = -1


@dataclass
class Tree:
    """Flat node arrays of a fitted regression tree.

    Internal nodes have ``feature >= 0``; leaves have ``feature == -1``.
    ``value`` holds the training-target mean of every node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    split_order: list[int] = field(default_factory=list)
    gains: list[float] = field(default_factory=list)
    n_features: int = 0

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_splits(self) -> int:
        return int((self.feature >= 0).sum())

    @property
    def n_leaves(self) -> int:
        return self.n_nodes - self.n_splits

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] < self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict_one(self, x) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] < self.threshold[i] else self.right[i]
        return float(self.value[i])

    def split_counts(self) -> np.ndarray:
        f = self.feature[self.feature >= 0]
        return np.bincount(f, minlength=self.n_features)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "split_order": list(self.split_order),
            "n_features": self.n_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], np.intp),
            np.asarray(d["threshold"], float),
            np.asarray(d["left"], np.intp),
            np.asarray(d["right"], np.intp),
            np.asarray(d["value"], float),
            np.asarray(d["n_samples"], np.intp),
            list(d.get("split_order", [])),
            [],
            int(d.get("n_features", 0)),
        )


def presort(X: np.ndarray) -> np.ndarray:
    """Row order per feature, shape ``(n_features, n_rows)``."""
    return np.argsort(X, axis=0, kind="stable").T.copy()


def _best_split(XT, y, order, min_leaf):
    """Best (gain, feature, threshold, n_left) for the rows in ``order``."""
    best, f, j = _splitter.best_split(XT, y, order, min_leaf)
    if f < 0:
        return None
    lo, hi = XT[f, order[f, j]], XT[f, order[f, j + 1]]
    thr = lo + (hi - lo) / 2.0
    if not lo < thr <= hi:
        thr = hi
    return float(best), int(f), float(thr), j + 1


def grow_tree(X, y, min_leaf: int = 1, max_splits: int | None = None,
              order: np.ndarray | None = None) -> Tree:
    """Grow a regression tree best-first on ``(X, y)``.

    Parameters
    ----------
    X : ndarray of shape (n_rows, n_features)
    y : ndarray of shape (n_rows,)
    min_leaf : int
        Minimum rows per leaf.
    max_splits : int or None
        Maximum number of internal nodes; ``None`` for unbounded.
    order : ndarray, optional
        Output of :func:`presort` for ``X``, reused across boosting stages.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if max_splits is not None and max_splits < 0:
        raise ValueError("max_splits must be >= 0 or None")
    n_rows, n_feat = X.shape
    XT = np.ascontiguousarray(X.T)
    if order is None:
        order = presort(X)

    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(rows):
        feature.append(LEAF)
        threshold.append(math.nan)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[rows].mean()) if rows.size else 0.0)
        count.append(rows.size)
        return len(feature) - 1

    heap = []
    pending = {}

    def consider(node, node_order):
        cand = _best_split(XT, y, node_order, min_leaf)
        if cand is not None:
            pending[node] = (node_order, cand)
            heapq.heappush(heap, (-cand[0], node))

    root = new_node(order[0] if n_feat else np.arange(n_rows))
    if n_feat:
        consider(root, order)
    scratch = np.zeros(n_rows, dtype=bool)
    split_order, gains = [], []
    limit = math.inf if max_splits is None else max_splits
    while heap and len(split_order) < limit:
        _, node = heapq.heappop(heap)
        node_order, (gain, f, thr, n_left) = pending.pop(node)
        rows = node_order[0]
        scratch[rows] = XT[f, rows] < thr
        left_order, right_order = _splitter.partition(node_order, scratch, n_left)
        scratch[rows] = False
        feature[node], threshold[node] = f, thr
        li = new_node(left_order[0])
        ri = new_node(right_order[0])
        left[node], right[node] = li, ri
        split_order.append(node)
        gains.append(gain)
        consider(li, left_order)
        consider(ri, right_order)

    return Tree(
        np.asarray(feature, np.intp),
        np.asarray(threshold, float),
        np.asarray(left, np.intp),
        np.asarray(right, np.intp),
        np.asarray(value, float),
        np.asarray(count, np.intp),
        split_order,
        gains,
        n_feat,
    )


def _usage_share(trees: list[Tree], n_features: int) -> np.ndarray:
    counts = np.zeros(n_features)
    for t in trees:
        counts += t.split_counts()[:n_features]
    total = counts.sum()
    return counts / total if total else counts


class _TreeModelMixin:
    def feature_importance_table(self, feature_names=None) -> list[tuple[str, float]]:
        share = self.feature_importances_
        names = feature_names if feature_names is not None else [f"x{i}" for i in range(share.size)]
        return list(zip(names, share.tolist()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class RegressionTree(_TreeModelMixin, RegressorMixin, BaseEstimator):
    """Single CART regression tree bounded by leaf size and split count.

    Parameters
    ----------
    min_leaf : int, default=6
    max_splits : int or None, default=50
    random_state : int or None
        Unused; kept so that the tree slots into seeded ensembles.
    """

    def __init__(self, min_leaf=6, max_splits=50, random_state=None):
        self.min_leaf = min_leaf
        self.max_splits = max_splits
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.tree_ = grow_tree(X, y, self.min_leaf, self.max_splits)
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=float)
        return self.tree_.predict(X)

    def apply(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.apply(check_array(X, dtype=float))

    @property
    def feature_importances_(self) -> np.ndarray:
        check_is_fitted(self, "tree_")
        return _usage_share([self.tree_], self.n_features_in_)

    def to_dict(self) -> dict:
        return {"kind": "tree", "params": self.get_params(), "tree": self.tree_.to_dict()}


class BaggedTrees(_TreeModelMixin, RegressorMixin, BaseEstimator):
    """Bootstrap-aggregated regression trees with out-of-bag analysis.

    Each member trains on ``n`` rows drawn with replacement from its own
    generator, spawned from ``random_state``, so results do not depend on the
    order in which members are fitted.
    """

    def __init__(self, n_estimators=60, min_leaf=1, max_splits=None, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.min_leaf = min_leaf
        self.max_splits = max_splits
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        n = X.shape[0]
        self.n_features_in_ = X.shape[1]
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_estimators)

        def member(seed):
            idx = np.random.default_rng(seed).integers(0, n, n)
            tree = grow_tree(X[idx], y[idx], self.min_leaf, self.max_splits)
            return tree, np.bincount(idx, minlength=n)

        if self.n_jobs == 1:
            members = [member(s) for s in seeds]
        else:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                members = list(pool.map(member, seeds))
        self.estimators_ = [m[0] for m in members]
        self.inbag_ = np.vstack([m[1] for m in members])
        return self

    @classmethod
    def from_trees(cls, trees: list[Tree], inbag) -> "BaggedTrees":
        """Assemble a bag from fitted trees and their in-bag count matrix."""
        model = cls(n_estimators=len(trees))
        model.estimators_ = list(trees)
        model.inbag_ = np.asarray(inbag, dtype=np.intp)
        model.n_features_in_ = max(t.n_features for t in trees)
        return model

    def member_predictions(self, X) -> np.ndarray:
        """Predictions of every tree, shape ``(n_estimators, n_rows)``."""
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        return np.vstack([t.predict(X) for t in self.estimators_])

    def predict(self, X):
        return self.member_predictions(X).mean(axis=0)

    def oob_predictions(self, X, y=None, n_trees: int | None = None):
        """OOB prediction per training row (NaN where no tree left it out)."""
        P = self.member_predictions(X)
        if n_trees is not None:
            P = P[:n_trees]
        oob = self.inbag_[: P.shape[0]] == 0
        if oob.shape[1] != P.shape[1]:
            raise ValueError("X must be the training matrix the bag was fitted on")
        cover = oob.sum(axis=0)
        total = np.where(oob, P, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(cover > 0, total / cover, np.nan)

    def oob_error(self, X, y) -> float:
        """Out-of-bag MAE over rows left out by at least one tree."""
        pred = self.oob_predictions(X)
        covered = np.isfinite(pred)
        self.oob_uncovered_ = int((~covered).sum())
        if not covered.any():
            raise ValueError("no row is out of bag for any tree")
        return float(np.mean(np.abs(np.asarray(y, float)[covered] - pred[covered])))

    def oob_curve(self, X, y) -> np.ndarray:
        """OOB MAE using the first ``b`` trees, for ``b = 1 .. n_estimators``.

        Entries are NaN when no row is out of bag yet.
        """
        P = self.member_predictions(X)
        y = np.asarray(y, float)
        oob = self.inbag_ == 0
        cover = np.cumsum(oob, axis=0)
        total = np.cumsum(np.where(oob, P, 0.0), axis=0)
        out = np.full(P.shape[0], np.nan)
        for b in range(P.shape[0]):
            ok = cover[b] > 0
            if ok.any():
                out[b] = np.mean(np.abs(y[ok] - total[b, ok] / cover[b, ok]))
        return out

    @property
    def feature_importances_(self) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        return _usage_share(self.estimators_, self.n_features_in_)

    def to_dict(self, include_inbag: bool = False) -> dict:
        d = {"kind": "bagged", "params": self.get_params(),
             "trees": [t.to_dict() for t in self.estimators_]}
        if include_inbag:
            d["inbag"] = self.inbag_.tolist()
        return d


class LSBoostRegressor(_TreeModelMixin, RegressorMixin, BaseEstimator):
    """Least-squares gradient boosting of bounded regression trees.

    ``F_0`` is the training mean; stage ``i`` fits a tree with at most
    ``max_splits`` splits to the residuals ``y - F_{i-1}(X)`` and adds it
    scaled by ``learning_rate``. A stage may be the zero-split tree, so the
    training squared error never increases.
    """

    def __init__(self, n_estimators=256, learning_rate=0.1, max_splits=16, min_leaf=5):
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_splits = max_splits
        self.min_leaf = min_leaf

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        self.n_features_in_ = X.shape[1]
        self.f0_ = float(y.mean())
        order = presort(X)
        F = np.full(y.size, self.f0_)
        self.estimators_ = []
        self.train_mae_ = [float(np.mean(np.abs(y - F)))]
        self.train_mse_ = [float(np.mean((y - F) ** 2))]
        for _ in range(self.n_estimators):
            tree = grow_tree(X, y - F, self.min_leaf, self.max_splits, order=order)
            F = F + self.learning_rate * tree.predict(X)
            self.estimators_.append(tree)
            self.train_mae_.append(float(np.mean(np.abs(y - F))))
            self.train_mse_.append(float(np.mean((y - F) ** 2)))
        return self

    def staged_predict(self, X):
        """Yield predictions after 0, 1, ..., n_estimators stages."""
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        F = np.full(X.shape[0], self.f0_)
        yield F.copy()
        for tree in self.estimators_:
            F = F + self.learning_rate * tree.predict(X)
            yield F.copy()

    def predict(self, X):
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=float)
        F = np.full(X.shape[0], self.f0_)
        for tree in self.estimators_:
            F += self.learning_rate * tree.predict(X)
        return F

    @property
    def feature_importances_(self) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        return _usage_share(self.estimators_, self.n_features_in_)

    def to_dict(self) -> dict:
        return {"kind": "lsboost", "params": self.get_params(), "f0": self.f0_,
                "stages": [t.to_dict() for t in self.estimators_]}


# --- functional entry points ------------------------------------------------


def fit_tree(X, y, min_leaf=6, max_splits=50) -> RegressionTree:
    return RegressionTree(min_leaf, max_splits).fit(X, y)


def predict_tree(model, x) -> float:
    tree = model.tree_ if isinstance(model, RegressionTree) else model
    return tree.predict_one(np.asarray(x, float))


def fit_bagged(X, y, b=60, seed=0, n_jobs=1) -> BaggedTrees:
    return BaggedTrees(n_estimators=b, random_state=seed, n_jobs=n_jobs).fit(X, y)


def predict_bagged(model: BaggedTrees, x) -> float:
    return float(model.predict(np.asarray(x, float).reshape(1, -1))[0])


def oob_error(model: BaggedTrees, X, y) -> float:
    return model.oob_error(X, y)


def fit_lsboost(X, y, nu=0.1, max_splits_weak=16, m=256, min_leaf=5) -> LSBoostRegressor:
    return LSBoostRegressor(m, nu, max_splits_weak, min_leaf).fit(X, y)


def predict_boosted(model: LSBoostRegressor, x) -> float:
    return float(model.predict(np.asarray(x, float).reshape(1, -1))[0])


def feature_importance(model) -> np.ndarray:
    """Share of internal nodes splitting on each feature, over all members."""
    return model.feature_importances_


@dataclass
class CVResult:
    best_params: dict
    table: list[dict]

    @property
    def best_index(self) -> int:
        return int(np.argmin([row["mae"] for row in self.table]))


def kfold_cv(X, y, param_grid, k=10, seed=0, estimator=None, cv=None) -> CVResult:
    """k-fold cross-validated MAE and MSE for every grid setting.

    Folds are a seeded random partition of the rows; pass ``cv`` (an
    iterable of ``(train_idx, val_idx)``) to fix them explicitly. The best
    setting minimises mean validation MAE, first in grid order on ties.
    """
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    estimator = estimator if estimator is not None else RegressionTree()
    if cv is None:
        if k < 2 or k > X.shape[0]:
            raise ValueError(f"k must lie in [2, n_rows]; got {k}")
        cv = list(KFold(n_splits=k, shuffle=True, random_state=seed).split(X))
    else:
        cv = list(cv)
    for tr, va in cv:
        if len(tr) == 0 or len(va) == 0:
            raise ValueError("degenerate fold")
    table = []
    for params in ParameterGrid(param_grid):
        fold_mae, fold_mse = [], []
        for tr, va in cv:
            model = estimator.__class__(**{**estimator.get_params(), **params}).fit(X[tr], y[tr])
            err = y[va] - model.predict(X[va])
            fold_mae.append(float(np.mean(np.abs(err))))
            fold_mse.append(float(np.mean(err * err)))
        table.append({"params": params, "mae": float(np.mean(fold_mae)),
                      "mse": float(np.mean(fold_mse)), "fold_mae": fold_mae})
    result = CVResult({}, table)
    result.best_params = table[result.best_index]["params"]
    return result


def train_test_split_rows(n: int, train_fraction: float = 0.7, seed: int = 0):
    """Seeded random row split into train and test index arrays."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])
