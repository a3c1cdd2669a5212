import json
import math

import numpy as np
import pytest
from sklearn.model_selection import KFold

from gridcast.features import FeatureSpec, build_matrix
from gridcast.ingest import SyntheticConfig, generate_synthetic
from gridcast.trees import (
    LEAF,
    BaggedTrees,
    LSBoostRegressor,
    Tree,
    feature_importance,
    fit_bagged,
    fit_lsboost,
    fit_tree,
    grow_tree,
    kfold_cv,
    oob_error,
    predict_bagged,
    predict_boosted,
    predict_tree,
    train_test_split_rows,
)


def leaf(value, n_features=1):
    return Tree.from_dict({"feature": [LEAF], "threshold": [math.nan], "left": [LEAF],
                           "right": [LEAF], "value": [value], "n_samples": [1],
                           "n_features": n_features})


def stump(feature, threshold, lo, hi, n_features=2):
    return Tree.from_dict({"feature": [feature, LEAF, LEAF],
                           "threshold": [threshold, math.nan, math.nan],
                           "left": [1, LEAF, LEAF], "right": [2, LEAF, LEAF],
                           "value": [(lo + hi) / 2, lo, hi], "n_samples": [2, 1, 1],
                           "n_features": n_features})


def node_rows(tree, X):
    """Training rows reaching every node, found by walking from the root."""
    rows = {0: np.arange(X.shape[0])}
    stack = [0]
    while stack:
        i = stack.pop()
        if tree.feature[i] == LEAF:
            continue
        r = rows[i]
        go = X[r, tree.feature[i]] < tree.threshold[i]
        rows[tree.left[i]], rows[tree.right[i]] = r[go], r[~go]
        stack += [tree.left[i], tree.right[i]]
    return rows


def sse(v):
    return float(((v - v.mean()) ** 2).sum()) if v.size else 0.0


def exhaustive_best(X, y, min_leaf):
    best = math.inf
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            go = X[:, f] < (a + b) / 2
            if go.sum() < min_leaf or (~go).sum() < min_leaf:
                continue
            best = min(best, sse(y[go]) + sse(y[~go]))
    return best


def test_perfect_stump():
    t = fit_tree([[0.0], [1.0]], [0.0, 1.0], min_leaf=1)
    assert t.tree_.n_splits == 1 and t.tree_.threshold[0] == 0.5
    assert t.predict([[0.0], [1.0]]).tolist() == [0.0, 1.0]


def test_constant_target_is_single_leaf():
    t = fit_tree(np.random.default_rng(0).normal(size=(30, 3)), np.full(30, 4.0), min_leaf=1)
    assert t.tree_.n_splits == 0 and t.predict([[0, 0, 0]])[0] == 4.0


def test_too_few_rows_gives_mean_predictor():
    t = fit_tree([[0.0], [1.0], [2.0]], [1.0, 2.0, 6.0], min_leaf=2)
    assert t.tree_.n_splits == 0 and t.predict([[5.0]])[0] == 3.0


@pytest.mark.parametrize("seed", range(5))
def test_every_split_is_optimal_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 3)).round(1)
    y = X[:, 0] ** 2 - X[:, 1] + rng.normal(size=50)
    tree = fit_tree(X, y, min_leaf=5, max_splits=None).tree_
    rows = node_rows(tree, X)
    assert tree.n_splits > 0
    for i in range(tree.n_nodes):
        r = rows[i]
        assert tree.n_samples[i] == r.size
        assert tree.value[i] == pytest.approx(y[r].mean())
        best = exhaustive_best(X[r], y[r], 5)
        if tree.feature[i] == LEAF:
            # a leaf stayed a leaf only if no admissible split reduces SSE
            assert not best < sse(y[r]) - 1e-9
            assert r.size >= 5
        else:
            chosen = sse(y[rows[tree.left[i]]]) + sse(y[rows[tree.right[i]]])
            assert chosen == pytest.approx(best, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("s", [1, 2, 3, 5, 8, 13])
def test_max_splits_is_a_prefix_of_best_first_growth(s):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(120, 4))
    y = np.sin(3 * X[:, 0]) + X[:, 2] + 0.1 * rng.normal(size=120)
    full = grow_tree(X, y, min_leaf=3)
    part = grow_tree(X, y, min_leaf=3, max_splits=s)
    assert part.n_splits == min(s, full.n_splits)
    seq = lambda t: [(t.feature[i], t.threshold[i]) for i in t.split_order]
    assert seq(part) == seq(full)[:s]
    # at each step the chosen frontier split has the largest gain available
    rows = node_rows(part, X)
    frontier = {0}
    for node, gain in zip(part.split_order, part.gains):
        for other in frontier - {node}:
            r = rows[other]
            alt = sse(y[r]) - exhaustive_best(X[r], y[r], 3)
            assert not alt > gain + 1e-9
        frontier = (frontier - {node}) | {part.left[node], part.right[node]}


def test_leaf_size_and_split_bounds_hold():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(400, 5)), rng.normal(size=400)
    for min_leaf, max_splits in [(1, 10), (6, 50), (20, None)]:
        t = fit_tree(X, y, min_leaf, max_splits).tree_
        leaves = t.feature == LEAF
        assert (t.n_samples[leaves] >= min_leaf).all()
        if max_splits is not None:
            assert t.n_splits <= max_splits


def test_tie_breaks_lowest_feature_then_lowest_threshold():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    t = grow_tree(np.c_[x, x], y, min_leaf=1, max_splits=1)
    assert t.feature[0] == 0 and t.threshold[0] == 0.5


def test_boundary_routes_equality_right():
    t = stump(0, 0.5, lo=1.0, hi=2.0)
    assert predict_tree(t, [0.4, 0.0]) == 1.0
    assert predict_tree(t, [0.5, 0.0]) == 2.0
    assert t.predict([[0.4, 0], [0.5, 0]]).tolist() == [1.0, 2.0]
    assert predict_tree(leaf(7.0), [123.0]) == 7.0


def test_tree_json_round_trip():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(100, 3)), rng.normal(size=100)
    m = fit_tree(X, y, 2, 20)
    d = json.loads(m.to_json())
    back = Tree.from_dict(d["tree"])
    assert np.array_equal(back.predict(X), m.predict(X))
    assert d["params"]["min_leaf"] == 2


# --- cross-validation -------------------------------------------------------


def test_cv_argmin_matches_independent_recomputation():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 3))
    y = np.sin(2 * X[:, 0]) + X[:, 1] ** 2 + 0.5 * rng.normal(size=200)
    folds = list(KFold(5, shuffle=True, random_state=0).split(X))
    grid = list(range(1, 51))
    res = kfold_cv(X, y, {"min_leaf": grid, "max_splits": [None]}, cv=folds)
    oracle = []
    for ml in grid:
        errs = [np.mean(np.abs(y[va] - grow_tree(X[tr], y[tr], ml).predict(X[va])))
                for tr, va in folds]
        oracle.append(np.mean(errs))
    assert res.best_params["min_leaf"] == grid[int(np.argmin(oracle))]
    assert [row["mae"] for row in res.table] == pytest.approx(oracle, rel=1e-12)


def test_cv_symmetric_duplicated_folds():
    rng = np.random.default_rng(5)
    A, ya = rng.normal(size=(20, 2)), rng.normal(size=20)
    X, y = np.vstack([A, A]), np.r_[ya, ya]
    a, b = np.arange(20), np.arange(20, 40)
    res = kfold_cv(X, y, {"min_leaf": [1, 3]}, cv=[(a, b), (b, a)])
    for row in res.table:
        assert row["fold_mae"][0] == row["fold_mae"][1]


def test_leave_one_out_and_bad_k():
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(10, 2)), rng.normal(size=10)
    res = kfold_cv(X, y, {"min_leaf": [1]}, k=10)
    assert len(res.table[0]["fold_mae"]) == 10
    with pytest.raises(ValueError):
        kfold_cv(X, y, {"min_leaf": [1]}, k=1)
    with pytest.raises(ValueError):
        kfold_cv(X, y, {"min_leaf": [1]}, cv=[(np.arange(10), np.array([], int))])


def test_train_test_split_is_seeded_partition():
    tr, te = train_test_split_rows(100, 0.7, seed=3)
    assert len(tr) == 70 and len(te) == 30
    assert np.array_equal(np.sort(np.r_[tr, te]), np.arange(100))
    assert np.array_equal(tr, train_test_split_rows(100, 0.7, seed=3)[0])


# --- bagging ----------------------------------------------------------------


def _regression_data(n, seed, p=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, p))
    return X, np.sin(2 * X[:, 0]) + 0.3 * X[:, 1] + 0.3 * rng.normal(size=n)


def test_single_member_bag_equals_its_bootstrap_tree():
    X, y = _regression_data(80, 7)
    bag = fit_bagged(X, y, b=1, seed=11)
    seed = np.random.SeedSequence(11).spawn(1)[0]
    idx = np.random.default_rng(seed).integers(0, 80, 80)
    assert np.array_equal(bag.inbag_[0], np.bincount(idx, minlength=80))
    assert np.array_equal(bag.predict(X), grow_tree(X[idx], y[idx]).predict(X))
    # with one tree the OOB set is exactly the rows absent from its bootstrap
    pred = bag.oob_predictions(X)
    assert np.array_equal(np.isfinite(pred), bag.inbag_[0] == 0)


def test_bag_average_examples():
    bag = BaggedTrees.from_trees([leaf(2.0), leaf(4.0)], np.ones((2, 3), int))
    assert predict_bagged(bag, [0.0]) == 3.0
    t = stump(0, 0.0, -1.0, 1.0)
    same = BaggedTrees.from_trees([t, t], np.ones((2, 3), int))
    x = np.array([[-1.0, 0.0], [1.0, 0.0]])
    assert np.array_equal(same.predict(x), t.predict(x))


def test_bag_prediction_matches_loop_and_is_permutation_invariant():
    X, y = _regression_data(150, 8)
    bag = fit_bagged(X, y, b=12, seed=1)
    xs = np.random.default_rng(9).uniform(-2, 2, size=(100, 3))
    for x in xs:
        loop = sum(t.predict_one(x) for t in bag.estimators_) / 12
        assert predict_bagged(bag, x) == pytest.approx(loop, rel=1e-12)
    perm = np.random.default_rng(0).permutation(12)
    shuffled = BaggedTrees.from_trees([bag.estimators_[i] for i in perm], bag.inbag_[perm])
    assert np.allclose(shuffled.predict(xs), bag.predict(xs), rtol=1e-12)


def test_bagging_is_independent_of_thread_schedule():
    X, y = _regression_data(200, 10)
    a = BaggedTrees(20, random_state=5, n_jobs=1).fit(X, y)
    b = BaggedTrees(20, random_state=5, n_jobs=4).fit(X, y)
    assert np.array_equal(a.inbag_, b.inbag_)
    assert np.array_equal(a.predict(X), b.predict(X))


def test_unique_fraction_per_bootstrap_near_one_minus_inv_e():
    X, y = _regression_data(500, 11, p=2)
    bag = fit_bagged(X, y, b=200, seed=2)
    assert (bag.inbag_.sum(axis=1) == 500).all()
    unique = (bag.inbag_ > 0).mean()
    assert unique == pytest.approx(1 - math.exp(-1), abs=0.01)


def test_oob_fraction_large_n():
    n = 10_000
    X = np.arange(n, dtype=float)[:, None]
    bag = BaggedTrees(3, min_leaf=n, random_state=0).fit(X, np.zeros(n))
    assert (bag.inbag_ == 0).mean() == pytest.approx(math.exp(-1), abs=0.02)


def test_hand_built_oob_error():
    # trees predict 1, 2, 4 everywhere; rows left out: tree0 {0,1}, tree1 {1,2}, tree2 {2}
    inbag = np.array([[0, 0, 1, 2, 2],
                      [2, 0, 0, 1, 2],
                      [1, 1, 0, 2, 1]])
    bag = BaggedTrees.from_trees([leaf(1.0), leaf(2.0), leaf(4.0)], inbag)
    X = np.zeros((5, 1))
    y = np.array([0.0, 0.0, 0.0, 9.0, 9.0])
    # row 0 -> 1, row 1 -> (1+2)/2, row 2 -> (2+4)/2; rows 3, 4 are never out of bag
    assert oob_error(bag, X, y) == pytest.approx((1 + 1.5 + 3) / 3)
    assert bag.oob_uncovered_ == 2
    with pytest.raises(ValueError):
        BaggedTrees.from_trees([leaf(1.0)], np.ones((1, 5), int)).oob_error(X, y)


def test_oob_curve_trends_down():
    X, y = _regression_data(300, 12)
    bag = fit_bagged(X, y, b=100, seed=3)
    curve = bag.oob_curve(X, y)
    assert curve[-1] == pytest.approx(bag.oob_error(X, y))
    smooth = np.convolve(curve, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]
    slope = np.polyfit(np.arange(50), smooth[-50:], 1)[0]
    assert slope <= 0


# --- boosting ---------------------------------------------------------------


STUMP_X = np.array([[0.0], [0.0], [1.0], [1.0]])
STUMP_Y = np.array([0.0, 0.0, 4.0, 4.0])


def test_lsboost_nu_one_fits_stump_exactly():
    m = fit_lsboost(STUMP_X, STUMP_Y, nu=1.0, max_splits_weak=1, m=1, min_leaf=1)
    assert np.array_equal(STUMP_Y - m.predict(STUMP_X), np.zeros(4))


def test_lsboost_half_step_halves_residuals():
    m = fit_lsboost(STUMP_X, STUMP_Y, nu=0.5, max_splits_weak=1, m=1, min_leaf=1)
    assert (STUMP_Y - m.predict(STUMP_X)).tolist() == [-1.0, -1.0, 1.0, 1.0]


def test_lsboost_zero_stages_and_summation_oracle():
    X, y = _regression_data(200, 13)
    assert predict_boosted(fit_lsboost(X, y, m=0), X[0]) == pytest.approx(y.mean())
    one = fit_lsboost(X, y, nu=1.0, m=1)
    assert predict_boosted(one, X[5]) == pytest.approx(y.mean() + one.estimators_[0].predict_one(X[5]))
    m = fit_lsboost(X, y, nu=0.25, max_splits_weak=4, m=30)
    xs = np.random.default_rng(1).uniform(-2, 2, size=(100, 3))
    loop = [m.f0_ + sum(0.25 * t.predict_one(x) for t in m.estimators_) for x in xs]
    assert np.allclose(m.predict(xs), loop, rtol=1e-12)
    staged = list(m.staged_predict(xs))
    assert len(staged) == 31 and np.allclose(staged[-1], loop)


def test_lsboost_unbounded_single_stage_interpolates():
    rng = np.random.default_rng(14)
    X, y = rng.normal(size=(60, 2)), rng.normal(size=60)
    m = fit_lsboost(X, y, nu=1.0, max_splits_weak=None, m=1, min_leaf=1)
    assert np.allclose(m.predict(X), y, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_lsboost_training_mse_never_increases(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(20, 120))
    X = rng.normal(size=(n, 3))
    y = rng.standard_t(2, size=n) * 10
    nu = float(rng.uniform(0.05, 1.0))
    m = fit_lsboost(X, y, nu=nu, max_splits_weak=int(rng.integers(1, 8)), m=25,
                    min_leaf=int(rng.integers(1, 6)))
    assert np.all(np.diff(m.train_mse_) <= 1e-9 * max(m.train_mse_))


def test_richer_weak_learners_never_train_worse():
    ds = generate_synthetic(SyntheticConfig(seed=3, days=6))
    fm = build_matrix(ds, FeatureSpec())
    final = [fit_lsboost(fm.X, fm.y, nu=0.25, max_splits_weak=s, m=32).train_mae_[-1]
             for s in (1, 4, 16)]
    assert final[0] >= final[1] >= final[2]


def test_lsboost_rejects_bad_learning_rate():
    with pytest.raises(ValueError):
        LSBoostRegressor(learning_rate=0.0).fit(STUMP_X, STUMP_Y)
    with pytest.raises(ValueError):
        LSBoostRegressor(learning_rate=1.5).fit(STUMP_X, STUMP_Y)


# --- importance -------------------------------------------------------------


def test_importance_examples():
    s = fit_tree(STUMP_X, STUMP_Y, min_leaf=1)
    assert feature_importance(s).tolist() == [1.0]
    bag = BaggedTrees.from_trees([stump(0, 0.0, 0, 1), stump(1, 0.0, 0, 1)], np.ones((2, 2), int))
    assert feature_importance(bag).tolist() == [0.5, 0.5]


def test_importance_matches_node_walk():
    X, y = _regression_data(300, 15, p=5)
    m = fit_lsboost(X, y, nu=0.3, max_splits_weak=6, m=20)
    counts = np.zeros(5)
    for t in m.estimators_:
        stack = [0]
        while stack:
            i = stack.pop()
            if t.feature[i] != LEAF:
                counts[t.feature[i]] += 1
                stack += [t.left[i], t.right[i]]
    share = feature_importance(m)
    assert np.allclose(share, counts / counts.sum())
    assert share.sum() == pytest.approx(1.0)
    table = m.feature_importance_table([f"f{i}" for i in range(5)])
    assert [name for name, _ in table] == ["f0", "f1", "f2", "f3", "f4"]


def test_ensembles_serialize():
    X, y = _regression_data(60, 16)
    bag = fit_bagged(X, y, b=3, seed=0)
    d = json.loads(json.dumps(bag.to_dict(include_inbag=True)))
    trees = [Tree.from_dict(t) for t in d["trees"]]
    back = BaggedTrees.from_trees(trees, d["inbag"])
    assert np.array_equal(back.predict(X), bag.predict(X))
    boost = fit_lsboost(X, y, m=5)
    d = json.loads(boost.to_json())
    stages = [Tree.from_dict(t) for t in d["stages"]]
    pred = d["f0"] + sum(boost.learning_rate * t.predict(X) for t in stages)
    assert np.allclose(pred, boost.predict(X))
