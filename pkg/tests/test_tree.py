import json

import numpy as np
import pytest

from tabtree.dataset import ColumnSpec, DataError, Schema, Table
from tabtree.tree import (SEARCH_SPACE, Ensemble, TreeParams, apply_leaves, cv_score, encode_target, fit_gbm,
                          predict, sample_params, tune_hyperparams)

from conftest import make_table


def _auc(y, s):
    pos, neg = s[y == 1], s[y == 0]
    return np.mean(pos[:, None] > neg[None, :]) + 0.5 * np.mean(pos[:, None] == neg[None, :])


def test_leaf_ids_cover_range():
    t = make_table(500)
    e = fit_gbm(t, "y", TreeParams(n_estimators=8, max_leaves=12), seed=0)
    J = apply_leaves(e, t)
    assert J.shape == (500, 8)
    for k, tree in enumerate(e.trees):
        assert 2 <= tree.n_leaves <= 12
        assert J[:, k].min() >= 1 and J[:, k].max() <= tree.n_leaves
        assert sorted(tree.leaf_id[tree.feature < 0]) == list(range(1, tree.n_leaves + 1))


def test_classifier_learns_signal():
    train, test = make_table(1500, 0), make_table(800, 1)
    e = fit_gbm(train, "y", TreeParams(n_estimators=40), seed=0)
    y = (test["y"] == "1").astype(float)
    assert _auc(y, predict(e, test)) > 0.75


def test_regression_reduces_error():
    t = make_table(800)
    e = fit_gbm(t, "x3", TreeParams(n_estimators=30), seed=0)
    mse = np.mean((predict(e, t) - t["x3"]) ** 2)
    assert mse < 0.6 * np.var(t["x3"])


def test_min_samples_leaf_respected():
    t = make_table(400)
    p = TreeParams(n_estimators=3, max_leaves=50, max_depth=10, min_samples_leaf=25)
    e = fit_gbm(t, "y", p, seed=0)
    J = apply_leaves(e, t)
    for k in range(3):
        assert np.bincount(J[:, k])[1:].min() >= 25


def test_max_depth_one_gives_stumps():
    e = fit_gbm(make_table(300), "y", TreeParams(n_estimators=4, max_depth=1), seed=0)
    assert e.leaf_counts == [2, 2, 2, 2]


def test_seed_determinism():
    t = make_table(300)
    p = TreeParams(n_estimators=5, feature_fraction=0.6, bagging_fraction=0.7)
    a = apply_leaves(fit_gbm(t, "y", p, seed=4), t)
    b = apply_leaves(fit_gbm(t, "y", p, seed=4), t)
    assert np.array_equal(a, b)


def test_unseen_category_routes():
    t = make_table(300)
    e = fit_gbm(t, "y", TreeParams(n_estimators=3), seed=0)
    other = Table.from_columns(t.schema, {**t.data, "c1": ["new"] * 300})
    J = apply_leaves(e, other)
    assert J.min() >= 1


def test_serialization_round_trip():
    t = make_table(300)
    e = fit_gbm(t, "y", TreeParams(n_estimators=4), seed=0)
    back = Ensemble.from_dict(json.loads(json.dumps(e.to_dict(), allow_nan=False)))
    assert np.array_equal(apply_leaves(back, t), apply_leaves(e, t))
    assert np.allclose(predict(back, t), predict(e, t))


def test_target_encoding():
    s = Schema((ColumnSpec("c", "categorical"),))
    y, obj, pos = encode_target(Table.from_columns(s, {"c": ["b", "a", "c", "c"]}), "c")
    assert obj == "logistic" and pos == "c" and y.tolist() == [0, 0, 1, 1]
    with pytest.raises(DataError):
        encode_target(Table.from_columns(s, {"c": ["a", "a"]}), "c")


def test_input_validation():
    t = make_table(10)
    with pytest.raises(DataError):
        fit_gbm(t, "y")
    with pytest.raises(DataError):
        fit_gbm(make_table(50), "nope")


def test_search_space_samples():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = sample_params(rng)
        assert 0.01 <= p.learning_rate <= 0.3
        assert p.n_estimators in range(50, 251, 50)
        assert 3 <= p.max_depth <= 10
        assert p.max_leaves in range(20, 101, 5)
        assert p.min_samples_leaf in range(10, 51, 5)
        assert 0.6 <= p.feature_fraction <= 1.0
        assert SEARCH_SPACE["min_split_gain"][0] <= p.min_split_gain <= 10


def test_tuning_picks_best_trial(monkeypatch):
    import tabtree.tree as tree_mod
    monkeypatch.setattr(tree_mod, "cv_score", lambda t, target, p, seed: -abs(p.learning_rate - 0.1))
    best, hist = tune_hyperparams(make_table(60), "y", 6, seed=0)
    assert len(hist) == 6
    assert best == max(hist, key=lambda r: r[1])[0]


def test_cv_score_range():
    s = cv_score(make_table(300), "y", TreeParams(n_estimators=5), seed=0)
    assert 0.5 < s <= 1.0
