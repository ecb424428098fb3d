"""Small gradient-boosted tree ensemble used as the conditioning prior.

Trees grow leaf-wise (best gain first) under ``max_depth`` / ``max_leaves`` /
``min_samples_leaf``. Splits maximise the regularised second-order gain of the
loss; leaf values are regularised Newton steps. Categorical features split
on category subsets found by ordering categories on their mean gradient.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataset import DataError, Table

log = logging.getLogger(__name__)

LOGISTIC = "logistic"
SQUARED_ERROR = "squared_error"
MIN_ROWS = 20


@dataclass(frozen=True)
class TreeParams:
    n_estimators: int = 50
    learning_rate: float = 0.1
    max_depth: int = 6
    max_leaves: int = 31
    min_samples_leaf: int = 10
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    min_split_gain: float = 0.0
    reg_lambda: float = 1.0


@dataclass
class Tree:
    """Flat node arrays. ``feature[k] == -1`` marks a leaf; ``leaf_id`` is 1-based."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray
    default_left: np.ndarray
    cat_left: list   # per node: sorted category codes routed left, or None
    cat_right: list  # per node: sorted category codes routed right, or None

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def route(self, x: np.ndarray, is_cat: np.ndarray) -> np.ndarray:
        """Node index reached by each row of the encoded feature matrix."""
        out = np.empty(len(x), dtype=np.int64)
        stack = [(0, np.arange(len(x)))]
        while stack:
            node, idx = stack.pop()
            f = self.feature[node]
            if f < 0 or len(idx) == 0:
                out[idx] = node
                continue
            col = x[idx, f]
            if is_cat[f]:
                go_left = np.isin(col, self.cat_left[node])
                # codes never seen at this node during fitting take the larger branch
                unseen = ~go_left & ~np.isin(col, self.cat_right[node])
                if unseen.any():
                    go_left = np.where(unseen, self.default_left[node], go_left)
            else:
                go_left = col <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(v) else float(v) for v in self.threshold],
            "left": self.left.tolist(), "right": self.right.tolist(),
            "value": self.value.tolist(), "leaf_id": self.leaf_id.tolist(),
            "default_left": self.default_left.tolist(), "cat_left": self.cat_left,
            "cat_right": self.cat_right,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array([np.nan if v is None else v for v in d["threshold"]], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64), np.array(d["leaf_id"], dtype=np.int64),
                   np.array(d["default_left"], dtype=bool), d["cat_left"], d["cat_right"])


@dataclass
class Ensemble:
    trees: list
    shrinkage: float
    base_score: float
    objective: str
    target: str
    features: list          # feature column names in matrix order
    categories: dict        # categorical feature name -> list of known categories
    positive_class: str | None
    params: TreeParams

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def leaf_counts(self) -> list[int]:
        return [t.n_leaves for t in self.trees]

    @property
    def max_leaves(self) -> int:
        return max(self.leaf_counts)

    def _is_cat(self) -> np.ndarray:
        return np.array([f in self.categories for f in self.features])

    def matrix(self, t: Table) -> np.ndarray:
        return _feature_matrix(t, self.features, self.categories)

    def raw_scores(self, t: Table) -> np.ndarray:
        x = self.matrix(t)
        is_cat = self._is_cat()
        out = np.full(len(x), self.base_score)
        for tree in self.trees:
            out += self.shrinkage * tree.value[tree.route(x, is_cat)]
        return out

    def to_dict(self) -> dict:
        return {
            "trees": [t.to_dict() for t in self.trees], "shrinkage": self.shrinkage,
            "base_score": self.base_score, "objective": self.objective, "target": self.target,
            "features": self.features, "categories": self.categories,
            "positive_class": self.positive_class, "params": asdict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        return cls([Tree.from_dict(t) for t in d["trees"]], d["shrinkage"], d["base_score"],
                   d["objective"], d["target"], d["features"], d["categories"],
                   d["positive_class"], TreeParams(**d["params"]))


def _feature_matrix(t: Table, features, categories) -> np.ndarray:
    missing = [f for f in features if f not in t.schema.names]
    if missing:
        raise DataError(f"table lacks fit-time feature columns {missing}")
    x = np.empty((t.n_rows, len(features)), dtype=np.float64)
    for j, f in enumerate(features):
        if f in categories:
            if t.schema[f].is_numeric:
                raise DataError(f"column {f!r} was categorical at fit time")
            index = {c: i for i, c in enumerate(categories[f])}
            x[:, j] = [index.get(v, -1) for v in t[f]]
        else:
            if not t.schema[f].is_numeric:
                raise DataError(f"column {f!r} was numeric at fit time")
            x[:, j] = t[f]
    return x


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def encode_target(t: Table, target: str):
    """Returns (y, objective, positive_class)."""
    spec = t.schema[target]
    if spec.is_numeric:
        y = np.asarray(t[target], dtype=np.float64)
        if np.ptp(y) == 0:
            raise DataError(f"target {target!r} is constant")
        return y, SQUARED_ERROR, None
    labels = np.asarray(t[target], dtype=object)
    classes, counts = np.unique(labels.astype(str), return_counts=True)
    if len(classes) < 2:
        raise DataError(f"target {target!r} has a single class")
    # binary: second class is positive; multiclass: majority vs rest
    positive = classes[1] if len(classes) == 2 else classes[np.argmax(counts)]
    return (labels.astype(str) == positive).astype(np.float64), LOGISTIC, str(positive)


def _best_split(x_col, is_cat, g, h, msl, lam):
    """Best split of one feature: (gain, threshold, left_codes, go_left mask) or None."""
    n = len(g)
    total = g.sum()
    parent = total * total / (h.sum() + lam)
    if is_cat:
        codes = x_col.astype(np.int64)
        uniq, inv = np.unique(codes, return_inverse=True)
        if len(uniq) < 2:
            return None
        gs = np.bincount(inv, weights=g)
        hs = np.bincount(inv, weights=h)
        ns = np.bincount(inv)
        order = np.argsort(gs / (hs + lam), kind="stable")
        cg, ch, cn = np.cumsum(gs[order])[:-1], np.cumsum(hs[order])[:-1], np.cumsum(ns[order])[:-1]
    else:
        order_rows = np.argsort(x_col, kind="stable")
        xs = x_col[order_rows]
        cg, ch = np.cumsum(g[order_rows])[:-1], np.cumsum(h[order_rows])[:-1]
        cn = np.arange(1, n)
        distinct = xs[:-1] < xs[1:]
    valid = (cn >= msl) & (n - cn >= msl)
    if not is_cat:
        valid &= distinct
    if not valid.any():
        return None
    gain = cg**2 / (ch + lam) + (total - cg) ** 2 / (h.sum() - ch + lam) - parent
    gain = np.where(valid, gain, -np.inf)
    k = int(np.argmax(gain))
    if is_cat:
        left_codes = np.sort(uniq[order[: k + 1]])
        right_codes = np.sort(uniq[order[k + 1:]])
        return gain[k], np.nan, (left_codes.tolist(), right_codes.tolist()), np.isin(codes, left_codes)
    thr = 0.5 * (xs[k] + xs[k + 1])
    if not thr < xs[k + 1]:
        thr = xs[k]
    return gain[k], thr, None, x_col <= thr


def _grow_tree(x, is_cat, g, h, feats, p: TreeParams):
    feature, threshold, left, right, value, default_left, depth = [], [], [], [], [], [], []
    cat_left, cat_right = [], []

    def new_node(d):
        for arr, v in ((feature, -1), (threshold, np.nan), (left, -1), (right, -1),
                       (value, 0.0), (default_left, True), (cat_left, None), (cat_right, None), (depth, d)):
            arr.append(v)
        return len(feature) - 1

    def leaf_value(idx):
        return g[idx].sum() / (h[idx].sum() + p.reg_lambda)

    def candidate(node, idx):
        if depth[node] >= p.max_depth or len(idx) < 2 * p.min_samples_leaf:
            return None
        best = None
        for f in feats:
            s = _best_split(x[idx, f], is_cat[f], g[idx], h[idx], p.min_samples_leaf, p.reg_lambda)
            if s is not None and (best is None or s[0] > best[0]):
                best = (s[0], f, s[1], s[2], s[3])
        if best is None or best[0] <= p.min_split_gain:
            return None
        return best

    root = new_node(0)
    all_idx = np.arange(len(g))
    value[root] = leaf_value(all_idx)
    heap, counter = [], 0
    c = candidate(root, all_idx)
    if c is not None:
        heapq.heappush(heap, (-c[0], counter, root, all_idx, c))
    n_leaves = 1
    while heap and n_leaves < p.max_leaves:
        _, _, node, idx, (gain, f, thr, codes, go_left) = heapq.heappop(heap)
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        if codes is not None:
            cat_left[node], cat_right[node] = codes
        default_left[node] = len(li) >= len(ri)
        for side, sub in (("l", li), ("r", ri)):
            child = new_node(depth[node] + 1)
            value[child] = leaf_value(sub)
            if side == "l":
                left[node] = child
            else:
                right[node] = child
            cc = candidate(child, sub)
            if cc is not None:
                counter += 1
                heapq.heappush(heap, (-cc[0], counter, child, sub, cc))
        n_leaves += 1

    feature = np.array(feature, dtype=np.int64)
    # leaf ids follow a depth-first left-to-right walk
    leaf_id = np.zeros(len(feature), dtype=np.int64)
    nxt, stack = 1, [0]
    while stack:
        k = stack.pop()
        if feature[k] < 0:
            leaf_id[k] = nxt
            nxt += 1
        else:
            stack.append(right[k])
            stack.append(left[k])
    return Tree(feature, np.array(threshold, dtype=np.float64), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value, dtype=np.float64), leaf_id,
                np.array(default_left, dtype=bool), cat_left, cat_right)


def fit_gbm(t: Table, target: str, params: TreeParams | None = None, seed: int = 0) -> Ensemble:
    p = params or TreeParams()
    if target not in t.schema.names:
        raise DataError(f"unknown target column {target!r}")
    if t.n_rows < MIN_ROWS:
        raise DataError(f"need at least {MIN_ROWS} rows to fit trees, got {t.n_rows}")
    if p.n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    y, objective, positive = encode_target(t, target)
    features = [n for n in t.schema.names if n != target]
    if not features:
        raise DataError("no feature columns besides the target")
    categories = {f: sorted({str(v) for v in t[f]}) for f in features if not t.schema[f].is_numeric}
    x = _feature_matrix(t, features, categories)
    is_cat = np.array([f in categories for f in features])
    rng = np.random.default_rng(seed)

    if objective == LOGISTIC:
        pm = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        base = math.log(pm / (1 - pm))
    else:
        base = float(y.mean())
    raw = np.full(len(y), base)
    n, m = x.shape
    n_bag = max(2 * p.min_samples_leaf, int(round(p.bagging_fraction * n)))
    n_feat = max(1, int(round(p.feature_fraction * m)))
    trees = []
    for _ in range(p.n_estimators):
        if objective == LOGISTIC:
            prob = _sigmoid(raw)
            g, h = y - prob, np.maximum(prob * (1 - prob), 1e-12)
        else:
            g, h = y - raw, np.ones(n)
        rows = np.sort(rng.choice(n, size=min(n, n_bag), replace=False)) if n_bag < n else np.arange(n)
        feats = np.sort(rng.choice(m, size=n_feat, replace=False)) if n_feat < m else np.arange(m)
        tree = _grow_tree(x[rows], is_cat, g[rows], h[rows], feats, p)
        trees.append(tree)
        raw += p.learning_rate * tree.value[tree.route(x, is_cat)]
    return Ensemble(trees, p.learning_rate, base, objective, target, features, categories,
                    positive, p)


def apply_leaves(e: Ensemble, t: Table) -> np.ndarray:
    """``n x T`` matrix of 1-based leaf ids."""
    x = e.matrix(t)
    is_cat = e._is_cat()
    return np.stack([tree.leaf_id[tree.route(x, is_cat)] for tree in e.trees], axis=1)


def predict(e: Ensemble, t: Table) -> np.ndarray:
    raw = e.raw_scores(t)
    return _sigmoid(raw) if e.objective == LOGISTIC else raw


SEARCH_SPACE = {
    "learning_rate": (0.01, 0.3),
    "n_estimators": (50, 250, 50),
    "max_depth": (3, 10),
    "max_leaves": (20, 100, 5),
    "min_samples_leaf": (10, 50, 5),
    "feature_fraction": (0.6, 1.0),
    "bagging_fraction": (0.6, 1.0),
    "min_split_gain": (0.0, 10.0),
}


def sample_params(rng: np.random.Generator) -> TreeParams:
    lo, hi = SEARCH_SPACE["learning_rate"]

    def stepped(key):
        a, b, s = SEARCH_SPACE[key]
        return int(rng.choice(np.arange(a, b + 1, s)))

    return TreeParams(
        learning_rate=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
        n_estimators=stepped("n_estimators"),
        max_depth=int(rng.integers(SEARCH_SPACE["max_depth"][0], SEARCH_SPACE["max_depth"][1] + 1)),
        max_leaves=stepped("max_leaves"),
        min_samples_leaf=stepped("min_samples_leaf"),
        feature_fraction=float(rng.uniform(*SEARCH_SPACE["feature_fraction"])),
        bagging_fraction=float(rng.uniform(*SEARCH_SPACE["bagging_fraction"])),
        min_split_gain=float(rng.uniform(*SEARCH_SPACE["min_split_gain"])),
    )


def _weighted_f1(y_true, y_pred) -> float:
    score = 0.0
    for c in (0.0, 1.0):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
        score += f1 * np.mean(y_true == c)
    return float(score)


def cv_score(t: Table, target: str, params: TreeParams, seed: int, folds: int = 3) -> float:
    """Weighted F1 (classification) or negative MSE (regression), averaged over folds."""
    y, objective, _ = encode_target(t, target)
    perm = np.random.default_rng(seed).permutation(t.n_rows)
    scores = []
    for k in range(folds):
        test_idx = perm[k::folds]
        train_idx = np.setdiff1d(perm, test_idx)
        e = fit_gbm(t.take(train_idx), target, params, seed)
        pred = predict(e, t.take(test_idx))
        if objective == LOGISTIC:
            scores.append(_weighted_f1(y[test_idx], (pred >= 0.5).astype(np.float64)))
        else:
            scores.append(-float(np.mean((y[test_idx] - pred) ** 2)))
    return float(np.mean(scores))


def tune_hyperparams(t: Table, target: str, trials: int, seed: int = 0):
    """Seeded random search; returns (best params, trial log of (params, score))."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    history = []
    for i in range(trials):
        p = sample_params(rng)
        score = cv_score(t, target, p, seed)
        log.info("tree trial %d: score=%.5f %s", i, score, p)
        history.append((p, score))
    best = max(history, key=lambda r: r[1])[0]
    return best, history


def with_overrides(p: TreeParams, **kw) -> TreeParams:
    return replace(p, **{k: v for k, v in kw.items() if v is not None})
