"""Fidelity, privacy and utility metrics for synthetic tables."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special
from scipy.stats import rankdata

from .dataset import DataError, Table
from .tree import TreeParams, fit_gbm, predict

LESS, GREATER = "less", "greater"


def _check_same_schema(*tables: Table):
    names = tables[0].schema.names
    kinds = [c.kind for c in tables[0].schema.columns]
    for t in tables[1:]:
        if t.schema.names != names or [c.kind for c in t.schema.columns] != kinds:
            raise DataError("tables do not share one schema")


def ks_statistic(a, b) -> float:
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def tv_distance(a, b) -> float:
    a, b = np.asarray(a, dtype=object), np.asarray(b, dtype=object)
    cats = set(a.tolist()) | set(b.tolist())
    return 0.5 * sum(abs(np.mean(a == c) - np.mean(b == c)) for c in cats)


def column_shape(real: Table, synth: Table) -> dict[str, float]:
    out = {}
    for c in real.schema.columns:
        if c.is_numeric:
            out[c.name] = 1.0 - ks_statistic(real[c.name], synth[c.name])
        else:
            out[c.name] = 1.0 - tv_distance(real[c.name], synth[c.name])
    return out


def shape_score(real: Table, synth: Table, breakdown: bool = False):
    _check_same_schema(real, synth)
    if real.n_rows == 0 or synth.n_rows == 0:
        raise DataError("shape score needs nonempty tables")
    cols = column_shape(real, synth)
    score = float(np.mean(list(cols.values())))
    return (score, cols) if breakdown else score


def _discretize(real_col, synth_col, numeric: bool, bins: int = 10):
    """Map both columns to shared labels; numerics use deciles of the real column."""
    if not numeric:
        return np.asarray(real_col, dtype=object), np.asarray(synth_col, dtype=object)
    edges = np.unique(np.quantile(np.asarray(real_col, float), np.linspace(0, 1, bins + 1))[1:-1])
    return (np.searchsorted(edges, real_col, side="right"), np.searchsorted(edges, synth_col, side="right"))


def contingency_similarity(real_a, real_b, synth_a, synth_b) -> float:
    """``1 - TV`` between the joint frequency tables of two discrete columns."""
    def joint(a, b):
        keys = list(zip(a.tolist(), b.tolist()))
        d: dict = {}
        for k in keys:
            d[k] = d.get(k, 0) + 1.0 / len(keys)
        return d
    p, q = joint(np.asarray(real_a), np.asarray(real_b)), joint(np.asarray(synth_a), np.asarray(synth_b))
    return 1.0 - 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q))


def _pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return float("nan")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def trend_score(real: Table, synth: Table, breakdown: bool = False):
    """Mean pairwise correlation similarity. Numeric pairs compare Pearson
    correlations; pairs with a categorical side compare contingency tables,
    with numerics cut at real-data deciles."""
    _check_same_schema(real, synth)
    cols = real.schema.columns
    if len(cols) < 2:
        raise DataError("trend score needs at least two columns")
    pairs = {}
    for a, b in itertools.combinations(cols, 2):
        key = f"{a.name}|{b.name}"
        if a.is_numeric and b.is_numeric:
            r, s = _pearson(real[a.name], real[b.name]), _pearson(synth[a.name], synth[b.name])
            if not (math.isnan(r) or math.isnan(s)):
                pairs[key] = 1.0 - abs(r - s) / 2.0
                continue
        ra, sa = _discretize(real[a.name], synth[a.name], a.is_numeric)
        rb, sb = _discretize(real[b.name], synth[b.name], b.is_numeric)
        pairs[key] = contingency_similarity(ra, rb, sa, sb)
    score = float(np.mean(list(pairs.values())))
    return (score, pairs) if breakdown else score


def _u_distribution(n1: int, n2: int) -> np.ndarray:
    """Exact null counts of U for sample sizes (n1, n2) without ties: the
    coefficients of the Gaussian binomial ``[n1 + n2 choose n1]_q``."""
    m = min(n1, n2)
    n = max(n1, n2)
    coef = np.zeros(m * n + 1, dtype=object)
    coef[0] = 1
    for i in range(1, m + 1):
        # multiply by (1 - q^(n+i))
        shift = n + i
        new = coef.copy()
        if shift < len(coef):
            new[shift:] -= coef[:-shift]
        # divide by (1 - q^i): running sum with stride i
        for r in range(i):
            new[r::i] = np.cumsum(new[r::i])
        coef = new
    return coef


def mwu_p(a, b, alternative: str = LESS, method: str = "auto") -> float:
    """One-sided Mann-Whitney U p-value; ``less`` tests H1: ``a`` stochastically smaller.

    ``method``: ``exact`` enumerates the null distribution of U (ties are ranked
    by midranks but the tie-free null is used); ``asymptotic`` is the normal
    approximation with tie and continuity corrections; ``auto`` uses exact when
    the smaller sample has at most 8 values or both have at most 20.
    """
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    if alternative not in (LESS, GREATER):
        raise ValueError(f"unknown alternative {alternative!r}")
    ranks = rankdata(np.concatenate([a, b]))
    u1 = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    # U1 small <=> a tends to be smaller
    stat = u1 if alternative == LESS else n1 * n2 - u1
    if method == "auto":
        method = "exact" if min(n1, n2) <= 8 or max(n1, n2) <= 20 else "asymptotic"
    if method == "exact":
        counts = _u_distribution(n1, n2)
        total = sum(counts)
        k = int(math.floor(stat + 1e-9))
        return float(min(1.0, sum(counts[: k + 1]) / total))
    if method != "asymptotic":
        raise ValueError(f"unknown method {method!r}")
    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / (n * (n - 1))
    sigma = math.sqrt(n1 * n2 / 12.0 * ((n + 1) - tie_term))
    if sigma == 0:
        return 1.0
    z = (stat - n1 * n2 / 2.0 + 0.5) / sigma
    return float(special.ndtr(z))


def quantile_transform_fit(train_col, n_quantiles: int = 1000):
    """References for a uniform-output quantile transform fitted on ``train_col``."""
    x = np.asarray(train_col, float)
    nq = min(n_quantiles, len(x))
    refs = np.linspace(0, 1, nq)
    return np.quantile(x, refs), refs


def quantile_transform_apply(col, quantiles, refs) -> np.ndarray:
    x = np.asarray(col, float)
    # average forward and reverse interpolation so repeated quantiles map to their midpoint
    fwd = np.interp(x, quantiles, refs)
    rev = -np.interp(-x, -quantiles[::-1], -refs[::-1])
    return np.clip(0.5 * (fwd + rev), 0.0, 1.0)


def dcr_features(train: Table, *others: Table, n_quantiles: int = 1000) -> list[np.ndarray]:
    blocks = [[] for _ in range(1 + len(others))]
    for c in train.schema.columns:
        tables = (train,) + others
        if c.is_numeric:
            qs, refs = quantile_transform_fit(train[c.name], n_quantiles)
            for k, t in enumerate(tables):
                blocks[k].append(quantile_transform_apply(t[c.name], qs, refs)[:, None])
        else:
            cats = sorted({str(v) for v in train[c.name]})
            for k, t in enumerate(tables):
                col = np.array([str(v) for v in t[c.name]], dtype=object)
                blocks[k].append((col[:, None] == np.array(cats, dtype=object)[None, :]).astype(float))
    return [np.hstack(b) for b in blocks]


def min_cosine_distance(queries: np.ndarray, reference: np.ndarray, chunk: int = 2048) -> np.ndarray:
    def unit(m):
        norm = np.linalg.norm(m, axis=1, keepdims=True)
        return m / np.where(norm == 0, 1.0, norm)
    r = unit(reference)
    out = np.empty(len(queries))
    for i in range(0, len(queries), chunk):
        sims = unit(queries[i:i + chunk]) @ r.T
        out[i:i + chunk] = 1.0 - sims.max(axis=1)
    return np.clip(out, 0.0, 2.0)


def dcr_test(train: Table, test: Table, synth: Table, seed: int = 0, return_distances: bool = False):
    """p-value of H1: synthetic rows lie closer to the training rows than held-out
    real rows do. Small p flags a disclosure risk."""
    _check_same_schema(train, test, synth)
    if min(train.n_rows, test.n_rows, synth.n_rows) == 0:
        raise DataError("DCR needs nonempty train, test and synthetic tables")
    if synth.n_rows > test.n_rows:
        idx = np.sort(np.random.default_rng(seed).choice(synth.n_rows, test.n_rows, replace=False))
        synth = synth.take(idx)
    f_train, f_test, f_synth = dcr_features(train, test, synth)
    d_test = min_cosine_distance(f_test, f_train)
    d_synth = min_cosine_distance(f_synth, f_train)
    p = mwu_p(d_synth, d_test, alternative=LESS)
    return (p, d_test, d_synth) if return_distances else p


def auc_roc(labels, scores) -> float:
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, float)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def weighted_auc(labels, score_matrix, classes) -> float:
    """Prevalence-weighted one-vs-rest AUC; ``score_matrix[:, k]`` scores ``classes[k]``."""
    labels = np.asarray(labels, dtype=object)
    if len(classes) == 2:
        return auc_roc(labels == classes[1], score_matrix[:, 1])
    total, weight = 0.0, 0.0
    for k, c in enumerate(classes):
        y = labels == c
        if y.all() or not y.any():
            continue
        w = y.mean()
        total += w * auc_roc(y, score_matrix[:, k])
        weight += w
    return total / weight


def r2(y, yhat) -> float:
    y, yhat = np.asarray(y, float), np.asarray(yhat, float)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("R^2 undefined for a constant target")
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


class _Design:
    """One-hot categoricals plus standardised numerics, fitted on one table."""

    def __init__(self, t: Table, features):
        self.features = features
        self.cats, self.stats = {}, {}
        for f in features:
            if t.schema[f].is_numeric:
                x = np.asarray(t[f], float)
                self.stats[f] = (x.mean(), x.std() or 1.0)
            else:
                self.cats[f] = sorted({str(v) for v in t[f]})

    def __call__(self, t: Table) -> np.ndarray:
        cols = [np.ones((t.n_rows, 1))]
        for f in self.features:
            if f in self.stats:
                mu, sd = self.stats[f]
                cols.append(((np.asarray(t[f], float) - mu) / sd)[:, None])
            else:
                v = np.array([str(x) for x in t[f]], dtype=object)
                cols.append((v[:, None] == np.array(self.cats[f], dtype=object)[None, :]).astype(float))
        return np.hstack(cols)


def _fit_logistic(x, y, l2=1e-4):
    def f(w):
        z = x @ w
        loss = np.mean(np.logaddexp(0, z) - y * z) + 0.5 * l2 * (w[1:] @ w[1:])
        g = x.T @ (special.expit(z) - y) / len(y)
        g[1:] += l2 * w[1:]
        return loss, g
    return optimize.minimize(f, np.zeros(x.shape[1]), jac=True, method="L-BFGS-B").x


def _fit_linear(x, y, l2=1e-6):
    def f(w):
        r = x @ w - y
        g = x.T @ r / len(y)
        g[1:] += l2 * w[1:]
        return 0.5 * np.mean(r * r) + 0.5 * l2 * (w[1:] @ w[1:]), g
    return optimize.minimize(f, np.zeros(x.shape[1]), jac=True, method="L-BFGS-B").x


def _model_scores(train: Table, test: Table, target: str, model: str, seed: int):
    """Fit on ``train``, score ``test``. Returns (score, flag)."""
    features = [n for n in train.schema.names if n != target]
    numeric_target = train.schema[target].is_numeric
    if numeric_target:
        y = np.asarray(train[target], float)
        if np.ptp(y) == 0:
            return 0.0, "constant target in training data"
        if model == "linear":
            design = _Design(train, features)
            pred = design(test) @ _fit_linear(design(train), y)
        else:
            pred = predict(fit_gbm(train, target, TreeParams(), seed), test)
        return r2(test[target], pred), None
    labels = np.array([str(v) for v in train[target]], dtype=object)
    test_labels = np.array([str(v) for v in test[target]], dtype=object)
    classes = sorted(set(labels.tolist()) | set(test_labels.tolist()))
    if len(set(labels.tolist())) < 2:
        return 0.5, "single class in training data"
    scores = np.zeros((test.n_rows, len(classes)))
    targets = classes[1:] if len(classes) == 2 else classes
    for c in targets:
        k = classes.index(c)
        yc = (labels == c).astype(float)
        if yc.sum() == 0:
            continue
        if model == "linear":
            design = _Design(train, features)
            scores[:, k] = special.expit(design(test) @ _fit_logistic(design(train), yc))
        else:
            # binary view of the target so the ensemble's positive class is ``c``
            data = dict(train.data)
            data[target] = np.where(labels == c, "1", "0").astype(object)
            bin_train = Table(train.schema, data)
            if len(set(data[target].tolist())) < 2:
                continue
            scores[:, k] = predict(fit_gbm(bin_train, target, TreeParams(), seed), test)
    return weighted_auc(test_labels, scores, classes), None


def mle_tstr(real_train: Table, synth: Table, real_test: Table, target: str, seed: int = 0,
             models=("linear", "gbm")) -> dict:
    """Train-on-synthetic/test-on-real scores next to the real-trained baseline."""
    _check_same_schema(real_train, synth, real_test)
    if target not in real_train.schema.names:
        raise DataError(f"unknown target {target!r}")
    metric = "r2" if real_train.schema[target].is_numeric else "weighted_auc"
    out = {"metric": metric, "tstr": {}, "trtr": {}, "relative_error": {}, "flags": {}}
    for m in models:
        s, flag = _model_scores(synth, real_test, target, m, seed)
        r, _ = _model_scores(real_train, real_test, target, m, seed)
        out["tstr"][m], out["trtr"][m] = s, r
        out["relative_error"][m] = abs(s - r) / abs(r) if r else float("nan")
        if flag:
            out["flags"][m] = flag
    return out


@dataclass
class EvalReport:
    shape: float
    trend: float
    dcr_p: float | None
    mle: dict | None
    breakdown: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "trend": self.trend, "dcr_p": self.dcr_p,
             "breakdown": self.breakdown, "meta": self.meta}
        if self.mle is not None:
            d["mle"] = self.mle
        return d


def evaluate(train: Table, test: Table, synth: Table, target: str | None = None, seed: int = 0,
             skip_mle: bool = False) -> EvalReport:
    _check_same_schema(train, test, synth)
    shape, shape_cols = shape_score(train, synth, breakdown=True)
    trend, trend_pairs = trend_score(train, synth, breakdown=True) if len(train.schema) > 1 else (1.0, {})
    p = dcr_test(train, test, synth, seed)
    mle = None
    if not skip_mle and target is not None:
        tstr = mle_tstr(train, synth, test, target, seed)
        mle = {m: tstr["tstr"][m] for m in tstr["tstr"]}
        mle["detail"] = tstr
    return EvalReport(
        shape, trend, p, mle,
        breakdown={"shape": shape_cols, "trend": trend_pairs,
                   "trend_mixed_pairs": "numeric side cut at real-data deciles"},
        meta={"seed": seed, "n_real": train.n_rows, "n_test": test.n_rows, "n_synth": synth.n_rows,
              "target": target},
    )
