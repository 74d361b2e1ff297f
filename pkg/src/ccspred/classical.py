"""Multiple linear regression, a variance-reduction regression tree, and a bagged forest.

Trees work on the raw feature matrix (numeric columns followed by categorical
vocabulary indices). Numeric splits send ``x <= threshold`` left; categorical
splits are one-vs-rest and send ``x == category`` left.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DimensionError, SolverError

# relative floor on the accepted variance reduction; absorbs round-off on ties
GAIN_RTOL = 1e-12


# -- linear regression ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearModel:
    coef: np.ndarray
    intercept: float
    residuals: np.ndarray = None

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != len(self.coef):
            raise DimensionError(f"expected {len(self.coef)} columns, got {X.shape[1]}")
        return X @ self.coef + self.intercept


def fit_linear(X, y, ridge=1e-8):
    """Least squares with an unpenalised intercept.

    Columns are centred (which removes the intercept from the system) and
    equilibrated to unit scale before solving
    ``(XᵀX + ridge·I) β = Xᵀy``; the ridge keeps one-hot groups, which are
    collinear with the intercept, uniquely solvable.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if n == 0:
        raise DimensionError("fit_linear needs at least one row")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    scale = np.sqrt((Xc * Xc).sum(axis=0) / n)
    scale[scale == 0] = 1.0
    Xs = Xc / scale
    A = Xs.T @ Xs + ridge * np.eye(p)
    b = Xs.T @ (y - y_mean)
    try:
        gamma = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"normal equations are singular: {exc}") from None
    if not np.isfinite(gamma).all():
        raise SolverError("normal equations produced non-finite coefficients")
    coef = gamma / scale
    intercept = float(y_mean - x_mean @ coef)
    return LinearModel(coef, intercept, y - (X @ coef + intercept))


def predict_linear(model, X):
    return model.predict(X)


# -- regression tree kernels ------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _next_u64(state):
    # splitmix64
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def _rand_below(state, n):
    return np.int64(_next_u64(state) % np.uint64(n))


@numba.njit(cache=True, nogil=True)
def _split_feature(X, yc, samples, f, is_cat, n_cat, min_leaf, best_gain):
    """Best split of one feature; returns (gain, threshold), gain <= best_gain if none better."""
    n = samples.shape[0]
    total = 0.0
    for i in range(n):
        total += yc[i]
    base = total * total / n
    best_thr = 0.0
    if is_cat[f]:
        k = n_cat[f]
        cnt = np.zeros(k, np.int64)
        sm = np.zeros(k)
        for i in range(n):
            c = np.int64(X[samples[i], f])
            cnt[c] += 1
            sm[c] += yc[i]
        for c in range(k):
            nl = cnt[c]
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = sm[c]
            sr = total - sl
            gain = (sl * sl / nl + sr * sr / nr - base) / n
            if gain > best_gain:
                best_gain = gain
                best_thr = float(c)
    else:
        xs = np.empty(n)
        for i in range(n):
            xs[i] = X[samples[i], f]
        order = np.argsort(xs, kind="mergesort")
        sl = 0.0
        for i in range(n - 1):
            sl += yc[order[i]]
            nl = i + 1
            nr = n - nl
            a = xs[order[i]]
            b = xs[order[i + 1]]
            if a == b or nl < min_leaf or nr < min_leaf:
                continue
            sr = total - sl
            gain = (sl * sl / nl + sr * sr / nr - base) / n
            if gain > best_gain:
                best_gain = gain
                thr = 0.5 * (a + b)
                if thr >= b:
                    thr = a
                best_thr = thr
    return best_gain, best_thr


@numba.njit(cache=True, nogil=True)
def _best_split(X, y, samples, features, is_cat, n_cat, min_leaf):
    """Scan ``features`` in the given (ascending) order; strict improvement wins ties."""
    n = samples.shape[0]
    mu = 0.0
    for i in range(n):
        mu += y[samples[i]]
    mu /= n
    yc = np.empty(n)
    var = 0.0
    for i in range(n):
        yc[i] = y[samples[i]] - mu
        var += yc[i] * yc[i]
    var /= n
    floor = GAIN_RTOL * var
    best_gain = floor
    best_f = -1
    best_thr = 0.0
    for f in features:
        g, t = _split_feature(X, yc, samples, f, is_cat, n_cat, min_leaf, best_gain)
        if g > best_gain:
            best_gain = g
            best_f = f
            best_thr = t
    if best_f < 0:
        return -1, 0.0, 0.0
    return best_f, best_thr, best_gain


@numba.njit(cache=True, nogil=True)
def _pick_features(X, samples, m_try, is_cat, rng_state):
    """Up to ``m_try`` features non-constant in the node, drawn without replacement, sorted."""
    p = X.shape[1]
    perm = np.arange(p)
    if m_try >= p:
        return perm
    chosen = np.empty(p, np.int64)
    n_chosen = 0
    for i in range(p):
        j = i + _rand_below(rng_state, p - i)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
        f = perm[i]
        first = X[samples[0], f]
        constant = True
        for s in range(1, samples.shape[0]):
            if X[samples[s], f] != first:
                constant = False
                break
        if not constant:
            chosen[n_chosen] = f
            n_chosen += 1
            if n_chosen == m_try:
                break
    return np.sort(chosen[:n_chosen])


@numba.njit(cache=True, nogil=True)
def _build_tree(X, y, samples, is_cat, n_cat, max_depth, min_split, min_leaf, m_try, seed):
    n_total = samples.shape[0]
    cap = 2 * n_total + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    gain = np.zeros(cap)
    rng_state = np.array([np.uint64(seed)], dtype=np.uint64)
    samples = samples.copy()

    # stack entries: node id, start, end, depth
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_total
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        idx = samples[start:end]
        n = end - start
        s = 0.0
        for i in range(n):
            s += y[idx[i]]
        value[node] = s / n
        count[node] = n
        if (max_depth >= 0 and depth >= max_depth) or n < min_split or n < 2 * min_leaf:
            continue
        feats = _pick_features(X, idx, m_try, is_cat, rng_state)
        if feats.shape[0] == 0:
            continue
        f, thr, g = _best_split(X, y, idx, feats, is_cat, n_cat, min_leaf)
        if f < 0:
            continue
        # stable partition of idx: left block then right block
        buf = np.empty(n, np.int64)
        nl = 0
        for i in range(n):
            v = X[idx[i], f]
            if (v == thr) if is_cat[f] else (v <= thr):
                buf[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(n):
            v = X[idx[i], f]
            if not ((v == thr) if is_cat[f] else (v <= thr)):
                buf[nr] = idx[i]
                nr += 1
        samples[start:end] = buf
        feature[node] = f
        threshold[node] = thr
        gain[node] = g * n
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        # push right first so the left subtree is numbered depth-first
        stack[top, 0] = rc
        stack[top, 1] = start + nl
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lc
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(),
            gain[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, is_cat, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            f = feature[node]
            v = X[i, f]
            go_left = (v == threshold[node]) if is_cat[f] else (v <= threshold[node])
            node = left[node] if go_left else right[node]
        out[i] = value[node]
    return out


# -- python surface ---------------------------------------------------------

@dataclass(frozen=True)
class Split:
    feature: int
    gain: float          # weighted variance reduction, Var(parent) - Σ (n_c/n) Var(child)
    threshold: float     # numeric threshold, or category index for categorical features
    categorical: bool


def best_split(X, y, is_categorical=None, features=None, min_samples_leaf=1):
    """Highest variance-reduction split over ``features``, or None.

    Numeric candidates are midpoints between consecutive distinct values;
    categorical candidates are one category vs the rest. Ties go to the lowest
    feature index, then the lowest threshold.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    p = X.shape[1]
    is_cat, n_cat = _cat_info(X, is_categorical)
    feats = np.arange(p) if features is None else np.sort(np.asarray(features, dtype=np.int64))
    if len(y) < 2:
        return None
    f, thr, g = _best_split(X, y, np.arange(len(y)), feats, is_cat, n_cat, min_samples_leaf)
    if f < 0:
        return None
    return Split(int(f), float(g), float(thr), bool(is_cat[f]))


def _cat_info(X, is_categorical, n_categories=None):
    p = X.shape[1]
    is_cat = np.zeros(p, dtype=np.bool_) if is_categorical is None else np.asarray(
        is_categorical, dtype=np.bool_)
    n_cat = np.zeros(p, dtype=np.int64)
    for j in np.flatnonzero(is_cat):
        seen = int(X[:, j].max()) + 1 if len(X) else 0
        n_cat[j] = max(seen, 0 if n_categories is None else n_categories[j])
    return is_cat, n_cat


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat array tree; node 0 is the root, ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray
    is_categorical: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(X, self.is_categorical, self.feature, self.threshold,
                             self.left, self.right, self.value)

    def feature_gains(self, p):
        """Total weighted variance reduction per feature."""
        out = np.zeros(p)
        internal = self.feature >= 0
        np.add.at(out, self.feature[internal], self.gain[internal])
        return out


def _tree_from_kernel(arrays, is_cat):
    return Tree(*arrays, is_categorical=is_cat)


def fit_tree(X, y, is_categorical=None, max_depth=12, min_samples_leaf=5,
             min_samples_split=10, n_categories=None, _samples=None, _m_try=None, _seed=0):
    """Greedy recursive partitioning; ``max_depth=None`` means unlimited."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if len(y) < 1:
        raise DimensionError("fit_tree needs at least one row")
    is_cat, n_cat = _cat_info(X, is_categorical, n_categories)
    samples = np.arange(len(y)) if _samples is None else np.asarray(_samples, dtype=np.int64)
    m_try = X.shape[1] if _m_try is None else int(_m_try)
    arrays = _build_tree(X, y, samples, is_cat, n_cat,
                         -1 if max_depth is None else int(max_depth),
                         int(min_samples_split), int(min_samples_leaf), m_try, np.uint64(_seed))
    return _tree_from_kernel(arrays, is_cat)


def predict_tree(tree, X):
    return tree.predict(X)


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    seeds: tuple
    m_try: int
    bootstrap: bool

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        total = np.zeros(len(X))
        for t in self.trees:
            total += t.predict(X)
        return total / len(self.trees)

    def feature_gains(self, p):
        """Per-tree normalised gains averaged over trees."""
        out = np.zeros(p)
        for t in self.trees:
            g = t.feature_gains(p)
            s = g.sum()
            if s > 0:
                out += g / s
        return out / len(self.trees)


def default_m_try(p):
    return max(1, p // 3)


def fit_forest(X, y, is_categorical=None, n_trees=200, m_try=None, max_depth=None,
               min_samples_leaf=1, min_samples_split=2, bootstrap=True, seed=0,
               n_jobs=1, n_categories=None):
    """Bagged trees with per-node feature subsampling.

    Tree ``i`` draws its bootstrap sample and feature RNG from the ``i``-th
    child of ``SeedSequence(seed)``, so results do not depend on ``n_jobs``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise DimensionError("fit_forest needs at least two rows")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    m_try = default_m_try(p) if m_try is None else int(m_try)
    if not 1 <= m_try <= p:
        raise ValueError(f"m_try must lie in [1, {p}], got {m_try}")
    is_cat, n_cat = _cat_info(X, is_categorical, n_categories)
    children = np.random.SeedSequence(seed).spawn(n_trees)
    depth = -1 if max_depth is None else int(max_depth)

    def build(i):
        rng = np.random.default_rng(children[i])
        samples = rng.integers(0, n, n) if bootstrap else np.arange(n)
        node_seed = np.uint64(rng.integers(0, 2 ** 63))
        arrays = _build_tree(X, y, samples, is_cat, n_cat, depth, int(min_samples_split),
                             int(min_samples_leaf), m_try, node_seed)
        return _tree_from_kernel(arrays, is_cat)

    if n_jobs == 1:
        trees = [build(i) for i in range(n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(n_trees)))
    seeds = tuple(int(c.generate_state(1, np.uint64)[0]) for c in children)
    return ForestModel(tuple(trees), seeds, m_try, bool(bootstrap))


def predict_forest(forest, X):
    return forest.predict(X)
