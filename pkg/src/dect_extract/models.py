"""Learners for pixel-wise model extraction.

Two linear estimators (unconstrained least squares and the one-parameter
blend ``alpha*high + (1-alpha)*low``) and a regression tree grown by
variance reduction and simplified by reduced-error pruning on a held-out fold.
"""

from __future__ import annotations

import io
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from dect_extract import _backend
from dect_extract.imaging import DualEnergySlice, ImageGrid

FEATURES = ("low", "high")
FORMAT_HEADER = "dect-extract-model v1"


class DegenerateFitError(ValueError):
    """The design matrix is rank deficient; ``direction`` spans its null space."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class InsufficientDataError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def as_arrays(rows, y=None):
    """Accept ``X, y`` arrays, an ``(X, y)`` tuple or a list of ``((low, high), target)`` rows."""
    if y is None and isinstance(rows, tuple) and len(rows) == 2 and isinstance(rows[0], np.ndarray) \
            and rows[0].ndim == 2:
        rows, y = rows
    if y is not None:
        X = np.asarray(rows, dtype=np.float64).reshape(-1, 2)
        y = np.asarray(y, dtype=np.float64).ravel()
    else:
        rows = list(rows)
        X = np.array([r[0] for r in rows], dtype=np.float64).reshape(-1, 2)
        y = np.array([r[1] for r in rows], dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    return X, y


# -- linear -----------------------------------------------------------------


@dataclass(frozen=True)
class LinearPixelModel:
    w_low: float
    w_high: float
    intercept: float = 0.0

    def __post_init__(self):
        for name in ("w_low", "w_high", "intercept"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def alpha(self) -> float:
        return self.w_high

    def predict_arrays(self, low, high):
        return self.w_low * np.asarray(low) + self.w_high * np.asarray(high) + self.intercept


def fit_ols(rows, y=None) -> LinearPixelModel:
    """Least-squares fit of ``t ~ w_low*l + w_high*h + b`` via Householder QR.

    Columns are scaled to unit norm before the factorisation so the rank test
    is independent of the intensity units.
    """
    X, t = as_arrays(rows, y)
    if X.shape[0] < 3:
        raise InsufficientDataError(f"need at least 3 rows for a 3-parameter fit, got {X.shape[0]}")
    A = np.column_stack([X, np.ones(X.shape[0])])
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    Q, R = np.linalg.qr(A / norms)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * diag.max():
        _, _, vt = np.linalg.svd(R)
        direction = vt[-1] / norms
        direction /= np.linalg.norm(direction)
        raise DegenerateFitError(
            "rank-deficient design; null direction (w_low, w_high, intercept) = "
            + ", ".join(f"{v:.6g}" for v in direction)
            + "; consider fit_constrained_blend",
            direction=direction,
        )
    coef = np.linalg.solve(R, Q.T @ t) / norms
    return LinearPixelModel(float(coef[0]), float(coef[1]), float(coef[2]))


def fit_constrained_blend(rows, y=None) -> LinearPixelModel:
    """Closed-form one-parameter fit ``t ~ alpha*h + (1-alpha)*l``."""
    X, t = as_arrays(rows, y)
    d = X[:, 1] - X[:, 0]
    denom = float(np.dot(d, d))
    if X.shape[0] == 0 or denom == 0.0:
        raise DegenerateFitError("alpha is unidentifiable: high equals low on every row")
    alpha = float(np.dot(d, t - X[:, 0])) / denom
    return LinearPixelModel(1.0 - alpha, alpha, 0.0)


def predict_linear(m: LinearPixelModel, s: DualEnergySlice) -> ImageGrid:
    return s.low.with_pixels(m.predict_arrays(s.low.pixels, s.high.pixels))


# -- regression tree -----------------------------------------------------------


@dataclass(frozen=True)
class RepTreeParams:
    min_instances: int = 2
    min_variance_proportion: float = 0.001
    max_depth: int | None = None
    num_folds: int = 3
    seed: int = 1

    def __post_init__(self):
        if self.min_instances < 1:
            raise ValueError("min_instances must be >= 1")
        if self.num_folds < 2:
            raise ValueError("num_folds must be >= 2")
        if not 0.0 < self.min_variance_proportion < 1.0:
            raise ValueError("min_variance_proportion must lie in (0, 1)")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")


@dataclass(eq=False)
class RegressionTree:
    """Flat array tree. ``feature[i] == -1`` marks a leaf; node 0 is the root.

    ``value`` is the mean of growing-set targets reaching the node, ``count``
    the number of those rows.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.intp)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.intp)
        self.right = np.asarray(self.right, dtype=np.intp)
        self.value = np.asarray(self.value, dtype=np.float64)
        self.count = np.asarray(self.count, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            i, d = stack.pop()
            best = max(best, d)
            if self.feature[i] >= 0:
                stack.append((self.left[i], d + 1))
                stack.append((self.right[i], d + 1))
        return best

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.ascontiguousarray(X, dtype=np.float64).reshape(-1, 2)
        return _backend.kernels.route_leaves(X, self.feature, self.threshold, self.left, self.right)

    def predict_rows(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def structure(self):
        """Nested tuples, convenient for structural equality checks."""

        def rec(i):
            if self.feature[i] < 0:
                return ("LEAF", float(self.value[i]), int(self.count[i]))
            return ("SPLIT", int(self.feature[i]), float(self.threshold[i]), rec(self.left[i]), rec(self.right[i]))

        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10 * self.n_nodes + 100))
        try:
            return rec(0)
        finally:
            sys.setrecursionlimit(limit)

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "threshold", "left", "right", "value", "count")
        )


class _Builder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right = [], [], [], []
        self.value, self.count = [], []

    def add(self, value, count):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.count.append(count)
        return len(self.feature) - 1

    def build(self, **info):
        return RegressionTree(self.feature, self.threshold, self.left, self.right,
                              self.value, self.count, info)


_TIE_RTOL = 1e-12


def split_folds(n: int, num_folds: int, seed: int):
    """Seeded shuffle into ``num_folds`` near-equal folds; returns (grow, prune) indices."""
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, num_folds)
    return np.sort(np.concatenate(folds[1:])), np.sort(folds[0])


def grow_tree(X, y, params: RepTreeParams = RepTreeParams()) -> RegressionTree:
    """Greedy variance-reduction growth on all given rows (no pruning)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise InsufficientDataError("cannot grow a tree on zero rows")
    kern = _backend.kernels
    order = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    root_var = float(np.var(y))
    var_floor = params.min_variance_proportion * root_var
    max_depth = params.max_depth if params.max_depth is not None else math.inf
    min_leaf = params.min_instances
    mask = np.zeros(n, dtype=bool)

    b = _Builder()
    # (node id, depth, per-feature sorted row indices)
    root = b.add(0.0, n)
    stack = [(root, 0, order)]
    while stack:
        node, depth, idx = stack.pop()
        rows = idx[0]
        yn = y[rows]
        cnt = rows.shape[0]
        mean = float(np.mean(yn))
        b.value[node] = mean
        b.count[node] = cnt
        if cnt < 2 * min_leaf or depth >= max_depth or float(np.var(yn)) <= var_floor:
            continue
        best = (0.0, -1, 0.0, 0)
        for f in range(X.shape[1]):
            srt = idx[f]
            gain, thr, n_left = kern.best_split(X[srt, f], y[srt], float(min_leaf), mean)
            # a later feature must win by more than rounding noise, so that equal
            # partitions found on both features resolve to the first one
            if n_left and gain > best[0] + _TIE_RTOL * abs(best[0]):
                best = (gain, f, thr, n_left)
        gain, f, thr, n_left = best
        if f < 0:
            continue
        left_rows = idx[f][:n_left]
        mask[left_rows] = True
        left_idx, right_idx = [], []
        for g in range(X.shape[1]):
            srt = idx[g]
            m = mask[srt]
            left_idx.append(srt[m])
            right_idx.append(srt[~m])
        mask[left_rows] = False
        lid = b.add(0.0, n_left)
        rid = b.add(0.0, cnt - n_left)
        b.feature[node] = f
        b.threshold[node] = thr
        b.left[node] = lid
        b.right[node] = rid
        # right pushed first so the left subtree is expanded first
        stack.append((rid, depth + 1, right_idx))
        stack.append((lid, depth + 1, left_idx))
    tree = b.build(root_variance=root_var)
    return _renumber(tree, np.ones(tree.n_nodes, dtype=bool))


def _renumber(tree: RegressionTree, keep_split: np.ndarray) -> RegressionTree:
    """Copy reachable nodes into preorder; nodes with ``keep_split`` False become leaves."""
    b = _Builder()
    stack = [(0, None, None)]
    while stack:
        old, parent, side = stack.pop()
        new = b.add(float(tree.value[old]), int(tree.count[old]))
        if parent is not None:
            (b.left if side == 0 else b.right)[parent] = new
        if tree.feature[old] >= 0 and keep_split[old]:
            b.feature[new] = int(tree.feature[old])
            b.threshold[new] = float(tree.threshold[old])
            stack.append((tree.right[old], new, 1))
            stack.append((tree.left[old], new, 0))
    return b.build(**tree.info)


def reduced_error_prune(tree: RegressionTree, X_prune, y_prune) -> RegressionTree:
    """Bottom-up replacement of subtrees by leaves when the pruning-set squared
    error does not increase. Subtrees reached by no pruning rows collapse."""
    X_prune = np.ascontiguousarray(X_prune, dtype=np.float64).reshape(-1, 2)
    y_prune = np.asarray(y_prune, dtype=np.float64)
    n_nodes = tree.n_nodes
    keep = np.ones(n_nodes, dtype=bool)
    err = np.zeros(n_nodes)
    reach = [None] * n_nodes
    reach[0] = np.arange(y_prune.shape[0])
    # preorder ids: parents precede children, so a reversed sweep is post-order
    for i in range(n_nodes):
        rows = reach[i]
        if tree.feature[i] >= 0:
            go_left = X_prune[rows, tree.feature[i]] < tree.threshold[i]
            reach[tree.left[i]] = rows[go_left]
            reach[tree.right[i]] = rows[~go_left]
    for i in range(n_nodes - 1, -1, -1):
        r = y_prune[reach[i]] - tree.value[i]
        as_leaf = float(np.dot(r, r))
        if tree.feature[i] < 0:
            err[i] = as_leaf
            continue
        sub = err[tree.left[i]] + err[tree.right[i]]
        if as_leaf <= sub:
            keep[i] = False
            err[i] = as_leaf
        else:
            err[i] = sub
        reach[tree.left[i]] = reach[tree.right[i]] = None
    pruned = _renumber(tree, keep)
    pruned.info["prune_error"] = float(err[0])
    return pruned


def fit_rep_tree(rows, y=None, params: RepTreeParams = RepTreeParams()) -> RegressionTree:
    """Grow on folds 2..k of a seeded shuffle, prune against fold 1."""
    X, t = as_arrays(rows, y)
    n = X.shape[0]
    if n < params.num_folds:
        raise InsufficientDataError(f"need at least num_folds={params.num_folds} rows, got {n}")
    grow, prune = split_folds(n, params.num_folds, params.seed)
    grown = grow_tree(X[grow], t[grow], params)
    pruned = reduced_error_prune(grown, X[prune], t[prune])
    pruned.info.update(
        rows=int(n),
        growing_rows=int(grow.shape[0]),
        pruning_rows=int(prune.shape[0]),
        grown_nodes=grown.n_nodes,
        grown_leaves=grown.n_leaves,
        pruned_nodes=pruned.n_nodes,
        pruned_leaves=pruned.n_leaves,
    )
    return pruned


def predict_tree(tree: RegressionTree, s: DualEnergySlice) -> ImageGrid:
    X = np.column_stack([s.low.pixels.ravel(), s.high.pixels.ravel()])
    return s.low.with_pixels(tree.predict_rows(X).reshape(s.shape))


def predict(model, s: DualEnergySlice) -> ImageGrid:
    if isinstance(model, LinearPixelModel):
        return predict_linear(model, s)
    return predict_tree(model, s)


# -- text serialization -----------------------------------------------------------


def dumps(model) -> str:
    out = io.StringIO()
    out.write(FORMAT_HEADER + "\n")
    if isinstance(model, LinearPixelModel):
        out.write("kind linear\n")
        out.write(f"w_low {model.w_low!r}\n")
        out.write(f"w_high {model.w_high!r}\n")
        out.write(f"intercept {model.intercept!r}\n")
        return out.getvalue()
    out.write("kind reptree\n")
    out.write(f"nodes {model.n_nodes}\n")
    stack = [(0, 0)]
    while stack:
        i, depth = stack.pop()
        pad = "  " * depth
        if model.feature[i] < 0:
            out.write(f"{pad}LEAF {float(model.value[i])!r} {int(model.count[i])}\n")
        else:
            out.write(f"{pad}SPLIT {FEATURES[model.feature[i]]} {float(model.threshold[i])!r}\n")
            stack.append((model.right[i], depth + 1))
            stack.append((model.left[i], depth + 1))
    return out.getvalue()


def loads(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ModelFormatError(f"missing header {FORMAT_HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith("kind "):
        raise ModelFormatError("missing 'kind' line")
    kind = lines[1].split()[1]
    if kind == "linear":
        vals = {}
        for ln in lines[2:]:
            if ln.strip():
                key, val = ln.split()
                vals[key] = float(val)
        try:
            return LinearPixelModel(vals["w_low"], vals["w_high"], vals["intercept"])
        except KeyError as exc:
            raise ModelFormatError(f"linear model lacks coefficient {exc}") from None
    if kind != "reptree":
        raise ModelFormatError(f"unknown model kind {kind!r}")
    b = _Builder()
    # open split nodes waiting for children: (node id, depth)
    pending = []
    for ln in lines[3:]:
        if not ln.strip():
            continue
        depth = (len(ln) - len(ln.lstrip(" "))) // 2
        parts = ln.split()
        while pending and pending[-1][1] >= depth:
            pending.pop()
        if parts[0] == "LEAF":
            node = b.add(float(parts[1]), int(parts[2]))
        elif parts[0] == "SPLIT":
            node = b.add(0.0, 0)
            b.feature[node] = FEATURES.index(parts[1])
            b.threshold[node] = float(parts[2])
        else:
            raise ModelFormatError(f"bad node line {ln!r}")
        if pending:
            parent = pending[-1][0]
            if b.left[parent] < 0:
                b.left[parent] = node
            else:
                b.right[parent] = node
                pending.pop()
        if parts[0] == "SPLIT":
            pending.append((node, depth))
    tree = b.build()
    # split nodes carry the total of their children
    for i in range(tree.n_nodes - 1, -1, -1):
        if tree.feature[i] >= 0:
            tree.count[i] = tree.count[tree.left[i]] + tree.count[tree.right[i]]
            c = tree.count[i]
            tree.value[i] = (
                (tree.value[tree.left[i]] * tree.count[tree.left[i]]
                 + tree.value[tree.right[i]] * tree.count[tree.right[i]]) / c
                if c else 0.0
            )
    return tree


def save(model, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
