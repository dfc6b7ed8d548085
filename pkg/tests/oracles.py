"""Independent reference implementations used by the tests.

Written for clarity, not speed: scalar loops, direct formulas, ``math.fsum``.
"""

import math

import numpy as np


def naive_bilinear(img, x, y):
    """Scalar reference: clamp, then weight the four neighbours."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def naive_pearson(a, b):
    a, b = list(map(float, np.ravel(a))), list(map(float, np.ravel(b)))
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    sab = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = math.fsum((x - ma) ** 2 for x in a)
    sbb = math.fsum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def naive_ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03, L=None):
    """One window at a time: weighted means, weighted central moments."""
    half = (window - 1) / 2.0
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(window)]
    s = math.fsum(g)
    g = [v / s for v in g]
    if L is None:
        L = float(x.max() - x.min())
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, w = x.shape
    vals = []
    for r in range(h - window + 1):
        for c in range(w - window + 1):
            wts, xs, ys = [], [], []
            for i in range(window):
                for j in range(window):
                    wts.append(g[i] * g[j])
                    xs.append(float(x[r + i, c + j]))
                    ys.append(float(y[r + i, c + j]))
            mx = math.fsum(wt * v for wt, v in zip(wts, xs))
            my = math.fsum(wt * v for wt, v in zip(wts, ys))
            vx = math.fsum(wt * (v - mx) ** 2 for wt, v in zip(wts, xs))
            vy = math.fsum(wt * (v - my) ** 2 for wt, v in zip(wts, ys))
            cxy = math.fsum(wt * (u - mx) * (v - my) for wt, u, v in zip(wts, xs, ys))
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return math.fsum(vals) / len(vals)


def sse(vals):
    if not vals:
        return 0.0
    m = math.fsum(vals) / len(vals)
    return math.fsum((v - m) ** 2 for v in vals)


def oracle_best_split(X, y, min_leaf):
    """Every feature, every midpoint between distinct values, SSE computed directly."""
    base = sse(list(y))
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2.0
            left = [float(t) for x, t in zip(X[:, f], y) if x < thr]
            right = [float(t) for x, t in zip(X[:, f], y) if x >= thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            gain = base - sse(left) - sse(right)
            if gain > 0 and (best is None or gain > best[0] + 1e-9 * max(1.0, base)):
                best = (gain, f, thr)
    return best


def oracle_grow(X, y, min_leaf=2, var_prop=0.001, max_depth=None):
    root_var = float(np.var(y))

    def rec(idx, depth):
        ys = [float(y[i]) for i in idx]
        mean = math.fsum(ys) / len(ys)
        leaf = ("LEAF", mean, len(ys))
        if len(ys) < 2 * min_leaf or (max_depth is not None and depth >= max_depth):
            return leaf
        if sse(ys) / len(ys) <= var_prop * root_var:
            return leaf
        best = oracle_best_split(X[idx], y[idx], min_leaf)
        if best is None:
            return leaf
        _, f, thr = best
        li = [i for i in idx if X[i, f] < thr]
        ri = [i for i in idx if X[i, f] >= thr]
        return ("SPLIT", f, thr, rec(li, depth + 1), rec(ri, depth + 1))

    return rec(list(range(len(y))), 0)


def oracle_prune(node, X, y):
    """Returns (pruned node, pruning SSE)."""
    if node[0] == "LEAF":
        return node, math.fsum((float(t) - node[1]) ** 2 for t in y)
    _, f, thr, lt, rt = node
    mask = X[:, f] < thr
    lp, le = oracle_prune(lt, X[mask], y[mask])
    rp, re = oracle_prune(rt, X[~mask], y[~mask])
    mean, count = leaf_stats(node)
    as_leaf = math.fsum((float(t) - mean) ** 2 for t in y)
    if as_leaf <= le + re:
        return ("LEAF", mean, count), as_leaf
    return ("SPLIT", f, thr, lp, rp), le + re


def leaf_stats(node):
    if node[0] == "LEAF":
        return node[1], node[2]
    lm, lc = leaf_stats(node[3])
    rm, rc = leaf_stats(node[4])
    return (lm * lc + rm * rc) / (lc + rc), lc + rc
