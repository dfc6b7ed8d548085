"""Pure numpy implementations of the hot kernels.

Each function mirrors one in ``_kernels.pyx`` and must produce bit-identical
results; the arithmetic is written in the same order on purpose.
"""

import numpy as np

NAME = "numpy"


def _lerp(a, b, f):
    v = a + f * (b - a)
    v = np.minimum(np.maximum(v, np.minimum(a, b)), np.maximum(a, b))
    return np.where(f == 0.0, a, v)


def bilinear_points(img, xs, ys):
    """Bilinear samples of ``img`` at float coordinates, clamped to the edge."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    h, w = img.shape
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = _lerp(img[y0, x0], img[y0, x1], fx)
    bot = _lerp(img[y1, x0], img[y1, x1], fx)
    return _lerp(top, bot, fy)


def bilinear_affine(img, a, b, tx, c, d, ty, out_h, out_w):
    v, u = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    xs = a * u + b * v + tx
    ys = c * u + d * v + ty
    return bilinear_points(img, xs, ys)


def best_split(x_sorted, y_sorted, min_leaf, mean):
    """Best variance-reduction split of one feature.

    ``x_sorted`` ascending, ``y_sorted`` the matching targets, ``mean`` the
    node mean. Returns ``(gain, threshold, n_left)``; ``n_left == 0`` means no
    admissible split. Ties keep the lowest threshold.
    """
    n = x_sorted.shape[0]
    if n < 2:
        return 0.0, 0.0, 0
    s = np.cumsum(y_sorted - mean)
    total = s[-1]
    n_l = np.arange(1, n, dtype=np.float64)
    s_l = s[:-1]
    gain = s_l * s_l / n_l + (total - s_l) * (total - s_l) / (n - n_l) - total * total / n
    ok = x_sorted[:-1] < x_sorted[1:]
    ok &= n_l >= min_leaf
    ok &= (n - n_l) >= min_leaf
    if not ok.any():
        return 0.0, 0.0, 0
    gain = np.where(ok, gain, -np.inf)
    i = int(np.argmax(gain))
    lo, hi = x_sorted[i], x_sorted[i + 1]
    thr = (lo + hi) / 2.0
    if thr <= lo:
        thr = hi
    return float(gain[i]), float(thr), i + 1


def route_leaves(X, feature, threshold, left, right):
    """Index of the leaf each row of ``X`` lands in (root is node 0)."""
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.intp)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        nd = node[active]
        f = feature[nd]
        go_left = X[active, f] < threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return node
