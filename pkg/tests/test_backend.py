"""The compiled kernels and the numpy fallback must agree bit for bit."""

import os
import subprocess
import sys

import numpy as np
import pytest

from dect_extract import _backend, _fallback
from dect_extract.imaging import AffineTransform2D, ImageGrid, resample
from dect_extract.models import RepTreeParams, fit_rep_tree

cython = pytest.importorskip("dect_extract._kernels", reason="compiled extension not built")


def test_selection_and_switching():
    assert _backend.available()[-1] == "numpy"
    prev = _backend.use("numpy")
    try:
        assert _backend.kernels is _fallback
    finally:
        _backend.use(prev)
    with pytest.raises(ValueError):
        _backend.use("fortran")


def test_env_var_forces_fallback():
    out = subprocess.run(
        [sys.executable, "-c", "from dect_extract import _backend; print(_backend.kernels.NAME)"],
        env={**os.environ, "DECT_EXTRACT_PURE": "1"}, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_bilinear_identical(rng):
    img = rng.normal(size=(37, 41)) * 500
    for coeffs in [(1, 0, 0, 0, 1, 0), (0.5, 0.1, -3, -0.2, 0.7, 4.5), (2.1, 0, 0.3, 0, 1.9, -0.7)]:
        a = cython.bilinear_affine(img, *coeffs, 50, 45)
        b = _fallback.bilinear_affine(img, *coeffs, 50, 45)
        assert np.array_equal(a, b)
    xs, ys = rng.uniform(-3, 44, 1000), rng.uniform(-3, 40, 1000)
    assert np.array_equal(cython.bilinear_points(img, xs, ys), _fallback.bilinear_points(img, xs, ys))


def test_best_split_identical(rng):
    for n in (2, 3, 10, 257, 5000):
        x = np.sort(np.round(rng.normal(size=n), 1))
        y = rng.normal(size=n) * 100
        for ml in (1.0, 2.0, 7.0):
            assert cython.best_split(x, y, ml, float(y.mean())) == _fallback.best_split(x, y, ml, float(y.mean()))


def test_route_leaves_identical(rng):
    X = rng.normal(size=(3000, 2))
    y = X[:, 0] * np.sin(3 * X[:, 1])
    tree = fit_rep_tree((X, y))
    args = (X, tree.feature, tree.threshold, tree.left, tree.right)
    assert np.array_equal(cython.route_leaves(*args), _fallback.route_leaves(*args))


def test_tree_and_resample_identical_end_to_end(rng):
    X = rng.normal(size=(20000, 2)) * [300, 200]
    y = np.maximum(0.0, 0.8 * (X[:, 0] - X[:, 1]))
    trees, imgs = [], []
    src = ImageGrid(rng.normal(size=(64, 64)))
    t = AffineTransform2D.similarity(1.7, 1.2, (32, 32), (50, 50))
    for name in _backend.available():
        prev = _backend.use(name)
        try:
            trees.append(fit_rep_tree((X, y), params=RepTreeParams()))
            imgs.append(resample(src, t, 100, 100))
        finally:
            _backend.use(prev)
    assert trees[0] == trees[1]
    assert imgs[0] == imgs[1]
