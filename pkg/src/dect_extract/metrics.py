"""Fidelity metrics: Pearson correlation, Gaussian-window SSIM and scatter export."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from dect_extract.imaging import ImageGrid, ShapeError


class UndefinedCorrelationError(ValueError):
    pass


class WindowSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SsimParams:
    """SSIM constants (Wang et al. defaults). ``dynamic_range=None`` means
    ``max - min`` of the reference (first) image."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.sigma <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("sigma, k1 and k2 must be positive")
        if self.dynamic_range is not None and not self.dynamic_range > 0:
            raise ValueError("dynamic_range must be positive")

    def kernel_1d(self) -> np.ndarray:
        x = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * self.sigma * self.sigma))
        return g / g.sum()

    def window_weights(self) -> np.ndarray:
        g = self.kernel_1d()
        return np.outer(g, g)

    def describe(self) -> str:
        return f"gaussian{self.window}x{self.window} sigma={self.sigma} k1={self.k1} k2={self.k2}"


@dataclass(frozen=True)
class EvalReport:
    r: float
    ssim: float
    n_pixels: int
    slice_label: str = ""
    model_label: str = ""
    target_label: str = ""
    ssim_params: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.r) and math.isfinite(self.ssim)):
            raise ValueError("metrics must be finite")
        if self.n_pixels < 2:
            raise ValueError("a report needs at least 2 pixels")

    def passes(self, min_r: float, min_ssim: float) -> bool:
        return self.r >= min_r and self.ssim >= min_ssim

    def as_dict(self):
        return asdict(self)


def _pixels(img):
    return img.pixels if isinstance(img, ImageGrid) else np.asarray(img, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")


def pearson_r(a, b) -> float:
    """Sample Pearson correlation over all pixels (two-pass)."""
    x = _pixels(a).ravel()
    y = _pixels(b).ravel()
    _check_same_shape(x, y)
    if x.size < 2:
        raise UndefinedCorrelationError("need at least 2 pixels")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant image")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _filter_valid(img, g):
    k = g.shape[0]
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for i in range(k):
        rows += g[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += g[i] * rows[i : i + h - k + 1, :]
    return out


def ssim_map(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """SSIM index at every window position fully inside the image."""
    x = _pixels(a)
    y = _pixels(b)
    _check_same_shape(x, y)
    if x.shape[0] < p.window or x.shape[1] < p.window:
        raise WindowSizeError(
            f"image {x.shape[1]}x{x.shape[0]} is smaller than the {p.window}x{p.window} window; "
            "use a smaller SsimParams.window"
        )
    L = p.dynamic_range if p.dynamic_range is not None else float(x.max() - x.min())
    if not L > 0:
        L = 1.0
    c1 = (p.k1 * L) ** 2
    c2 = (p.k2 * L) ** 2
    g = p.kernel_1d()
    # second moments are shift invariant; centring first limits cancellation
    mx, my = float(x.mean()), float(y.mean())
    xc, yc = x - mx, y - my
    mu_xc = _filter_valid(xc, g)
    mu_yc = _filter_valid(yc, g)
    sxx = _filter_valid(xc * xc, g) - mu_xc * mu_xc
    syy = _filter_valid(yc * yc, g) - mu_yc * mu_yc
    sxy = _filter_valid(xc * yc, g) - mu_xc * mu_yc
    mu_x = mu_xc + mx
    mu_y = mu_yc + my
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, p: SsimParams = SsimParams()) -> float:
    return float(np.mean(ssim_map(a, b, p)))


def scatter_pairs(truth, pred, max_points: int = 10000, seed: int = 0):
    """Seeded subsample (without replacement) of ``(truth, prediction)`` pixel pairs."""
    t = _pixels(truth).ravel()
    q = _pixels(pred).ravel()
    _check_same_shape(t, q)
    n = t.size
    if n <= max_points:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_points, replace=False))
    return list(zip(t[idx].tolist(), q[idx].tolist()))


def write_scatter_csv(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth", "prediction"])
        for t, q in pairs:
            w.writerow([repr(t), repr(q)])


def evaluate(truth, pred, p: SsimParams = SsimParams(), slice_label="", model_label="",
             target_label="") -> EvalReport:
    t = _pixels(truth)
    return EvalReport(
        r=pearson_r(truth, pred),
        ssim=ssim(truth, pred, p),
        n_pixels=int(t.size),
        slice_label=slice_label,
        model_label=model_label,
        target_label=target_label,
        ssim_params=p.describe(),
    )
