"""The end-to-end experiment: generate -> export -> extract -> register -> fit -> evaluate.

Every file written under the output directory is recorded in
``manifest.json`` together with its SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from dect_extract import metrics, models, phantom
from dect_extract.imaging import AffineTransform2D, DualEnergySlice, ImageGrid, ShapeError, flatten_pairs, invert, resample

log = logging.getLogger(__name__)

DEFAULT_KEVS = (40.0, 60.0, 80.0, 100.0, 120.0, 140.0)
LINEAR_THRESHOLD = 0.999
TREE_THRESHOLD = 0.98
RESULT_COLUMNS = ("model", "target", "slice", "r", "ssim", "n")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.__cause__ = exc


@dataclass
class ExperimentConfig:
    phantom: str | None = None
    train_variant: str = "brain"
    test_variants: tuple = ("skull", "lung")
    target: str = "mono"
    kevs: tuple = DEFAULT_KEVS
    model: str | None = None
    rep: models.RepTreeParams = field(default_factory=models.RepTreeParams)
    ssim: metrics.SsimParams = field(default_factory=metrics.SsimParams)
    registration: str | tuple = "inverse-of-export"
    export: bool | None = None
    via_dicom: bool = False
    out: str = "out"
    seed: int = 0
    threshold_r: float | None = None
    threshold_ssim: float | None = None
    subsample: int | None = None
    scatter_points: int = 10000
    noise_sigma_hu: float | None = None
    size: int | None = None

    def __post_init__(self):
        self.test_variants = tuple(self.test_variants)
        self.kevs = tuple(float(k) for k in self.kevs)
        if self.target not in ("mono", "iodine"):
            raise ConfigError(f"target must be 'mono' or 'iodine', got {self.target!r}")
        if self.train_variant in self.test_variants:
            raise ConfigError(f"train variant {self.train_variant!r} is also a test variant")
        if not self.test_variants:
            raise ConfigError("at least one test variant is required")
        if self.model is not None and self.model not in ("ols", "blend", "reptree"):
            raise ConfigError(f"model must be ols, blend or reptree, got {self.model!r}")
        if self.target == "mono" and not self.kevs:
            raise ConfigError("mono-energetic target needs at least one keV value")
        if isinstance(self.registration, str) and self.registration != "inverse-of-export":
            self.registration = tuple(float(v) for v in self.registration.split(","))
        if not isinstance(self.registration, str):
            AffineTransform2D.from_coefficients(self.registration)

    @property
    def model_kind(self) -> str:
        if self.model:
            return self.model
        return "blend" if self.target == "mono" else "reptree"

    @property
    def exported(self) -> bool:
        """Whether targets come through the workstation export (iodine by default)."""
        return self.export if self.export is not None else self.target == "iodine"

    @property
    def thresholds(self) -> tuple[float, float]:
        default = TREE_THRESHOLD if self.model_kind == "reptree" else LINEAR_THRESHOLD
        r = self.threshold_r if self.threshold_r is not None else default
        s = self.threshold_ssim if self.threshold_ssim is not None else default
        return r, s

    @property
    def variants(self) -> tuple:
        return (self.train_variant,) + self.test_variants

    @property
    def eval_variants(self) -> tuple:
        # the iodine table also reports the training slice
        return self.variants if self.target == "iodine" else self.test_variants

    def target_names(self) -> list[str]:
        if self.target == "iodine":
            return ["iodine"]
        return [f"mono{_kev_label(k)}" for k in self.kevs]

    def to_dict(self):
        d = asdict(self)
        d["registration"] = self.registration if isinstance(self.registration, str) else list(self.registration)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "rep" in d and isinstance(d["rep"], dict):
            d["rep"] = models.RepTreeParams(**d["rep"])
        if "ssim" in d and isinstance(d["ssim"], dict):
            d["ssim"] = metrics.SsimParams(**d["ssim"])
        if isinstance(d.get("registration"), list):
            d["registration"] = tuple(d["registration"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _kev_label(kev: float) -> str:
    return f"{kev:g}"


def _target_kev(name: str) -> float:
    return float(name[len("mono"):])


# -- manifest -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """``manifest.json`` under the output directory; paths are stored relative to it."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self.data = {"artifacts": {}, "config": None, "export_transforms": {}}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.data = json.load(fh)

    def add(self, path, kind, **meta):
        rel = Path(path).relative_to(self.root).as_posix()
        entry = {"kind": kind, "sha256": sha256_file(path)}
        entry.update(meta)
        self.data["artifacts"][rel] = entry
        return rel

    def entry(self, rel):
        try:
            return self.data["artifacts"][rel]
        except KeyError:
            raise FileNotFoundError(
                f"artifact {self.root / rel} is not in {self.path}; run 'generate' first"
            ) from None

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.data, indent=2, sort_keys=True) + "\n"
        with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _save_image(man: Manifest, rel, img: ImageGrid, kind, **meta):
    path = man.root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, img.pixels)
    man.add(path, kind, spacing=[img.spacing_x, img.spacing_y], shape=list(img.shape), **meta)


def _load_image(man: Manifest, rel) -> ImageGrid:
    e = man.entry(rel)
    path = man.root / rel
    if not path.exists():
        raise FileNotFoundError(f"expected artifact {path} is missing")
    sx, sy = e["spacing"]
    return ImageGrid(np.load(path), sx, sy)


def _write_text(man: Manifest, rel, text, kind, **meta):
    path = man.root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    man.add(path, kind, **meta)


# -- stages -------------------------------------------------------------------------


def phantom_specs(cfg: ExperimentConfig) -> dict:
    if cfg.phantom:
        specs = phantom.load_phantom_config(cfg.phantom, cfg.variants)
    else:
        specs = {v: phantom.default_spec(v) for v in cfg.variants}
    out = {}
    for i, v in enumerate(cfg.variants):
        if v not in specs:
            raise ConfigError(f"phantom config has no variant {v!r}")
        s = specs[v]
        if cfg.seed:
            s = replace(s, seed=cfg.seed * 1000 + i + 1)
        if cfg.noise_sigma_hu is not None:
            s = replace(s, noise_sigma_hu=cfg.noise_sigma_hu)
        if cfg.size is not None and not cfg.phantom:
            s = phantom.default_spec(v, width=cfg.size, height=cfg.size, noise_sigma_hu=s.noise_sigma_hu,
                                     seed=s.seed)
        out[v] = s
    return out


def cmd_generate(cfg: ExperimentConfig) -> Manifest:
    """Phantom slices, vendor targets and optional DICOM studies, plus manifest."""
    root = Path(cfg.out)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc}") from exc
    man = Manifest(root)
    man.data = {"artifacts": {}, "config": cfg.to_dict(), "export_transforms": {}}
    for v, spec in phantom_specs(cfg).items():
        s = phantom.generate_slice(spec)
        _save_image(man, f"data/{v}_low.npy", s.low, "slice-low", variant=v, seed=spec.seed)
        _save_image(man, f"data/{v}_high.npy", s.high, "slice-high", variant=v, seed=spec.seed)
        for kev in cfg.kevs:
            img = phantom.vendor_monoenergetic(s, kev)
            _save_image(man, f"targets/{v}_mono{_kev_label(kev)}.npy", img, "target-mono", variant=v,
                        seed=spec.seed, kev=kev)
        iod = phantom.vendor_iodine_map(s)
        _save_image(man, f"targets/{v}_iodine.npy", iod, "target-iodine", variant=v, seed=spec.seed)
        exported, t = phantom.export_workstation(iod)
        _save_image(man, f"targets/{v}_iodine_workstation.npy", exported, "target-iodine-workstation",
                    variant=v, seed=spec.seed)
        man.data["export_transforms"][v] = list(t.coefficients())
        if cfg.via_dicom:
            path = root / f"dicom/{v}.dcm"
            path.parent.mkdir(parents=True, exist_ok=True)
            data = phantom.export_dicom_study(s, [phantom.correction_field(s.low)], ["correction-synthetic"])
            path.write_bytes(data)
            man.add(path, "dicom-study", variant=v, seed=spec.seed)
    man.save()
    return man


def load_slice(man: Manifest, variant: str, via_dicom: bool = False) -> DualEnergySlice:
    if via_dicom:
        rel = f"dicom/{variant}.dcm"
        man.entry(rel)
        s, _ = phantom.read_dicom_study((man.root / rel).read_bytes(), label=variant)
        return s
    return DualEnergySlice(
        _load_image(man, f"data/{variant}_low.npy"), _load_image(man, f"data/{variant}_high.npy"), variant
    )


def registration_transform(cfg: ExperimentConfig, man: Manifest, variant: str) -> AffineTransform2D:
    if isinstance(cfg.registration, str):
        try:
            coeffs = man.data["export_transforms"][variant]
        except KeyError:
            raise FileNotFoundError(f"no export transform recorded for {variant!r} in {man.path}") from None
        return invert(AffineTransform2D.from_coefficients(coeffs))
    return AffineTransform2D.from_coefficients(cfg.registration)


def load_target(cfg: ExperimentConfig, man: Manifest, variant: str, target: str, grid: ImageGrid) -> ImageGrid:
    """Ground truth on the raw-data grid, registered back when it was exported."""
    if target == "iodine" and cfg.exported:
        exported = _load_image(man, f"targets/{variant}_iodine_workstation.npy")
        t = registration_transform(cfg, man, variant)
        img = resample(exported, t, grid.width, grid.height)
    else:
        img = _load_image(man, f"targets/{variant}_{target}.npy")
    if img.shape != grid.shape:
        raise ShapeError(
            f"target grid {img.width}x{img.height} does not match slice grid {grid.width}x{grid.height} "
            f"for {variant}/{target}; check the registration transform"
        )
    return img


def _fit(kind, X, y, rep):
    if kind == "ols":
        return models.fit_ols(X, y)
    if kind == "blend":
        return models.fit_constrained_blend(X, y)
    return models.fit_rep_tree(X, y, params=rep)


def model_rel(cfg: ExperimentConfig, target: str) -> str:
    return f"models/{cfg.model_kind}_{target}.txt"


def cmd_fit(cfg: ExperimentConfig, target: str | None = None) -> str:
    """Fit the configured model on the training slice; returns the model path."""
    man = Manifest(cfg.out)
    target = target or cfg.target_names()[0]
    s = load_slice(man, cfg.train_variant, cfg.via_dicom)
    truth = load_target(cfg, man, cfg.train_variant, target, s.low)
    X, y = flatten_pairs(s, truth)
    if cfg.subsample and cfg.subsample < X.shape[0]:
        idx = np.sort(np.random.default_rng(cfg.seed).choice(X.shape[0], cfg.subsample, replace=False))
        X, y = X[idx], y[idx]
    t0 = time.perf_counter()
    model = _fit(cfg.model_kind, X, y, cfg.rep)
    wall = time.perf_counter() - t0
    pred = model.predict_arrays(X[:, 0], X[:, 1]) if isinstance(model, models.LinearPixelModel) else model.predict_rows(X)
    resid = y - pred
    rel_rms = float(np.sqrt(np.mean(resid * resid)) / max(np.std(y), 1e-300))
    info = {"model": cfg.model_kind, "target": target, "train_slice": cfg.train_variant, "rows": int(X.shape[0]),
            "relative_rms_residual": rel_rms}
    if isinstance(model, models.LinearPixelModel):
        info.update(w_low=model.w_low, w_high=model.w_high, intercept=model.intercept)
        if target.startswith("mono"):
            info["alpha_oracle"] = phantom.VendorOracle().alpha(_target_kev(target))
    else:
        info.update({k: model.info[k] for k in ("grown_nodes", "grown_leaves", "pruned_nodes", "pruned_leaves",
                                                 "growing_rows", "pruning_rows")})
    if rel_rms > 0.05:
        info["warning"] = "large residual: the target is not well described by this model"
        log.warning("%s on %s: relative RMS residual %.3f, target looks non-linear", cfg.model_kind, target, rel_rms)
    log.info("fit %s on %s: %d rows in %.2fs", cfg.model_kind, target, X.shape[0], wall)
    rel = model_rel(cfg, target)
    _write_text(man, rel, models.dumps(model), "model", target=target, model=cfg.model_kind)
    _write_text(man, rel[:-4] + ".log.json", json.dumps(info, indent=2, sort_keys=True) + "\n", "training-log",
                target=target)
    man.save()
    return str(man.root / rel)


def cmd_evaluate(cfg: ExperimentConfig, model_path=None, target: str | None = None) -> list[metrics.EvalReport]:
    man = Manifest(cfg.out)
    target = target or cfg.target_names()[0]
    model_path = Path(model_path) if model_path else man.root / model_rel(cfg, target)
    if not model_path.exists():
        raise FileNotFoundError(f"model file {model_path} not found; run 'fit' first")
    model = models.load(model_path)
    kind = cfg.model_kind
    reports = []
    for v in cfg.eval_variants:
        s = load_slice(man, v, cfg.via_dicom)
        truth = load_target(cfg, man, v, target, s.low)
        pred = models.predict(model, s)
        rep = metrics.evaluate(truth, pred, cfg.ssim, slice_label=v, model_label=kind, target_label=target)
        reports.append(rep)
        pairs = metrics.scatter_pairs(truth, pred, cfg.scatter_points, cfg.seed)
        path = man.root / f"results/scatter_{kind}_{target}_{v}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        metrics.write_scatter_csv(path, pairs)
        man.add(path, "scatter", slice=v, target=target, model=kind)
    man.save()
    return reports


def format_csv(reports) -> str:
    lines = [",".join(RESULT_COLUMNS)]
    for r in reports:
        lines.append(f"{r.model_label},{r.target_label},{r.slice_label},{r.r!r},{r.ssim!r},{r.n_pixels}")
    return "\n".join(lines) + "\n"


def format_table(reports, thresholds=None) -> str:
    head = f"{'Estimation':<24}{'r':>8}{'SSIM':>8}  {'Slice':<8}"
    if thresholds:
        head += "  status"
    rule = "-" * len(head)
    out = [rule, head, rule]
    for r in reports:
        name = f"{r.target_label} ({r.model_label})"
        line = f"{name:<24}{r.r:>8.3f}{r.ssim:>8.3f}  {r.slice_label:<8}"
        if thresholds:
            line += "  " + ("pass" if r.passes(*thresholds) else "FAIL")
        out.append(line)
    out.append(rule)
    if reports:
        out.append(f"SSIM: {reports[0].ssim_params}")
    return "\n".join(out) + "\n"


def write_results(cfg: ExperimentConfig, reports, name="results"):
    man = Manifest(cfg.out)
    _write_text(man, f"results/{name}.csv", format_csv(reports), "results-csv")
    _write_text(man, f"results/{name}.txt", format_table(reports, cfg.thresholds), "results-table")
    man.save()


def cmd_attack(cfg: ExperimentConfig):
    """Run every stage; returns ``(reports, failures)``."""
    try:
        cmd_generate(cfg)
    except Exception as exc:
        raise StageError("generate", exc) from exc
    reports = []
    for target in cfg.target_names():
        try:
            path = cmd_fit(cfg, target)
        except Exception as exc:
            raise StageError("fit", exc) from exc
        try:
            reports += cmd_evaluate(cfg, path, target)
        except Exception as exc:
            raise StageError("evaluate", exc) from exc
    write_results(cfg, reports)
    failures = [r for r in reports if not r.passes(*cfg.thresholds)]
    return reports, failures

