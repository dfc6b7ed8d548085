"""Synthetic dual-energy slices and the hidden "vendor" algorithms.

Three anatomy-like layouts (brain, skull base, lung) are rendered from
ellipses of four materials at 80 kVp (low) and 140 kVp (high). The vendor
oracle blends the two images into virtual mono-energetic images and maps
their difference to an iodine map through a clamped quadratic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from dect_extract import dicom
from dect_extract.imaging import (
    AffineTransform2D,
    DualEnergySlice,
    GeometryError,
    ImageGrid,
    resample,
)

VARIANTS = ("brain", "skull", "lung")
WORKSTATION_DIMS = (1200, 1024)
EXPORT_ROTATION_DEG = 1.2
EDGE_WIDTH_PX = 3.0


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialTable:
    """HU at (low kVp, high kVp). Iodine is given per 10 mg/mL dissolved in water."""

    air: tuple = (-1000.0, -1000.0)
    water: tuple = (0.0, 0.0)
    bone: tuple = (1000.0, 800.0)
    iodine: tuple = (300.0, 120.0)
    iodine_reference_mg_ml: float = 10.0

    def hu(self, material: str, concentration: float) -> tuple[float, float]:
        """HU pair for a material at a concentration.

        ``concentration`` is mg/mL for iodine (added to water) and a density
        factor relative to the nominal material for everything else, so water
        at 0.15 behaves like aerated lung and bone at 0.6 like cancellous bone.
        """
        if material == "iodine":
            k = concentration / self.iodine_reference_mg_ml
            return (self.water[0] + k * self.iodine[0], self.water[1] + k * self.iodine[1])
        try:
            lo, hi = getattr(self, material)
        except AttributeError:
            raise ValueError(f"unknown material {material!r}") from None
        if material == "air":
            return (lo, hi)
        air_lo, air_hi = self.air
        return (air_lo + concentration * (lo - air_lo), air_hi + concentration * (hi - air_hi))


@dataclass(frozen=True)
class Insert:
    material: str
    center: tuple
    radii: tuple
    concentration: float = 1.0

    def __post_init__(self):
        if self.concentration < 0:
            raise ValueError(f"negative concentration for {self.material} insert")
        if self.radii[0] <= 0 or self.radii[1] <= 0:
            raise GeometryError("insert radii must be positive")

    def to_dict(self):
        return {
            "material": self.material,
            "center": list(self.center),
            "radii": list(self.radii),
            "concentration": self.concentration,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["material"], tuple(d["center"]), tuple(d["radii"]), float(d.get("concentration", 1.0)))


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 512
    height: int = 512
    noise_sigma_hu: float = 5.0
    inserts: tuple = ()
    variant: str = "brain"
    seed: int = 0
    spacing_mm: float = 0.5

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError("phantom dimensions must be >= 1")
        if self.noise_sigma_hu < 0:
            raise ValueError("noise_sigma_hu must be >= 0")
        object.__setattr__(self, "inserts", tuple(self.inserts))
        for ins in self.inserts:
            (cx, cy), (rx, ry) = ins.center, ins.radii
            if cx - rx < 0 or cy - ry < 0 or cx + rx > self.width - 1 or cy + ry > self.height - 1:
                raise GeometryError(
                    f"{ins.material} insert at {ins.center} radii {ins.radii} leaves the "
                    f"{self.width}x{self.height} image"
                )

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "noise_sigma_hu": self.noise_sigma_hu,
            "variant": self.variant,
            "seed": self.seed,
            "spacing_mm": self.spacing_mm,
            "inserts": [i.to_dict() for i in self.inserts],
        }


# Layouts in fractions of (width, height); radii likewise.
_LAYOUTS = {
    "brain": [
        ("water", (0.50, 0.50), (0.40, 0.45), 1.00),
        ("bone", (0.50, 0.50), (0.38, 0.43), 1.00),
        ("bone", (0.50, 0.50), (0.368, 0.418), 0.60),
        ("bone", (0.50, 0.50), (0.356, 0.406), 1.20),
        ("water", (0.50, 0.50), (0.345, 0.395), 1.035),
        ("water", (0.40, 0.45), (0.10, 0.16), 1.025),
        ("water", (0.60, 0.45), (0.10, 0.16), 1.025),
        ("water", (0.46, 0.50), (0.025, 0.07), 1.00),
        ("water", (0.54, 0.50), (0.025, 0.07), 1.00),
        ("air", (0.50, 0.095), (0.05, 0.018), 0.0),
        ("water", (0.15, 0.55), (0.02, 0.03), 0.15),
        ("water", (0.85, 0.55), (0.02, 0.03), 0.40),
        ("water", (0.50, 0.83), (0.03, 0.02), 0.70),
        ("bone", (0.50, 0.76), (0.03, 0.02), 0.80),
        ("iodine", (0.50, 0.16), (0.018, 0.012), 3.0),
        ("iodine", (0.35, 0.30), (0.012, 0.012), 1.0),
        ("iodine", (0.65, 0.30), (0.012, 0.012), 2.0),
        ("iodine", (0.30, 0.60), (0.015, 0.015), 4.0),
        ("iodine", (0.70, 0.60), (0.015, 0.015), 6.0),
        ("iodine", (0.40, 0.70), (0.02, 0.02), 8.0),
        ("iodine", (0.60, 0.70), (0.02, 0.02), 12.0),
        ("iodine", (0.44, 0.30), (0.025, 0.02), 16.0),
        ("iodine", (0.56, 0.30), (0.025, 0.02), 20.0),
        ("iodine", (0.50, 0.62), (0.03, 0.03), 25.0),
    ],
    "skull": [
        ("water", (0.50, 0.50), (0.42, 0.40), 1.00),
        ("water", (0.50, 0.50), (0.36, 0.34), 1.04),
        ("bone", (0.30, 0.52), (0.12, 0.07), 1.10),
        ("bone", (0.70, 0.52), (0.12, 0.07), 1.10),
        ("bone", (0.30, 0.52), (0.06, 0.035), 0.70),
        ("bone", (0.70, 0.52), (0.06, 0.035), 0.70),
        ("bone", (0.50, 0.40), (0.05, 0.09), 0.90),
        ("air", (0.50, 0.28), (0.06, 0.04), 0.0),
        ("water", (0.20, 0.62), (0.04, 0.04), 0.30),
        ("water", (0.80, 0.62), (0.04, 0.04), 0.30),
        ("water", (0.50, 0.62), (0.08, 0.07), 1.035),
        ("bone", (0.50, 0.80), (0.10, 0.05), 1.00),
        ("iodine", (0.42, 0.46), (0.018, 0.018), 20.0),
        ("iodine", (0.58, 0.46), (0.018, 0.018), 20.0),
        ("iodine", (0.50, 0.60), (0.015, 0.015), 15.0),
        ("iodine", (0.36, 0.66), (0.025, 0.02), 9.0),
        ("iodine", (0.64, 0.66), (0.025, 0.02), 9.0),
        ("iodine", (0.45, 0.20), (0.012, 0.012), 4.0),
    ],
    "lung": [
        ("water", (0.50, 0.50), (0.45, 0.33), 1.00),
        ("water", (0.50, 0.50), (0.42, 0.30), 1.04),
        ("water", (0.30, 0.48), (0.14, 0.20), 0.15),
        ("water", (0.70, 0.48), (0.14, 0.20), 0.15),
        ("air", (0.50, 0.30), (0.025, 0.025), 0.0),
        ("bone", (0.50, 0.74), (0.06, 0.06), 1.10),
        ("bone", (0.50, 0.74), (0.045, 0.045), 0.80),
        ("bone", (0.12, 0.45), (0.02, 0.04), 1.00),
        ("bone", (0.88, 0.45), (0.02, 0.04), 1.00),
        ("bone", (0.20, 0.22), (0.03, 0.015), 1.00),
        ("bone", (0.80, 0.22), (0.03, 0.015), 1.00),
        ("iodine", (0.50, 0.45), (0.05, 0.05), 20.0),
        ("iodine", (0.42, 0.60), (0.035, 0.035), 8.0),
        ("iodine", (0.28, 0.40), (0.012, 0.012), 12.0),
        ("iodine", (0.72, 0.40), (0.012, 0.012), 12.0),
        ("iodine", (0.34, 0.56), (0.01, 0.01), 6.0),
        ("iodine", (0.66, 0.56), (0.01, 0.01), 6.0),
    ],
}

_VARIANT_SEEDS = {"brain": 1, "skull": 2, "lung": 3}


def default_spec(variant: str, width: int = 512, height: int = 512, noise_sigma_hu: float = 5.0,
                 seed: int | None = None, spacing_mm: float = 0.5) -> PhantomSpec:
    """Built-in layout for ``variant`` scaled to the requested size."""
    if variant not in _LAYOUTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    sx, sy = width - 1, height - 1
    inserts = tuple(
        Insert(m, (cx * sx, cy * sy), (rx * sx, ry * sy), c) for m, (cx, cy), (rx, ry), c in _LAYOUTS[variant]
    )
    return PhantomSpec(
        width=width,
        height=height,
        noise_sigma_hu=noise_sigma_hu,
        inserts=inserts,
        variant=variant,
        seed=_VARIANT_SEEDS[variant] if seed is None else seed,
        spacing_mm=spacing_mm,
    )


def _coverage(ins: Insert, xx, yy):
    """Fraction of each pixel covered by the ellipse, with a linear edge ramp
    of ``EDGE_WIDTH_PX`` to mimic partial-volume blur."""
    dx = (xx - ins.center[0]) / ins.radii[0]
    dy = (yy - ins.center[1]) / ins.radii[1]
    rho2 = dx * dx + dy * dy
    grad = 2.0 * np.hypot(dx / ins.radii[0], dy / ins.radii[1])
    dist = (rho2 - 1.0) / np.maximum(grad, 1e-12)
    return np.clip(0.5 - dist / EDGE_WIDTH_PX, 0.0, 1.0)


def render(spec: PhantomSpec, table: MaterialTable = MaterialTable()):
    """Noise-free low/high HU arrays."""
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    low = np.full((spec.height, spec.width), table.air[0])
    high = np.full((spec.height, spec.width), table.air[1])
    for ins in spec.inserts:
        cov = _coverage(ins, xx, yy)
        inside = cov > 0
        vl, vh = table.hu(ins.material, ins.concentration)
        low[inside] += cov[inside] * (vl - low[inside])
        high[inside] += cov[inside] * (vh - high[inside])
    return low, high


def generate_slice(spec: PhantomSpec, table: MaterialTable = MaterialTable()) -> DualEnergySlice:
    low, high = render(spec, table)
    if spec.noise_sigma_hu > 0:
        # Philox is counter based: the stream depends on the seed only
        rng = np.random.Generator(np.random.Philox(spec.seed))
        low = low + rng.normal(0.0, spec.noise_sigma_hu, low.shape)
        high = high + rng.normal(0.0, spec.noise_sigma_hu, high.shape)
    s = spec.spacing_mm
    return DualEnergySlice(ImageGrid(low, s, s), ImageGrid(high, s, s), spec.variant)


@dataclass(frozen=True)
class VendorOracle:
    """Hidden ground truth standing in for the vendor workstation."""

    kev_min: float = 40.0
    kev_max: float = 140.0
    c1: float = 0.8
    c2: float = 0.002

    def alpha(self, kev: float) -> float:
        if not self.kev_min <= kev <= self.kev_max:
            raise RangeError(f"{kev} keV outside [{self.kev_min}, {self.kev_max}]")
        return (kev - self.kev_min) / (self.kev_max - self.kev_min)


def vendor_monoenergetic(s: DualEnergySlice, kev: float, oracle: VendorOracle = VendorOracle()) -> ImageGrid:
    a = oracle.alpha(kev)
    return s.low.with_pixels(a * s.high.pixels + (1.0 - a) * s.low.pixels)


def vendor_iodine_map(s: DualEnergySlice, oracle: VendorOracle = VendorOracle()) -> ImageGrid:
    d = s.low.pixels - s.high.pixels
    return s.low.with_pixels(np.maximum(0.0, oracle.c1 * d + oracle.c2 * d * d))


def default_export_transform(src_dims, out_dims=WORKSTATION_DIMS, angle_deg=EXPORT_ROTATION_DEG):
    """Output-to-source transform of the simulated workstation export: uniform
    upscaling to fit ``out_dims`` plus a small rotation about the centres."""
    w, h = src_dims
    ow, oh = out_dims
    scale = min(ow / w, oh / h)
    return AffineTransform2D.similarity(scale, angle_deg, ((w - 1) / 2, (h - 1) / 2), ((ow - 1) / 2, (oh - 1) / 2))


def export_workstation(img: ImageGrid, t: AffineTransform2D | None = None, out_dims=WORKSTATION_DIMS):
    """Resample ``img`` onto the workstation grid; returns ``(image, transform)``."""
    if t is None:
        t = default_export_transform((img.width, img.height), out_dims)
    return resample(img, t, out_dims[0], out_dims[1]), t


def register_back(exported: ImageGrid, export_t: AffineTransform2D, dims) -> ImageGrid:
    """Undo an export by pulling through the inverse transform onto ``dims``."""
    from dect_extract.imaging import invert

    return resample(exported, invert(export_t), dims[0], dims[1])


def correction_field(like: ImageGrid) -> ImageGrid:
    """Synthetic stand-in for the vendor's unidentified correction payload."""
    return like.with_pixels(np.ones(like.shape))


def export_dicom_study(s: DualEnergySlice, maps=(), labels=None) -> bytes:
    """One DICOM file: low image in PixelData, high image and ``maps`` as
    16-bit private payloads ``(7FE1,0010+k)`` with private rescale elements."""
    maps = list(maps)
    labels = list(labels) if labels is not None else [f"map-{i}" for i in range(len(maps))]
    if len(labels) != len(maps):
        raise ValueError("one label per map required")
    for m in maps:
        if m.shape != s.shape:
            raise ValueError(f"map shape {m.shape} differs from slice shape {s.shape}")
    stored, slope, icpt = dicom.quantize_16bit(s.low.pixels)
    elems = [
        dicom.text_element(dicom.TRANSFER_SYNTAX_UID, "UI", dicom.EXPLICIT_VR_LITTLE_ENDIAN),
        dicom.text_element(
            dicom.IMAGE_COMMENTS,
            "LT",
            "synthetic phantom; payloads are unsigned 16-bit spanning [min,max] in 65535 steps; "
            "value = slope*stored + intercept",
        ),
        dicom.us(dicom.ROWS, s.low.height),
        dicom.us(dicom.COLUMNS, s.low.width),
        dicom.ds(dicom.PIXEL_SPACING, s.low.spacing_y, s.low.spacing_x),
        dicom.us(dicom.BITS_ALLOCATED, 16),
        dicom.us(dicom.BITS_STORED, 16),
        dicom.us(dicom.HIGH_BIT, 15),
        dicom.us(dicom.PIXEL_REPRESENTATION, 0),
        dicom.ds(dicom.RESCALE_INTERCEPT, icpt),
        dicom.ds(dicom.RESCALE_SLOPE, slope),
        dicom.pixel_payload(dicom.PIXEL_DATA, stored),
        dicom.text_element(dicom.PRIVATE_CREATOR, "LO", dicom.PRIVATE_CREATOR_NAME),
    ]
    for k, (img, label) in enumerate(zip([s.high] + maps, ["high-kvp"] + labels)):
        stored, slope, icpt = dicom.quantize_16bit(img.pixels)
        slope_tag, icpt_tag, label_tag = dicom.private_rescale_tags(k)
        elems += [
            dicom.ds(slope_tag, slope),
            dicom.ds(icpt_tag, icpt),
            dicom.text_element(label_tag, "LO", label),
            dicom.pixel_payload(dicom.private_payload_tag(k), stored),
        ]
    return dicom.write_dataset(dicom.DicomDataset(tuple(elems)))


def read_dicom_study(data: bytes, min_bytes: int | None = None, label: str = ""):
    """Attacker side: recover the dual-energy slice and any further private images.

    The high-kVp image is the private payload labelled ``high-kvp``, or the
    first discovered payload when no label is present. ``min_bytes`` defaults
    to 64 KiB, lowered to one full image for small slices.
    """
    ds_ = dicom.parse_dataset(data)
    low = dicom.extract_pixel_image(ds_, dicom.PIXEL_DATA)
    if min_bytes is None:
        min_bytes = min(65536, low.width * low.height * 2)
    found = dicom.list_private_payloads(ds_, min_bytes)
    if not found:
        raise dicom.TagNotFoundError("no private pixel payloads found; cannot recover the second energy")
    images = {}
    for tag in found:
        images[dicom.payload_label(ds_, tag)] = dicom.extract_pixel_image(ds_, tag)
    high_key = "high-kvp" if "high-kvp" in images else dicom.payload_label(ds_, found[0])
    high = images.pop(high_key)
    return DualEnergySlice(low, high, label), images


# -- config files ---------------------------------------------------------------


def spec_from_dict(d) -> PhantomSpec:
    """Build a spec from a config mapping; missing fields fall back to the
    built-in layout of ``d["variant"]``."""
    variant = d.get("variant", "brain")
    size = dict(
        width=int(d.get("width", 512)),
        height=int(d.get("height", 512)),
        noise_sigma_hu=float(d.get("noise_sigma_hu", 5.0)),
        spacing_mm=float(d.get("spacing_mm", 0.5)),
    )
    if variant in _LAYOUTS:
        base = default_spec(variant, **size)
    elif "inserts" in d:
        base = PhantomSpec(variant=variant, **size)
    else:
        raise ValueError(f"variant {variant!r} has no built-in layout and no inserts")
    kw = {}
    if "seed" in d:
        kw["seed"] = int(d["seed"])
    if "inserts" in d:
        kw["inserts"] = tuple(Insert.from_dict(i) for i in d["inserts"])
    return replace(base, **kw)


def load_phantom_config(path_or_dict, variants=VARIANTS) -> dict:
    """Read a phantom config (JSON) into ``{variant: PhantomSpec}``.

    Top-level keys ``width``, ``height``, ``noise_sigma_hu``, ``spacing_mm``
    apply to every variant; ``variants: {name: {...}}`` overrides per variant
    (``seed``, ``inserts``, or any top-level key).
    """
    if isinstance(path_or_dict, dict):
        cfg = path_or_dict
    else:
        with open(path_or_dict, encoding="utf-8") as fh:
            cfg = json.load(fh)
    common = {k: cfg[k] for k in ("width", "height", "noise_sigma_hu", "spacing_mm") if k in cfg}
    per = cfg.get("variants", {})
    out = {}
    for v in list(variants) + [k for k in per if k not in variants]:
        d = dict(common)
        d.update(per.get(v, {}))
        d["variant"] = v
        out[v] = spec_from_dict(d)
    return out
