import json

import numpy as np
import pytest

from dect_extract import dicom
from dect_extract.imaging import AffineTransform2D, DualEnergySlice, GeometryError, ImageGrid
from dect_extract.metrics import ssim
from dect_extract.models import fit_ols
from dect_extract.phantom import (
    VARIANTS,
    WORKSTATION_DIMS,
    Insert,
    MaterialTable,
    PhantomSpec,
    RangeError,
    VendorOracle,
    correction_field,
    default_export_transform,
    default_spec,
    export_dicom_study,
    export_workstation,
    generate_slice,
    load_phantom_config,
    read_dicom_study,
    register_back,
    render,
    vendor_iodine_map,
    vendor_monoenergetic,
)


def one_pixel(low, high):
    return DualEnergySlice(ImageGrid([[low]]), ImageGrid([[high]]))


def test_iodine_oracle_examples():
    assert vendor_iodine_map(one_pixel(200.0, 100.0)).pixels[0, 0] == 100.0
    assert vendor_iodine_map(one_pixel(50.0, 100.0)).pixels[0, 0] == 0.0
    assert vendor_iodine_map(one_pixel(10.0, 10.0)).pixels[0, 0] == 0.0


def test_mono_oracle_examples():
    o = VendorOracle()
    assert o.alpha(90) == 0.5
    assert vendor_monoenergetic(one_pixel(100.0, 60.0), 90).pixels[0, 0] == 80.0
    assert vendor_monoenergetic(one_pixel(100.0, 60.0), 40).pixels[0, 0] == 100.0
    assert vendor_monoenergetic(one_pixel(100.0, 60.0), 140).pixels[0, 0] == 60.0
    with pytest.raises(RangeError):
        o.alpha(150)
    with pytest.raises(RangeError):
        o.alpha(39.9)


def test_iodine_not_linearly_representable():
    rng = np.random.default_rng(2)
    d = np.linspace(0.0, 200.0, 400)
    high = rng.uniform(-50.0, 300.0, 400)
    s = DualEnergySlice(ImageGrid((high + d)[None, :]), ImageGrid(high[None, :]))
    t = vendor_iodine_map(s).pixels.ravel()
    m = fit_ols((np.column_stack([s.low.pixels.ravel(), s.high.pixels.ravel()]), t))
    pred = m.w_low * s.low.pixels.ravel() + m.w_high * s.high.pixels.ravel() + m.intercept
    assert np.sum((pred - t) ** 2) > 1.0


def test_materials():
    tab = MaterialTable()
    assert tab.hu("iodine", 10.0) == (300.0, 120.0)
    assert tab.hu("water", 1.0) == (0.0, 0.0)
    assert tab.hu("water", 0.15) == (-850.0, -850.0)
    assert tab.hu("air", 3.0) == (-1000.0, -1000.0)
    with pytest.raises(ValueError):
        tab.hu("gold", 1.0)


def test_spec_validation():
    with pytest.raises(GeometryError, match="leaves"):
        PhantomSpec(width=64, height=64, inserts=(Insert("water", (10.0, 10.0), (20.0, 5.0)),))
    with pytest.raises(ValueError):
        Insert("iodine", (5, 5), (2, 2), -1.0)
    with pytest.raises(ValueError):
        default_spec("pelvis")


def test_generate_deterministic_and_noise_level():
    spec = default_spec("brain", 96, 96, noise_sigma_hu=5.0)
    a, b = generate_slice(spec), generate_slice(spec)
    assert a.low == b.low and a.high == b.high
    clean_low, clean_high = render(spec)
    resid = a.low.pixels - clean_low
    assert abs(resid.std() - 5.0) < 0.3
    c = generate_slice(PhantomSpec(**{**spec.__dict__, "seed": spec.seed + 1}))
    assert c.low != a.low
    assert not np.array_equal(a.low.pixels - clean_low, a.high.pixels - clean_high)


def test_noise_free_values_match_materials():
    spec = default_spec("brain", 128, 128, noise_sigma_hu=0.0)
    s = generate_slice(spec)
    assert s.low.pixels[0, 0] == -1000.0
    # centre of the largest insert is plain soft tissue/water
    assert set(np.unique(s.low.pixels)) >= {-1000.0}
    assert s.low.spacing_x == 0.5


def test_variants_differ():
    imgs = [render(default_spec(v, 64, 64))[0] for v in VARIANTS]
    assert not np.array_equal(imgs[0], imgs[1]) and not np.array_equal(imgs[1], imgs[2])


def test_export_dims_and_round_trip():
    spec = default_spec("brain", 512, 512)
    img = generate_slice(spec).low
    out, t = export_workstation(img)
    assert (out.width, out.height) == WORKSTATION_DIMS
    assert t == default_export_transform((512, 512))
    assert abs(abs(t.determinant) - 0.25) < 1e-12


def test_scale_only_export_round_trip_keeps_ssim():
    yy, xx = np.mgrid[0:128, 0:128] / 128.0
    smooth = ImageGrid(100 * np.sin(3 * xx) * np.cos(2 * yy) + 30 * xx)
    t = AffineTransform2D.similarity(2.0, 0.0, (63.5, 63.5), (127.5, 127.5))
    out, _ = export_workstation(smooth, t, (256, 256))
    back = register_back(out, t, (128, 128))
    assert ssim(smooth, back) > 0.99


def test_dicom_study_round_trip():
    s = generate_slice(default_spec("lung", 256, 256))
    iod = vendor_iodine_map(s)
    data = export_dicom_study(s, [correction_field(s.low), iod], ["correction-synthetic", "iodine"])
    ds_ = dicom.parse_dataset(data)
    assert dicom.list_private_payloads(ds_) == [dicom.private_payload_tag(k) for k in range(3)]
    back, others = read_dicom_study(data, label="lung")
    assert set(others) == {"correction-synthetic", "iodine"}
    for orig, got, tag in ((s.low, back.low, dicom.PIXEL_DATA),
                           (s.high, back.high, dicom.private_payload_tag(0)),
                           (iod, others["iodine"], dicom.private_payload_tag(2))):
        step = dicom.descriptor_for(ds_, tag).rescale_slope
        assert np.max(np.abs(got.pixels - orig.pixels)) <= step
    assert np.all(others["correction-synthetic"].pixels == 1.0)
    assert back.low.spacing_x == 0.5 and back.label == "lung"


def test_dicom_study_without_payloads_fails():
    s = generate_slice(default_spec("brain", 32, 32))
    # 32x32 payloads hold 2048 bytes
    with pytest.raises(dicom.TagNotFoundError):
        read_dicom_study(export_dicom_study(s), min_bytes=4096)
    # the default floor shrinks to one full image
    assert read_dicom_study(export_dicom_study(s))[0].high.shape == (32, 32)


def test_phantom_config(tmp_path):
    cfg = {"width": 64, "height": 48, "noise_sigma_hu": 2.0,
           "variants": {"lung": {"seed": 9},
                        "custom": {"inserts": [{"material": "bone", "center": [30, 20], "radii": [5, 5]}]}}}
    p = tmp_path / "ph.json"
    p.write_text(json.dumps(cfg))
    specs = load_phantom_config(p)
    assert set(specs) == {"brain", "skull", "lung", "custom"}
    assert specs["lung"].seed == 9 and specs["brain"].seed == 1
    assert (specs["skull"].width, specs["skull"].height) == (64, 48)
    assert specs["custom"].inserts[0].material == "bone"


def test_water_body_equal_and_iodine_k_edge():
    spec = PhantomSpec(64, 64, 0.0, (Insert("water", (32.0, 32.0), (25.0, 25.0)),
                                      Insert("iodine", (32.0, 32.0), (6.0, 6.0), 10.0)))
    s = generate_slice(spec)
    assert s.low.pixels[32, 14] == s.high.pixels[32, 14] == 0.0
    assert s.low.pixels[32, 32] == 300.0 and s.high.pixels[32, 32] == 120.0
    assert vendor_iodine_map(DualEnergySlice(ImageGrid([[0.0]]), ImageGrid([[0.0]]))).pixels[0, 0] == 0.0


def test_identity_export_unchanged():
    img = generate_slice(default_spec("skull", 40, 30)).low
    out, _ = export_workstation(img, AffineTransform2D.identity(), (40, 30))
    assert out == img


def test_study_with_high_image_only():
    s = generate_slice(default_spec("brain", 256, 256))
    ds_ = dicom.parse_dataset(export_dicom_study(s))
    assert dicom.list_private_payloads(ds_) == [dicom.private_payload_tag(0)]
    back, others = read_dicom_study(export_dicom_study(s))
    assert others == {}
    step = dicom.descriptor_for(ds_, dicom.PIXEL_DATA).rescale_slope
    assert np.max(np.abs(back.low.pixels - s.low.pixels)) <= step


def test_mono_decreases_with_kev_where_high_below_low():
    s = generate_slice(default_spec("skull", 64, 64))
    mask = s.high.pixels < s.low.pixels
    prev = None
    for kev in range(40, 141, 10):
        cur = vendor_monoenergetic(s, kev).pixels[mask]
        if prev is not None:
            assert np.all(cur < prev)
        prev = cur
