import json

import numpy as np
import pytest

from dect_extract import cli, pipeline
from dect_extract.imaging import ShapeError
from dect_extract.pipeline import ExperimentConfig, Manifest, sha256_file

SMALL = ["--size", "96"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_attack_mono_small(tmp_path, capsys):
    code, out, _ = run(capsys, "attack", "--out", str(tmp_path), *SMALL)
    assert code == 0
    rows = (tmp_path / "results/results.csv").read_text().splitlines()
    assert rows[0] == "model,target,slice,r,ssim,n"
    assert len(rows) == 1 + 12
    assert "mono60 (blend)" in out and "FAIL" not in out
    for v in ("brain", "skull", "lung"):
        assert len(list((tmp_path / "targets").glob(f"{v}_mono*.npy"))) == 6
    log = json.loads((tmp_path / "models/blend_mono60.log.json").read_text())
    assert abs(log["w_high"] - 0.2) < 1e-9 and log["alpha_oracle"] == 0.2


def test_manifest_lists_every_file_with_hash(tmp_path, capsys):
    assert run(capsys, "attack", "--out", str(tmp_path), "--kev", "60", *SMALL)[0] == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    files = {p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file()}
    assert files - {"manifest.json"} == set(man["artifacts"])
    for rel, e in man["artifacts"].items():
        assert e["sha256"] == sha256_file(tmp_path / rel)
    assert man["config"]["kevs"] == [60.0]


def test_rerun_is_byte_identical(tmp_path, capsys):
    # a 96 px phantom is too coarse for the tree to clear its threshold; only determinism matters here
    codes = {run(capsys, "attack", "--out", str(tmp_path / d), "--target", "iodine", *SMALL)[0] for d in "ab"}
    assert len(codes) == 1
    a = json.loads((tmp_path / "a/manifest.json").read_text())["artifacts"]
    b = json.loads((tmp_path / "b/manifest.json").read_text())["artifacts"]
    assert a == b


def test_iodine_tree_reports_and_log(tmp_path, capsys):
    code, out, _ = run(capsys, "attack", "--out", str(tmp_path), "--target", "iodine", *SMALL)
    rows = (tmp_path / "results/results.csv").read_text().splitlines()[1:]
    assert [r.split(",")[2] for r in rows] == ["brain", "skull", "lung"]
    log = json.loads((tmp_path / "models/reptree_iodine.log.json").read_text())
    assert log["pruned_leaves"] <= log["grown_leaves"]
    assert log["growing_rows"] + log["pruning_rows"] == 96 * 96
    assert "wall" not in json.dumps(log)


def test_ols_on_iodine_warns(tmp_path, capsys):
    code, out, err = run(capsys, "attack", "--out", str(tmp_path), "--target", "iodine", "--model", "ols", *SMALL)
    log = json.loads((tmp_path / "models/ols_iodine.log.json").read_text())
    assert log["relative_rms_residual"] > 0.05 and "warning" in log
    assert code == 1


def test_staged_commands_match_attack(tmp_path, capsys):
    base = ["--out", str(tmp_path / "s"), "--kev", "80", *SMALL]
    assert run(capsys, "generate", *base)[0] == 0
    assert run(capsys, "fit", *base)[0] == 0
    assert run(capsys, "evaluate", *base)[0] == 0
    assert run(capsys, "attack", "--out", str(tmp_path / "a"), "--kev", "80", *SMALL)[0] == 0
    staged = (tmp_path / "s/results/evaluate.csv").read_text()
    assert staged == (tmp_path / "a/results/results.csv").read_text()


def test_impossible_threshold_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "attack", "--out", str(tmp_path), "--kev", "60", "--threshold-ssim", "1.5", *SMALL)
    assert code == 1 and "below thresholds" in err


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["attack", "--model", "svm"])
    assert e.value.code == 2
    code, _, err = run(capsys, "attack", "--out", str(tmp_path), "--train", "lung")
    assert code == 2 and "also a test variant" in err
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"colour": "red"}))
    code, _, err = run(capsys, "attack", "--config", str(bad))
    assert code == 2 and "colour" in err


def test_runtime_errors_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "fit", "--out", str(tmp_path / "empty"))
    assert code == 3 and "generate" in err
    code, _, err = run(capsys, "evaluate", "--out", str(tmp_path / "empty"))
    assert code == 3


def test_wrong_registration_names_grids(tmp_path, capsys):
    assert run(capsys, "generate", "--out", str(tmp_path), "--target", "iodine", *SMALL)[0] == 0
    cfg = ExperimentConfig(out=str(tmp_path), target="iodine", size=96, registration="1,0,0,0,1,0")
    man = Manifest(tmp_path)
    img = pipeline.load_target(cfg, man, "brain", "iodine", pipeline.load_slice(man, "brain").low)
    # identity registration crops the top-left corner of the exported image: right size, wrong content
    assert img.shape == (96, 96)
    # reading the workstation image without registering it back
    cfg2 = ExperimentConfig(out=str(tmp_path), target="iodine", size=96, export=False)
    with pytest.raises(ShapeError, match=r"1200x1024.*96x96"):
        pipeline.load_target(cfg2, man, "brain", "iodine_workstation", pipeline.load_slice(man, "brain").low)


def test_dicom_path_close_to_memory(tmp_path, capsys):
    assert run(capsys, "attack", "--out", str(tmp_path / "m"), "--kev", "70", *SMALL)[0] == 0
    assert run(capsys, "attack", "--out", str(tmp_path / "d"), "--kev", "70", "--dicom", *SMALL)[0] == 0
    def rows(d):
        return [r.split(",") for r in (tmp_path / d / "results/results.csv").read_text().splitlines()[1:]]
    for a, b in zip(rows("m"), rows("d")):
        assert abs(float(a[3]) - float(b[3])) < 1e-3 and abs(float(a[4]) - float(b[4])) < 1e-3
    code, out, _ = run(capsys, "extract", str(tmp_path / "d/dicom/lung.dcm"), "--min-bytes", "1000",
                       "--out", str(tmp_path / "x"))
    assert code == 0 and "(7FE1,0010)" in out and "high-kvp" in out
    assert np.load(tmp_path / "x/7fe1_0010.npy").shape == (96, 96)


def test_scatter_command(tmp_path, capsys):
    np.save(tmp_path / "t.npy", np.arange(100.0).reshape(10, 10))
    np.save(tmp_path / "p.npy", np.arange(100.0).reshape(10, 10) * 2)
    code, out, _ = run(capsys, "scatter", str(tmp_path / "t.npy"), str(tmp_path / "p.npy"),
                       "-o", str(tmp_path / "s.csv"), "--max-points", "20")
    assert code == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 21


def test_config_file_and_flags(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps({"target": "iodine", "rep": {"min_instances": 4}, "ssim": {"dynamic_range": 500.0},
                             "test_variants": ["lung"]}))
    args = cli.make_parser().parse_args(["attack", "--config", str(p), "--max-depth", "6", "--seed", "3"])
    cfg = cli.build_config(args)
    assert cfg.target == "iodine" and cfg.test_variants == ("lung",)
    assert cfg.rep.min_instances == 4 and cfg.rep.max_depth == 6
    assert cfg.ssim.dynamic_range == 500.0 and cfg.seed == 3
    assert cfg.model_kind == "reptree" and cfg.exported and cfg.thresholds == (0.98, 0.98)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_noiseless_120kev_both_rows(tmp_path, capsys):
    code, _, _ = run(capsys, "attack", "--out", str(tmp_path), "--kev", "120", "--noise", "0", *SMALL)
    rows = [r.split(",") for r in (tmp_path / "results/results.csv").read_text().splitlines()[1:]]
    assert code == 0 and [r[2] for r in rows] == ["skull", "lung"]
    assert all(float(r[3]) >= 0.999 and float(r[4]) >= 0.999 for r in rows)


def test_default_generate_manifest(tmp_path, capsys):
    assert run(capsys, "generate", "--out", str(tmp_path), *SMALL)[0] == 0
    arts = json.loads((tmp_path / "manifest.json").read_text())["artifacts"]
    for v in ("brain", "skull", "lung"):
        assert arts[f"data/{v}_low.npy"]["kind"] == "slice-low"
        assert arts[f"data/{v}_high.npy"]["kind"] == "slice-high"
        assert f"targets/{v}_iodine.npy" in arts


def test_unwritable_output_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "generate", "--out", str(blocker / "sub"), *SMALL)
    assert code == 3 and str(blocker / "sub") in err
