"""Command line interface.

Exit codes: 0 success / thresholds met, 1 threshold failure, 2 usage error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dect_extract import dicom, metrics, pipeline

EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("dect_extract")


def _kev_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--kev expects comma separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--phantom", metavar="PATH", help="phantom config (JSON)")
    p.add_argument("--out", metavar="DIR", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="base seed for phantom noise and subsampling")
    p.add_argument("--kev", type=_kev_list, metavar="LIST", help="mono-energetic keV list, e.g. 40,60,80")
    p.add_argument("--target", choices=["mono", "iodine"])
    p.add_argument("--model", choices=["ols", "blend", "reptree"])
    p.add_argument("--threshold-r", type=float, metavar="X")
    p.add_argument("--threshold-ssim", type=float, metavar="X")
    p.add_argument("--registration", metavar="a,b,tx,c,d,ty",
                   help="explicit registration transform (default: inverse of the recorded export)")
    p.add_argument("--train", metavar="VARIANT", help="training slice variant (default: brain)")
    p.add_argument("--test", metavar="LIST", help="comma separated test variants (default: skull,lung)")
    p.add_argument("--dicom", action="store_true", help="round-trip slices through DICOM files")
    p.add_argument("--no-export", action="store_true", help="evaluate iodine on the native grid")
    p.add_argument("--noise", type=float, metavar="HU", help="override phantom noise sigma")
    p.add_argument("--size", type=int, metavar="N", help="render N x N phantoms instead of 512 x 512")
    p.add_argument("--subsample", type=int, metavar="N", help="train on N randomly chosen pixels")
    p.add_argument("--ssim-range", type=float, metavar="L", help="fixed SSIM dynamic range")
    p.add_argument("--min-instances", type=int, metavar="N")
    p.add_argument("--max-depth", type=int, metavar="N")
    p.add_argument("-v", "--verbose", action="store_true")


def build_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig.load(args.config) if args.config else pipeline.ExperimentConfig()
    kw = {}
    for attr, key in (("phantom", "phantom"), ("out", "out"), ("seed", "seed"), ("kev", "kevs"),
                      ("target", "target"), ("model", "model"), ("threshold_r", "threshold_r"),
                      ("threshold_ssim", "threshold_ssim"), ("registration", "registration"),
                      ("train", "train_variant"), ("noise", "noise_sigma_hu"), ("size", "size"),
                      ("subsample", "subsample")):
        val = getattr(args, attr, None)
        if val is not None:
            kw[key] = val
    if getattr(args, "test", None):
        kw["test_variants"] = tuple(v.strip() for v in args.test.split(",") if v.strip())
    if getattr(args, "dicom", False):
        kw["via_dicom"] = True
    if getattr(args, "no_export", False):
        kw["export"] = False
    if getattr(args, "ssim_range", None) is not None:
        kw["ssim"] = replace(cfg.ssim, dynamic_range=args.ssim_range)
    rep_kw = {}
    if getattr(args, "min_instances", None) is not None:
        rep_kw["min_instances"] = args.min_instances
    if getattr(args, "max_depth", None) is not None:
        rep_kw["max_depth"] = args.max_depth
    if rep_kw:
        kw["rep"] = replace(cfg.rep, **rep_kw)
    d = cfg.to_dict()
    d.update(kw)
    d["rep"] = kw.get("rep", cfg.rep)
    d["ssim"] = kw.get("ssim", cfg.ssim)
    return pipeline.ExperimentConfig.from_dict(d)


def _print_reports(reports, cfg):
    sys.stdout.write(pipeline.format_table(reports, cfg.thresholds))


def run_generate(args):
    cfg = build_config(args)
    man = pipeline.cmd_generate(cfg)
    print(f"wrote {len(man.data['artifacts'])} artifacts; manifest {man.path}")
    return EXIT_OK


def run_fit(args):
    cfg = build_config(args)
    targets = [args.fit_target] if args.fit_target else cfg.target_names()
    for t in targets:
        print(pipeline.cmd_fit(cfg, t))
    return EXIT_OK


def run_evaluate(args):
    cfg = build_config(args)
    targets = [args.fit_target] if args.fit_target else cfg.target_names()
    reports = []
    for t in targets:
        reports += pipeline.cmd_evaluate(cfg, args.model_file, t)
    pipeline.write_results(cfg, reports, name="evaluate")
    _print_reports(reports, cfg)
    failures = [r for r in reports if not r.passes(*cfg.thresholds)]
    return EXIT_THRESHOLD if failures else EXIT_OK


def run_attack(args):
    cfg = build_config(args)
    reports, failures = pipeline.cmd_attack(cfg)
    _print_reports(reports, cfg)
    if failures:
        r, s = cfg.thresholds
        print(f"{len(failures)} row(s) below thresholds r>={r} ssim>={s}:", file=sys.stderr)
        for f in failures:
            print(f"  {f.target_label} {f.slice_label}: r={f.r:.4f} ssim={f.ssim:.4f}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def run_extract(args):
    data = Path(args.file).read_bytes()
    ds = dicom.parse_dataset(data)
    tags = dicom.list_private_payloads(ds, args.min_bytes)
    print(f"{len(ds)} elements, {len(tags)} private payload(s) >= {args.min_bytes} bytes")
    for tag in tags:
        print(f"  {tag}  {ds[tag].length:>10} bytes  {dicom.payload_label(ds, tag)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for tag in [dicom.PIXEL_DATA] + tags:
            if tag not in ds:
                continue
            img = dicom.extract_pixel_image(ds, tag)
            name = f"{tag.group:04x}_{tag.element:04x}.npy"
            np.save(out / name, img.pixels)
            print(f"  wrote {out / name}")
    return EXIT_OK


def run_scatter(args):
    truth = np.load(args.truth)
    pred = np.load(args.prediction)
    pairs = metrics.scatter_pairs(truth, pred, args.max_points, args.seed)
    metrics.write_scatter_csv(args.output, pairs)
    print(f"wrote {len(pairs)} pairs to {args.output}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dect-extract",
        description="Reverse-engineer pixel-wise dual-energy CT algorithms from input/output pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render phantoms and vendor-oracle targets")
    _common(p)
    p.set_defaults(func=run_generate)

    p = sub.add_parser("fit", help="fit a model on the training slice")
    _common(p)
    p.add_argument("--fit-target", metavar="NAME", help="single target, e.g. mono60 or iodine")
    p.set_defaults(func=run_fit)

    p = sub.add_parser("evaluate", help="evaluate a fitted model on the test slices")
    _common(p)
    p.add_argument("--fit-target", metavar="NAME", help="single target, e.g. mono60 or iodine")
    p.add_argument("--model-file", metavar="PATH", help="serialized model (default: the one 'fit' wrote)")
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("attack", help="generate, fit and evaluate in one go")
    _common(p)
    p.set_defaults(func=run_attack)

    p = sub.add_parser("extract", help="list (and dump) private pixel payloads of a DICOM file")
    p.add_argument("file")
    p.add_argument("--min-bytes", type=int, default=65536)
    p.add_argument("--out", metavar="DIR", help="write payloads as .npy files")
    p.set_defaults(func=run_extract)

    p = sub.add_parser("scatter", help="truth/prediction scatter CSV from two .npy images")
    p.add_argument("truth")
    p.add_argument("prediction")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--max-points", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=run_scatter)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (pipeline.ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
