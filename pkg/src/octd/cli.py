"""Command-line interface: ``octd phantom|despeckle|metrics|compare``.

Exit codes: 0 success, 1 internal failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import LabelMap
from .image import Image, ImageFormatError, WindowSpec, load_image, read_roi_file, save_image, write_pgm
from .metrics import MetricsReport, default_background, evaluate, write_reports
from .optics import PhantomSpec, synthesize_phantom, table1_phantom
from .pipeline import RunConfig, run_cff, run_wiener, segment, to_image

log = logging.getLogger("octd")


class UsageError(Exception):
    """Bad input or arguments; maps to exit code 2."""


def _add_config_flags(p):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", metavar="FILE", help="JSON run configuration")
    g.add_argument("--k", type=int, help="number of clusters (default 4)")
    g.add_argument("--window", metavar="N1xN2", help="neighbourhood window (default 5x5)")
    g.add_argument("--w1", type=float, help="attenuation feature weight (default 0.7)")
    g.add_argument("--w2", type=float, help="intensity feature weight (default 0.3)")
    g.add_argument("--smooth", choices=("max", "majority"), dest="smooth_mode",
                   help="label smoothing mode (default majority)")
    g.add_argument("--sample-size", type=int, help="pixels clustered exactly (default 2000)")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--noise-var", type=float, dest="wiener_noise_var",
                   help="fixed noise variance for the baseline Wiener filter")
    g.add_argument("--attenuation", choices=("tail", "logslope"), dest="attenuation_method",
                   help="attenuation estimator (default tail)")


def _config(args) -> RunConfig:
    try:
        base = RunConfig.from_json(args.config) if args.config else RunConfig()
        window = WindowSpec.parse(args.window) if args.window else None
        return base.updated(k=args.k, window=window, w1=args.w1, w2=args.w2,
                            smooth_mode=args.smooth_mode, sample_size=args.sample_size,
                            seed=args.seed, wiener_noise_var=args.wiener_noise_var,
                            attenuation_method=args.attenuation_method)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _load(path) -> Image:
    try:
        return load_image(path)
    except (OSError, ImageFormatError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _label_path(out: Path) -> Path:
    return out.with_name(out.stem + "_labels.pgm")


def _write_labels(path, lm: LabelMap):
    if lm.k > 255:
        raise ValueError("8-bit label maps hold at most 255 clusters")
    write_pgm(path, lm.labels, 255)


def _provenance(command: str, config: RunConfig | None = None) -> list[str]:
    lines = [f"octd {__version__} {command}"]
    if config is not None:
        lines.append(f"config={config.to_json()}")
    return lines


# -- commands ---------------------------------------------------------------

def cmd_phantom(args) -> int:
    try:
        if args.spec == "table1":
            spec = table1_phantom(seed=args.seed if args.seed is not None else 42)
        else:
            spec = PhantomSpec.from_json(args.spec)
    except (OSError, ValueError) as exc:
        raise UsageError(f"invalid phantom spec: {exc}") from None
    noisy, truth, clean = synthesize_phantom(spec)
    prefix = Path(args.out_prefix)
    ext = "." + args.format
    save_image(noisy, prefix.with_name(prefix.name + "_noisy" + ext))
    save_image(clean, prefix.with_name(prefix.name + "_clean" + ext))
    write_pgm(prefix.with_name(prefix.name + "_truth.pgm"), truth, 255)
    log.info("wrote phantom %s (%dx%d, %d layers)", prefix, spec.rows, spec.cols,
             len(spec.layers))
    return 0


def _cluster_rows(result) -> list[dict]:
    lm = result.labels
    counts = lm.counts()
    rows = []
    for k in range(1, lm.k + 1):
        cen = lm.centroids[k - 1] if lm.centroids is not None else (np.nan, np.nan)
        rows.append({"label": k, "size": int(counts[k - 1]),
                     "centroid_intensity": f"{cen[0]:.6f}",
                     "centroid_attenuation": f"{cen[1]:.6f}",
                     "noise_var": f"{result.noise.get(k, float('nan')):.6g}"})
    return rows


def cmd_despeckle(args) -> int:
    config = _config(args)
    img = _load(args.input)
    out = Path(args.output)
    if args.method == "wiener":
        save_image(to_image(run_wiener(img, config), img), out)
        return 0
    result = run_cff(img, config)
    save_image(to_image(result.filtered, img), out)
    _write_labels(_label_path(out), result.labels)
    with open(out.with_name(out.stem + "_clusters.csv"), "w", newline="") as fh:
        for line in _provenance("despeckle", config):
            fh.write(f"# {line}\n")
        rows = _cluster_rows(result)
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    log.info("cff total wall time %.3f s", result.timings["total"])
    return 0


def _rois(args, shape):
    """First ROI in the file is the background, the rest are CNR regions."""
    if not args.roi:
        return default_background(shape), None
    try:
        rois = read_roi_file(args.roi)
        for r in rois:
            r.check(shape)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if not rois:
        raise UsageError(f"{args.roi}: no ROIs")
    return rois[0], rois[1:] or None


def cmd_metrics(args) -> int:
    if args.all_metrics and not args.ref:
        raise UsageError("EPI and SSIM need a reference image (--ref)")
    ref = _load(args.ref) if args.ref else None
    reports = []
    for path in args.images:
        img = _load(path)
        if ref is not None and ref.shape != img.shape:
            raise UsageError(f"{path}: shape {img.shape} differs from reference {ref.shape}")
        background, rois = _rois(args, img.shape)
        reports.append(evaluate(img, Path(path).name, ref, rois, background))
    write_reports(args.csv, reports, _provenance("metrics"), append=True)
    return 0


def _find_reference(args, img_path: Path):
    if args.ref:
        return _load(args.ref)
    stem = img_path.stem
    if stem.endswith("_noisy"):
        clean = img_path.with_name(stem[: -len("_noisy")] + "_clean" + img_path.suffix)
        if clean.exists():
            return _load(clean)
    raise UsageError("compare needs a reference image: pass --ref "
                     "(phantom inputs named *_noisy use their *_clean sibling)")


def sweep_pairs(step: float = 0.1) -> list[tuple[float, float]]:
    """Weight pairs on the grid ``w1 in {0, 0.1, ..., 1}`` with ``w1 + w2 = 1``."""
    n = int(round(1.0 / step))
    return [(round(i * step, 10), round(1.0 - i * step, 10)) for i in range(n + 1)]


def cmd_compare(args) -> int:
    config = _config(args)
    in_path = Path(args.input)
    img = _load(in_path)
    ref = _find_reference(args, in_path)
    if ref.shape != img.shape:
        raise UsageError("reference and input shapes differ")
    background, rois = _rois(args, img.shape)

    wien = run_wiener(img, config)
    cff = run_cff(img, config)
    reps = [evaluate(img, "original", ref, rois, background),
            evaluate(wien, "wiener", ref, rois, background),
            evaluate(cff.filtered, "cff", ref, rois, background)]
    deltas = [reps[1].delta(reps[0], "wiener-original"),
              reps[2].delta(reps[0], "cff-original")]
    comments = _provenance("compare", config) + [f"input={in_path.name}"]
    if reps[2].ssim_scale is not None:
        comments.append(f"ssim_scale={reps[2].ssim_scale:.6g}")
    write_reports(args.csv, reps + deltas, comments)

    if args.sweep_weights:
        out = Path(args.csv)
        for w1, w2 in sweep_pairs():
            _, _, lm = segment(img, config.updated(w1=w1, w2=w2))
            _write_labels(out.with_name(f"{out.stem}_sweep_w1-{w1:.1f}_w2-{w2:.1f}_labels.pgm"), lm)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="octd", description="Cluster-based OCT despeckling")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a layered phantom")
    p.add_argument("spec", help="phantom spec JSON, or 'table1' for the built-in preset")
    p.add_argument("out_prefix")
    p.add_argument("--format", choices=("raw", "pgm"), default="raw")
    p.add_argument("--seed", type=int, help="seed for the table1 preset (default 42)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("despeckle", help="filter an image with CFF or plain Wiener")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--method", choices=("cff", "wiener"), default="cff")
    _add_config_flags(p)
    p.set_defaults(func=cmd_despeckle)

    p = sub.add_parser("metrics", help="append quality metrics rows to a CSV")
    p.add_argument("images", nargs="+")
    p.add_argument("--csv", required=True)
    p.add_argument("--ref", help="reference image for EPI and SSIM")
    p.add_argument("--roi", help="ROI file; first line is the background")
    p.add_argument("--all-metrics", action="store_true",
                   help="require EPI and SSIM (fails without --ref)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("compare", help="original vs Wiener vs CFF metrics table")
    p.add_argument("input")
    p.add_argument("--csv", required=True)
    p.add_argument("--ref")
    p.add_argument("--roi")
    p.add_argument("--sweep-weights", action="store_true",
                   help="also write label maps for the 0.0-1.0 weight grid")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"octd {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"octd {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
