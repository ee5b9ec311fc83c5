"""Command-line entry point: ``mammocad <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, build, read_flat

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _section(path, prefix: str, classes, seed=None, base_for=None):
    """Build one object per class from a flat config, keys bare or ``prefix.``-qualified."""
    values = read_flat(path) if path else {}
    values = {(k[len(prefix) + 1:] if k.startswith(prefix + ".") else k): v for k, v in values.items()}
    names = set()
    for cls in classes:
        names |= set(cls.__dataclass_fields__)
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = []
    for cls in classes:
        base = dict((base_for or {}).get(cls, {}))
        if seed is not None and "seed" in cls.__dataclass_fields__:
            base["seed"] = seed
        out.append(build(cls, values, base=base, strict=False))
    return out


def _split_arg(value: str):
    return None if value == "all" else value


# -- subcommands -------------------------------------------------------------

def cmd_generate(args):
    from .pipeline import CohortConfig
    from .phantom import PhantomSpec, generate_cohort

    values = read_flat(args.config) if args.config else {}
    base = {"seed": args.seed} if args.seed is not None else {}
    spec = build(PhantomSpec, values, "phantom", base=base, strict=False)
    cohort = build(CohortConfig, values, "cohort", strict=False)
    n = args.n_cases if args.n_cases is not None else cohort.n_cases
    views = args.views if args.views is not None else cohort.views_per_case
    split = tuple(float(x) for x in args.split.split(",")) if args.split else cohort.split
    m = generate_cohort(spec, n, views, split, args.out)
    print(f"wrote {len(m.records)} records to {Path(args.out) / 'manifest.csv'}")


def cmd_preprocess(args):
    from .data import load_manifest
    from .preprocess import preprocess_manifest

    m = preprocess_manifest(
        load_manifest(args.manifest), args.out, sigma=args.sigma, augment=args.augment,
        quantize_percentile=args.quantize_percentile, seed=args.seed or 0,
    )
    print(f"wrote {len(m.records)} records to {Path(args.out) / 'manifest.csv'}")


def cmd_train_cade(args):
    from dataclasses import asdict

    from .cade import CadeModelConfig, CadeTrainConfig
    from .stages import train_cade_stage

    train_base = asdict(CadeTrainConfig.desk()) if args.preset == "desk" else {}
    train_base.pop("seed", None)
    mcfg, tcfg = _section(args.config, "cade", (CadeModelConfig, CadeTrainConfig), args.seed,
                          base_for={CadeTrainConfig: train_base})
    ckpt = train_cade_stage(args.manifest, mcfg, tcfg, args.out)
    last = ckpt.metrics_log[-1] if ckpt.metrics_log else {}
    print(f"saved epoch {ckpt.epoch} checkpoint to {args.out} (last epoch: {last})")


def cmd_infer_cade(args):
    from .cade import Detector
    from .checkpoint import Checkpoint
    from .data import read_image, write_image

    pmap = Detector(Checkpoint.load(args.ckpt, kind="cade"))(read_image(args.image))
    write_image(pmap.to_image(), args.out)
    print(f"wrote {args.out}")


def cmd_extract_rois(args):
    from .stages import extract_detected_rois, extract_truth_rois

    if args.from_truth:
        n = extract_truth_rois(args.manifest, args.out)
    else:
        if not args.ckpt and not args.maps_dir:
            raise ConfigError("extract-rois needs --ckpt or --maps-dir (or --from-truth)")
        n = extract_detected_rois(args.manifest, args.out, maps_dir=args.maps_dir, ckpt_path=args.ckpt,
                                  threshold=args.threshold, k=args.k, min_area=args.min_area,
                                  split=_split_arg(args.split))
    print(f"wrote {n} RoIs to {args.out}")


def cmd_train_cadi(args):
    from .cadi import CadiModelConfig, CadiTrainConfig
    from .stages import train_cadi_stage

    mcfg, tcfg = _section(args.config, "cadi", (CadiModelConfig, CadiTrainConfig), args.seed)
    ckpt = train_cadi_stage(args.rois, args.labels, mcfg, tcfg, args.out, pretrained=args.pretrained)
    print(f"saved epoch {ckpt.epoch} checkpoint to {args.out}")


def cmd_classify(args):
    from .stages import classify_stage

    n = classify_stage(args.ckpt, args.rois, args.out)
    print(f"wrote {n} predictions to {args.out}")


def cmd_evaluate(args):
    from .stages import evaluate_stage

    rep = evaluate_stage(args.pred_dir, args.manifest, args.out, maps_dir=args.maps_dir,
                         dsc_threshold=args.dsc_threshold, threshold=args.threshold, k=args.k,
                         min_area=args.min_area, split=_split_arg(args.split))
    seg = rep["segmentation"]["aggregate"]
    print(f"{rep['n_images']} images; Dice {seg['dice_mean']:.3f} ± {seg['dice_std']:.3f}")


def cmd_fuse(args):
    from .stages import fuse_stage

    rep = fuse_stage(args.predictions, args.manifest, args.out, _split_arg(args.split), args.source)
    print(f"{rep['n_subjects']} subjects; diagnosis accuracy {rep['diagnosis_accuracy']:.4f}")


def cmd_report(args):
    from .stages import report_stage

    files = report_stage(args.eval, args.subjects, args.out_dir, manifest_path=args.manifest,
                         pred_dir=args.pred_dir, n_panels=args.panels, split=_split_arg(args.split))
    print(f"wrote {len(files)} files to {args.out_dir}")


def cmd_run(args):
    from .pipeline import load_pipeline_config, run_pipeline
    from dataclasses import replace

    cfg = load_pipeline_config(args.config, seed=args.seed, out_dir=args.out)
    if args.no_cache:
        cfg = replace(cfg, cache=False)
    run_pipeline(cfg)
    print(f"report: {Path(cfg.out_dir) / 'report' / 'report.json'}")


# -- parser ------------------------------------------------------------------

def _common(p, out_help="output path", out_required=True):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", required=out_required, help=out_help)


def _post_flags(p):
    p.add_argument("--threshold", type=float, default=0.5, help="probability-map binarisation threshold")
    p.add_argument("--k", type=int, default=3, help="regions kept per image")
    p.add_argument("--min-area", type=int, default=None, help="minimum region area in pixels")
    p.add_argument("--split", default="test", help="manifest split to process, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mammocad", description="Synthetic mammography detection/diagnosis pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-phantoms", help="write a synthetic cohort")
    _common(p, "output directory")
    p.add_argument("--n-cases", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--split", help="train,val,test fractions")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="segment, normalise and augment a manifest")
    _common(p, "output directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--quantize-percentile", type=float, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-cade", help="train the detector")
    _common(p, "checkpoint path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preset", choices=("desk", "reference"), default="desk",
                   help="training defaults before config overrides")
    p.set_defaults(func=cmd_train_cade)

    p = sub.add_parser("infer-cade", help="probability map for one image")
    _common(p, "16-bit PNG map path")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_infer_cade)

    p = sub.add_parser("extract-rois", help="detect regions and write classifier RoIs")
    _common(p, "output directory")
    p.add_argument("--ckpt")
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps-dir", help="reuse precomputed maps instead of running the detector")
    p.add_argument("--from-truth", action="store_true", help="RoIs from annotated lesions, with labels.csv")
    _post_flags(p)
    p.set_defaults(func=cmd_extract_rois)

    p = sub.add_parser("train-cadi", help="train the classifier")
    _common(p, "checkpoint path")
    p.add_argument("--rois", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--pretrained", help="architecture-compatible weight file")
    p.set_defaults(func=cmd_train_cadi)

    p = sub.add_parser("classify", help="classify a directory of RoIs")
    _common(p, "predictions CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rois", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="detection/segmentation/classification metrics")
    _common(p, "report JSON")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps-dir")
    p.add_argument("--dsc-threshold", type=float, default=0.5)
    _post_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", help="subject-level multi-view fusion")
    _common(p, "subject report JSON")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--source", default="")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("report", help="render tables, CSVs and panels")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval", required=True)
    p.add_argument("--subjects", required=True, nargs="+")
    p.add_argument("--out-dir", "--out", dest="out_dir", required=True)
    p.add_argument("--manifest")
    p.add_argument("--pred-dir", help="directory containing maps/ for panels")
    p.add_argument("--panels", type=int, default=8)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline")
    _common(p, "run directory", out_required=False)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    from .pipeline import StageError

    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
