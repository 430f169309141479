"""Command line interface.

Exit codes: 0 success, 1 error, 2 case excluded.

"""

from __future__ import annotations

import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
import csv
import json
import logging
from pathlib import Path
import sys
import typing as tp

import numpy as np

from .config import DEFAULT_LABEL_PRESET, LABEL_PRESETS, ConfigBundle, load_config
from .dataset import (
    format_census,
    load_manifest,
    validate_manifest,
)
from .enrich import (
    CrossSectionCurve,
    RootStatus,
    detect_root_extent,
    enrich_volume,
    extract_annulus,
    fit_annulus_plane,
    sweep_cross_sections,
    sweep_distances,
)
from .losses import Objective, combined_loss, softmax
from .metrics import (
    MetricsReport,
    aggregate,
    dice_iou,
    format_comparison_table,
    format_objective_table,
)
from .nifti_io import (
    LabelVolumeReader,
    atomic_output,
    read_label_volume,
    read_logit_volume,
    write_label_volume,
    write_logit_volume,
)
from .optim import FitConfig, fit_probability_field
from .phantom import PhantomKind, PhantomSpec, generate
from .skeleton import skeletons_for_volume
from .volume_common import CaseExcludedError, LabelVolume, TavrClass
from .voxel_ops import class_mask

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_EXCLUDED = 2


def _write_json(path: tp.Union[str, Path], data) -> None:
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
            f.write("\n")


def _write_csv(path: tp.Union[str, Path], header, rows) -> None:
    with atomic_output(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)


def _load_bundle(args) -> ConfigBundle:
    return load_config(
        getattr(args, "config", None), label_preset=getattr(args, "label_preset", None)
    )


############################################################
# enrich
############################################################


def _class_counts(vol: LabelVolume) -> dict[str, int]:
    return {vol.class_map.name_of(c): n for c, n in vol.class_counts().items()}


def enrich_case(
    in_path: str, out_path: str, bundle: ConfigBundle, case_id: str = ""
) -> dict:
    """Enrich one label file; returns the case report (never raises)."""
    report: dict[str, tp.Any] = {"case_id": case_id or Path(in_path).name, "input": str(in_path)}
    try:
        vol = LabelVolumeReader(bundle.label_mapping).read(in_path)
        enriched, result = enrich_volume(vol, bundle.enrich)
        write_label_volume(enriched, out_path)
    except CaseExcludedError as e:
        _logger.warning("Case %s excluded: %s", report["case_id"], e)
        report.update(status=RootStatus.EXCLUDED.value, reason=str(e))
        return report
    except Exception as e:
        _logger.warning("Case %s failed: %s", report["case_id"], e)
        report.update(status="error", reason=str(e))
        return report

    report.update(result.to_dict())
    report["output"] = str(out_path)
    report["class_counts"] = _class_counts(enriched)
    return report


def _exit_code(status: str) -> int:
    if status in (RootStatus.FOUND.value, RootStatus.FALLBACK.value):
        return EXIT_OK
    if status == RootStatus.EXCLUDED.value:
        return EXIT_EXCLUDED
    return EXIT_ERROR


def cmd_enrich(args) -> int:
    bundle = _load_bundle(args)
    if args.manifest:
        return _enrich_batch(args, bundle)
    if not (args.input and args.output):
        raise ValueError("enrich needs --in and --out, or --manifest and --out-dir")

    report = enrich_case(args.input, args.output, bundle)
    report["config"] = bundle.to_dict()
    if args.report:
        _write_json(args.report, report)
    if report["status"] == "error":
        _logger.error("Enrichment failed: %s", report["reason"])
    return _exit_code(report["status"])


def _enrich_batch(args, bundle: ConfigBundle) -> int:
    if not args.out_dir:
        raise ValueError("--manifest needs --out-dir")
    manifest = load_manifest(args.manifest, lenient=args.lenient)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (str(case.label_path), str(out_dir / case.label_path.name), bundle, case.case_id)
        for case in manifest
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(enrich_case, *zip(*jobs)))
    else:
        reports = [enrich_case(*job) for job in jobs]

    statuses = [r["status"] for r in reports]
    summary = {s: statuses.count(s) for s in sorted(set(statuses))}
    _logger.info("Batch enrichment: %s", summary)
    if args.report:
        _write_json(
            args.report,
            {"summary": summary, "cases": reports, "config": bundle.to_dict()},
        )
    return EXIT_ERROR if "error" in statuses else EXIT_OK


############################################################
# root-curve
############################################################


def case_curve(vol: LabelVolume, bundle: ConfigBundle) -> CrossSectionCurve:
    """Cross-section curve of one case; all zeros when the aorta is empty."""
    cfg = bundle.enrich
    aorta = class_mask(vol, TavrClass.AORTA)
    if not aorta.any():
        distances = sweep_distances(cfg)
        return CrossSectionCurve.from_raw(
            distances, np.zeros(len(distances), dtype=np.int64), cfg.smoothing_window
        )
    ventricle = class_mask(vol, TavrClass.LEFT_VENTRICLE)
    plane = fit_annulus_plane(extract_annulus(aorta, ventricle, cfg), aorta)
    return sweep_cross_sections(aorta, plane, cfg)


def cmd_root_curve(args) -> int:
    bundle = _load_bundle(args)
    cfg = bundle.enrich
    if args.aggregate:
        manifest = load_manifest(args.aggregate, lenient=args.lenient)
        reader = LabelVolumeReader(bundle.label_mapping)
        total = None
        used = 0
        for case in manifest:
            try:
                curve = case_curve(reader.read(case.label_path), bundle)
            except Exception as e:
                _logger.warning("Skipping case %s: %s", case.case_id, e)
                continue
            total = curve.raw_counts if total is None else total + curve.raw_counts
            used += 1
        if total is None:
            raise ValueError("No case of %s produced a curve" % args.aggregate)
        curve = CrossSectionCurve.from_raw(
            sweep_distances(cfg), total, cfg.smoothing_window
        )
        _logger.info("Aggregated curve over %d cases", used)
    else:
        if not args.input:
            raise ValueError("root-curve needs --in or --aggregate")
        curve = case_curve(read_label_volume(args.input, bundle.label_mapping), bundle)

    extent = detect_root_extent(curve, refine_on_raw=cfg.refine_minimum)
    _logger.info(
        "Curve extrema: status=%s max=%s min=%s",
        extent.status.value,
        extent.max_distance,
        extent.min_distance,
    )
    _write_csv(args.out, ["distance", "raw_count", "smoothed"], curve.rows())
    return EXIT_OK


############################################################
# skeletonize
############################################################


def cmd_skeletonize(args) -> int:
    bundle = _load_bundle(args)
    vol = read_label_volume(args.input, bundle.label_mapping)
    skel = skeletons_for_volume(vol, args.tube_radius)
    write_label_volume(skel.as_label_volume(vol), args.output)
    return EXIT_OK


############################################################
# metrics and table
############################################################


def _prediction_path(pred_dir: Path, case_id: str, label_path: Path) -> Path:
    for candidate in (
        pred_dir / (case_id + ".nii.gz"),
        pred_dir / (case_id + ".nii"),
        pred_dir / label_path.name,
    ):
        if candidate.exists():
            return candidate
    raise FileNotFoundError("No prediction for case %s in %s" % (case_id, pred_dir))


def cmd_metrics(args) -> int:
    bundle = _load_bundle(args)
    reader = LabelVolumeReader(bundle.label_mapping)
    if args.manifest:
        if not args.pred_dir:
            raise ValueError("--manifest needs --pred-dir")
        manifest = load_manifest(args.manifest, lenient=args.lenient)
        cases = manifest.in_split(args.split) if args.split else list(manifest)
        reports = []
        for case in cases:
            pred_path = _prediction_path(Path(args.pred_dir), case.case_id, case.label_path)
            reports.append(
                dice_iou(reader.read(pred_path), reader.read(case.label_path), case.case_id)
            )
        result = aggregate(reports)
        output = {
            "cases": [r.to_dict() for r in reports],
            "aggregate": result.to_dict(),
        }
    else:
        if not (args.pred and args.truth):
            raise ValueError("metrics needs --pred and --truth, or --manifest")
        result = dice_iou(
            reader.read(args.pred), reader.read(args.truth), Path(args.truth).name
        )
        output = result.to_dict()

    if args.out:
        _write_json(args.out, output)
    if args.table:
        sys.stdout.write(format_comparison_table([(args.label, result)]))
    return EXIT_OK


def _load_report(spec: str) -> tuple[str, MetricsReport]:
    path, _, label = spec.partition(":")
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "aggregate" in data:
        data = data["aggregate"]
    return label or Path(path).stem, MetricsReport.from_dict(data)


def cmd_table(args) -> int:
    runs = [_load_report(spec) for spec in args.reports]
    if args.layout == "objective":
        text = format_objective_table(runs, metric=args.metric)
    else:
        text = format_comparison_table(runs)
    if args.out:
        with atomic_output(args.out) as tmp:
            tmp.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


############################################################
# loss
############################################################


def cmd_loss(args) -> int:
    bundle = _load_bundle(args)
    Objective.get(args.objective)
    logits = read_logit_volume(args.pred_logits)
    truth = read_label_volume(args.truth, bundle.label_mapping)
    if logits.grid != truth.grid:
        raise ValueError("Logit volume and truth are on different grids")
    skel = skeletons_for_volume(truth, args.tube_radius)
    cfg = replace(bundle.loss, objective=args.objective)
    report = combined_loss(softmax(logits), truth, skel, cfg)
    _write_json(args.out, report.to_dict())
    _logger.info("%s total %.6g", args.objective, report.total)
    return EXIT_OK


############################################################
# validate-dataset
############################################################


def cmd_validate_dataset(args) -> int:
    bundle = _load_bundle(args)
    # problems are reported by the validation below rather than raised on load
    manifest = load_manifest(args.manifest, lenient=True)
    result = validate_manifest(
        manifest,
        expect_release_splits=args.expect_release_splits,
        label_mapping=bundle.label_mapping,
        cfg=bundle.enrich,
        lenient=args.lenient,
    )
    counts = " ".join("%s=%d" % (s.value, n) for s, n in result.counts.items())
    print("cases: %s total=%d" % (counts, result.total))
    sys.stdout.write(format_census(result.census))
    for problem in result.problems:
        print("FAIL: %s" % problem)
    if args.report:
        _write_json(args.report, result.to_dict())
    return EXIT_OK if result.ok else EXIT_ERROR


############################################################
# phantom and fit-demo
############################################################


def cmd_phantom(args) -> int:
    overrides = {"seed": args.seed}
    if args.jitter is not None:
        overrides["jitter"] = args.jitter
    if args.dims:
        overrides["dims"] = tuple(args.dims)
    spec = PhantomSpec.for_kind(args.kind, **overrides)
    vol, truth = generate(spec)
    write_label_volume(vol, args.out)
    if args.truth_out:
        plane = truth.interface_plane
        _write_json(
            args.truth_out,
            {
                "kind": truth.kind.value,
                "seed": spec.seed,
                "interface_plane": plane.to_dict() if plane is not None else None,
                "waist_z": truth.waist_z,
                "waist_distance": truth.waist_distance,
                "profile_extrema": truth.profile_extrema,
                "expected_components": {
                    vol.class_map.name_of(c): n
                    for c, n in truth.expected_components.items()
                },
            },
        )
    return EXIT_OK


def cmd_fit_demo(args) -> int:
    bundle = _load_bundle(args)
    if args.truth:
        target = read_label_volume(args.truth, bundle.label_mapping)
    else:
        target, _ = generate(PhantomSpec.for_kind(args.phantom, seed=args.seed))

    overrides = {
        k: v
        for k, v in dict(
            objective=args.objective,
            iterations=args.iterations,
            lr=args.lr,
            init_foreground_logit=args.init_foreground_logit,
        ).items()
        if v is not None
    }
    fit_cfg = replace(bundle.fit, **overrides)
    skel = skeletons_for_volume(target, args.tube_radius)
    logits, trace = fit_probability_field(
        target, skel if len(skel) else None, fit_cfg
    )
    with atomic_output(args.out) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            trace.write_csv(f)
    if args.logits_out:
        write_logit_volume(logits, args.logits_out)
    print("final mean dice %.4f" % trace.final.metrics.mean_dice)
    print("step size %g (lr %g)" % (trace.step_size, fit_cfg.lr))
    return EXIT_OK


############################################################
# Argument parsing
############################################################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tavrseg")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument(
            "--label-preset",
            choices=sorted(LABEL_PRESETS),
            help="source label id mapping (default: %s)" % DEFAULT_LABEL_PRESET,
        )
        return p

    p = with_config(sub.add_parser("enrich", help="add valve, annulus and root labels"))
    p.add_argument("--in", dest="input", help="input label volume")
    p.add_argument("--out", dest="output", help="output label volume")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--manifest", help="dataset manifest for batch mode")
    p.add_argument("--out-dir", help="output directory for batch mode")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_enrich)

    p = with_config(sub.add_parser("root-curve", help="export the cross-section curve"))
    p.add_argument("--in", dest="input")
    p.add_argument("--aggregate", metavar="MANIFEST", help="sum curves over a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_root_curve)

    p = with_config(sub.add_parser("skeletonize", help="per-class skeletons"))
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--tube-radius", type=float, default=0.0)
    p.set_defaults(func=cmd_skeletonize)

    p = with_config(sub.add_parser("metrics", help="Dice and IoU per class"))
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.add_argument("--pred-dir")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--table", action="store_true", help="print the results as a table")
    p.add_argument("--label", default="run", help="column label for --table")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("table", help="render saved metrics reports")
    p.add_argument("reports", nargs="+", metavar="REPORT[:LABEL]")
    p.add_argument("--layout", choices=["objective", "comparison"], default="comparison")
    p.add_argument("--metric", choices=["dice", "iou"], default="dice")
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)

    p = with_config(sub.add_parser("loss", help="evaluate an objective on logits"))
    p.add_argument("--pred-logits", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--objective", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tube-radius", type=float, default=0.0)
    p.set_defaults(func=cmd_loss)

    p = with_config(sub.add_parser("validate-dataset", help="check a dataset manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--expect-paper-splits",
        "--expect-release-splits",
        dest="expect_release_splits",
        action="store_true",
        help="require the published 378/100/100 split sizes",
    )
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_validate_dataset)

    p = sub.add_parser("phantom", help="write a synthetic label volume")
    p.add_argument("--kind", choices=[k.value for k in PhantomKind], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--truth-out", help="JSON file for the analytic ground truth")
    p.set_defaults(func=cmd_phantom)

    p = with_config(sub.add_parser("fit-demo", help="fit a logit field to a target"))
    p.add_argument("--truth", help="target label volume (default: a phantom)")
    p.add_argument(
        "--phantom",
        choices=[k.value for k in PhantomKind],
        default=PhantomKind.SEVEN_CLASS_COMPOSITE.value,
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objective")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-foreground-logit", type=float)
    p.add_argument("--tube-radius", type=float, default=0.0)
    p.add_argument("--out", required=True, help="trace CSV")
    p.add_argument("--logits-out")
    p.set_defaults(func=cmd_fit_demo)

    return parser


def main(argv: tp.Optional[tp.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CaseExcludedError as e:
        _logger.error("%s", e)
        return EXIT_EXCLUDED
    except Exception as e:
        _logger.error("%s", e)
        _logger.debug("Traceback", exc_info=True)
        return EXIT_ERROR
