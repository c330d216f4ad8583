"""Command-line entry points for every pipeline stage.

Usage errors exit 2 (argparse); data errors print a diagnostic to
stderr and exit 1; success exits 0.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .engine import enumerate_rule_space, label_nuclei
from .errors import PhenogateError
from .metrics import (
    aggregate_folds,
    class_metrics,
    confusion_from_predictions,
    emit_report,
)
from .patches import (
    FoldPlan,
    PatchDataset,
    DatasetManifest,
    SlideInput,
    build_dataset,
    make_folds,
    subset_indices,
    validate_fold_plan,
)
from .pseudohe import StainMixSpec, render_pseudo_he, write_rgb
from .rulelang import (
    canonical_rules_source,
    canonical_table1_program,
    compile_program,
    format_rule_program,
    parse_rule_program,
)
from .service import TunerService, build_app
from .slideio import (
    NucleusTable,
    SlideManifest,
    ThresholdSet,
    compute_nucleus_features,
    load_slide,
    suggest_thresholds,
)
from .synth import CohortManifest, CohortSpec, SynthSpec, generate_synthetic_cohort
from .training import TrainConfig, TrainedModel, predict, train, write_predictions_csv


def _load_program(args):
    """(program, source text) from --rules, or the built-in cascade."""
    merged = bool(getattr(args, "merge_step_10_15", False))
    path = getattr(args, "rules", None)
    if path is not None:
        if merged:
            raise PhenogateError("--merge-step-10-15 applies only to the built-in rules")
        text = Path(path).read_text(encoding="utf-8")
        return parse_rule_program(text), text
    program = canonical_table1_program(merge_step_10_15=merged)
    text = canonical_rules_source() if not merged else format_rule_program(program)
    return program, text


def _load_features(manifest_path, threads: int) -> NucleusTable:
    """Features for one slide, computed from pixels and cached beside it."""
    manifest_path = Path(manifest_path)
    cache = manifest_path.parent / "features.csv"
    if cache.exists():
        return NucleusTable.from_csv(cache)
    channels, mask = load_slide(SlideManifest.from_json(manifest_path))
    features = compute_nucleus_features(channels, mask, threads=threads)
    features.to_csv(cache)
    return features


# --- subcommand handlers ----------------------------------------------------

def _cmd_ingest(args) -> int:
    manifest = SlideManifest.from_json(args.manifest)
    channels, mask = load_slide(manifest)
    features = compute_nucleus_features(channels, mask, threads=args.threads)
    features.to_csv(args.out)
    print(f"wrote {args.out} ({len(features)} nuclei, "
          f"{len(features.marker_names)} markers)")
    if args.thresholds_out:
        ts = suggest_thresholds(features, method=args.method, p=args.percentile,
                                slide_id=manifest.slide_id)
        ts.to_json(args.thresholds_out)
        print(f"wrote {args.thresholds_out} ({args.method} starting thresholds)")
    return 0


def _cmd_label(args) -> int:
    program, _ = _load_program(args)
    if args.features:
        features = NucleusTable.from_csv(args.features)
    else:
        features = _load_features(args.manifest, args.threads)
    thresholds = ThresholdSet.from_json(args.thresholds)
    table = label_nuclei(features, thresholds, program, threads=args.threads)
    table.to_csv(args.out)
    counts = table.class_counts()
    assigned = len(table) - counts["excluded"] - counts["unassigned"]
    print(f"wrote {args.out} ({len(table)} nuclei: {assigned} assigned, "
          f"{counts['excluded']} excluded, {counts['unassigned']} unassigned)")
    return 0


def _cmd_enumerate(args) -> int:
    program, _ = _load_program(args)
    report = enumerate_rule_space(program)
    print(report.summary())
    if report.violations:
        print(f"violations: {report.multi_assignments} multi-assignments, "
              f"{report.disagreements} naive/compiled disagreements",
              file=sys.stderr)
        return 1
    return 0


def _cmd_render_he(args) -> int:
    manifest = SlideManifest.from_json(args.manifest)
    channels, _ = load_slide(manifest)
    if args.mix:
        spec = StainMixSpec.from_json(args.mix)
    else:
        spec = StainMixSpec.default(manifest.marker_names)
    rgb = render_pseudo_he(channels, spec)
    write_rgb(args.out, rgb)
    print(f"wrote {args.out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


def _cmd_patches(args) -> int:
    program, _ = _load_program(args)
    cohort = CohortManifest.from_json(Path(args.cohort) / "cohort.json")
    inputs = []
    for slide in cohort.slides:
        slide_dir = cohort.root / slide.path
        manifest = SlideManifest.from_json(slide_dir / "manifest.json")
        features = _load_features(slide_dir / "manifest.json", args.threads)
        thresholds = ThresholdSet.from_json(slide_dir / "thresholds.json")
        labels = label_nuclei(features, thresholds, program, threads=args.threads)
        channels, _ = load_slide(manifest)
        he = render_pseudo_he(channels, StainMixSpec.default(manifest.marker_names))
        inputs.append(SlideInput(manifest, features, labels, he))
    manifest_out = args.manifest_out or str(Path(args.out).with_suffix(".json"))
    ds_manifest = build_dataset(inputs, args.out,
                                fold_plan_ref=args.folds)
    ds_manifest.to_json(manifest_out)
    print(f"wrote {args.out} ({ds_manifest.record_count} patches from "
          f"{len(inputs)} slides); manifest {manifest_out}")
    return 0


def _cmd_folds(args) -> int:
    cohort = CohortManifest.from_json(Path(args.cohort) / "cohort.json")
    patients = cohort.patient_infos()
    plan = make_folds(patients, seed=args.seed, k=args.k)
    problems = validate_fold_plan(plan, patients)
    if problems:
        for problem in problems:
            print(f"violation: {problem}", file=sys.stderr)
        return 1
    plan.to_json(args.out)
    print(f"wrote {args.out} ({plan.k} folds over {len(patients)} patients, "
          f"seed {plan.seed})")
    return 0


def _cmd_train(args) -> int:
    dataset = PatchDataset.open(args.dataset)
    manifest = DatasetManifest.from_json(args.dataset_manifest)
    plan = FoldPlan.from_json(args.folds)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                         peak_lr=args.peak_lr, val_every=args.val_every,
                         hidden=args.hidden or None, seed=args.seed)
    train_idx = subset_indices(dataset, manifest, plan, args.fold, "train")
    val_idx = subset_indices(dataset, manifest, plan, args.fold, "val")
    model = train(dataset, config, train_idx, val_idx,
                  class_names=manifest.class_names)
    model.save(args.out)
    final = model.val_curve[-1]
    print(f"wrote {args.out} (fold {args.fold}: {len(train_idx)} train / "
          f"{len(val_idx)} val records; best val loss {model.best_val_loss:.4f} "
          f"at step {model.best_step}; final val acc {final[2]:.3f})")
    return 0


def _cmd_predict(args) -> int:
    dataset = PatchDataset.open(args.dataset)
    manifest = DatasetManifest.from_json(args.dataset_manifest)
    plan = FoldPlan.from_json(args.folds)
    model = TrainedModel.load(args.model)
    idx = subset_indices(dataset, manifest, plan, args.fold, args.role)
    if len(idx) == 0:
        raise PhenogateError(f"no records in fold {args.fold} role {args.role!r}")
    pred, probs = predict(model, dataset.features(idx))
    slide_of = {s.index: s.slide_id for s in manifest.slides}
    slide_ids = [slide_of[int(s)] for s in dataset.slide_idx[idx]]
    write_predictions_csv(args.out, dataset.nucleus_ids[idx], slide_ids,
                          dataset.labels[idx], pred, probs)
    acc = float((pred == dataset.labels[idx]).mean())
    print(f"wrote {args.out} ({len(idx)} {args.role} records, accuracy {acc:.3f})")
    return 0


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        class_count = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
        true_col = header.index("true_label")
        pred_col = header.index("pred_label")
        true_labels, pred_labels = [], []
        for row in reader:
            true_labels.append(int(row[true_col]))
            pred_labels.append(int(row[pred_col]))
    return (np.array(true_labels, np.int64), np.array(pred_labels, np.int64),
            class_count)


def _cmd_eval(args) -> int:
    matrices = []
    class_names: tuple[str, ...] | None = None
    for path in args.predictions:
        true_labels, pred_labels, class_count = _read_predictions(path)
        if class_names is None:
            canonical = canonical_table1_program().classes
            class_names = (canonical if class_count == len(canonical)
                           else tuple(f"class{i}" for i in range(class_count)))
        matrices.append(confusion_from_predictions(true_labels, pred_labels,
                                                   class_names))
    summary = aggregate_folds([class_metrics(cm) for cm in matrices])
    flags = emit_report(summary, args.out, json_path=args.json,
                        ppv_cutoff=args.ppv_cutoff)
    learned = sorted(name for name, ok in flags.items() if ok)
    print(f"wrote {args.out} ({len(matrices)} folds); "
          f"learned (mean PPV >= {args.ppv_cutoff}): "
          f"{', '.join(learned) if learned else 'none'}")
    return 0


def _cmd_synth(args) -> int:
    slide = SynthSpec(width=args.width, height=args.height,
                      nucleus_count=args.nuclei,
                      positive_std=args.noise_std, negative_std=args.noise_std,
                      seed=args.seed)
    spec = CohortSpec(patient_count=args.patients,
                      slides_per_patient=args.slides_per_patient,
                      microns_per_pixel=args.mpp, slide=slide, seed=args.seed)
    cohort = generate_synthetic_cohort(args.out, spec)
    print(f"wrote {args.out} ({len(cohort.slides)} slides, "
          f"{len(cohort.patients)} patients, seed {args.seed})")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    program, text = _load_program(args)
    if args.cohort:
        service = TunerService.from_cohort(args.cohort, program, text,
                                           with_images=not args.features_only)
    else:
        service = TunerService(program, text)
        for path in args.manifest:
            service.load_manifest(path, with_images=not args.features_only)
    if not service.sessions:
        raise PhenogateError("no slides loaded; pass --cohort or --manifest")
    ui_dir = Path(args.ui_dir) if args.ui_dir else Path("frontend/dist")
    app = build_app(service, ui_dir if ui_dir.is_dir() else None)
    print(f"serving {len(service.sessions)} slide(s) on "
          f"http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_rules_check(args) -> int:
    program, _ = _load_program(args)
    program.validate()
    compiled = compile_program(program)
    if args.show:
        print(format_rule_program(program), end="")
    print(f"ok: {len(program.steps)} steps, {len(program.classes)} classes, "
          f"{len(program.marker_names)} panel markers, "
          f"{len(compiled.referenced_indices)} referenced")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenogate",
        description="Nucleus phenotyping from multiplexed immunofluorescence: "
                    "threshold gating, rule-cascade labeling, pseudo-H&E, "
                    "patch datasets, training, and a tuning service.")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for stochastic stages (default 0)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for batch stages (default 1)")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def rules_opts(p, merged: bool = True):
        p.add_argument("--rules", help="rule program file (default: built-in)")
        if merged:
            p.add_argument("--merge-step-10-15", dest="merge_step_10_15",
                           action="store_true",
                           help="built-in variant with steps 10 and 15 merged")

    p = sub.add_parser("ingest", help="compute per-nucleus features from a slide")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="features CSV path")
    p.add_argument("--thresholds-out", help="also write starting thresholds")
    p.add_argument("--method", choices=("otsu", "percentile"), default="otsu")
    p.add_argument("--percentile", type=float, default=50.0)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("label", help="gate and run the cascade over one slide")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="slide manifest (features cached)")
    src.add_argument("--features", help="precomputed features CSV")
    p.add_argument("--thresholds", required=True)
    rules_opts(p)
    p.add_argument("--out", required=True, help="label table CSV path")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("enumerate",
                       help="evaluate every gate vector; exit 0 iff sound")
    rules_opts(p)
    p.set_defaults(func=_cmd_enumerate)

    p = sub.add_parser("render-he", help="render a pseudo-H&E image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mix", help="stain mix JSON (default: DAPI vs rest)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render_he)

    p = sub.add_parser("patches", help="build a patch dataset from a cohort")
    p.add_argument("--cohort", required=True)
    rules_opts(p)
    p.add_argument("--folds", help="fold plan path recorded in the manifest")
    p.add_argument("--out", required=True, help="record file path")
    p.add_argument("--manifest-out", help="dataset manifest path "
                                          "(default: record file with .json)")
    p.set_defaults(func=_cmd_patches)

    p = sub.add_parser("folds", help="draw a stratified patient fold plan")
    p.add_argument("--cohort", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_folds)

    p = sub.add_parser("train", help="train the reference classifier on one fold")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--peak-lr", type=float, default=1e-3)
    p.add_argument("--val-every", type=int, default=250)
    p.add_argument("--hidden", type=int, default=0,
                   help="hidden width (0 = linear)")
    p.add_argument("--out", required=True, help="model file path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write per-nucleus predictions for a fold")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--role", choices=("train", "val", "test"), default="test")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="aggregate fold predictions into a report")
    p.add_argument("predictions", nargs="+", help="per-fold predictions CSVs")
    p.add_argument("--ppv-cutoff", type=float, default=0.3)
    p.add_argument("--json", help="also write a JSON report")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic cohort with truth")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--slides-per-patient", type=int, default=1)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--nuclei", type=int, default=200)
    p.add_argument("--noise-std", type=float, default=10.0)
    p.add_argument("--mpp", type=float, default=0.32)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("serve", help="run the threshold-tuning HTTP service")
    p.add_argument("--cohort", help="cohort directory to load")
    p.add_argument("--manifest", nargs="*", default=[],
                   help="individual slide manifests to load")
    rules_opts(p, merged=False)
    p.add_argument("--features-only", action="store_true",
                   help="skip pixel data (no overlay layers)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir", help="static UI directory "
                                    "(default: frontend/dist if present)")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("rules-check", help="parse and validate a rule program")
    rules_opts(p)
    p.add_argument("--show", action="store_true",
                   help="print the formatted program")
    p.set_defaults(func=_cmd_rules_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhenogateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
