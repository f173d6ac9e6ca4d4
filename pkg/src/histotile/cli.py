"""Command-line interface.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors (including
invalid argument values such as an unreadable or empty corpus root).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import classifier as clf
from . import dataset, evaluation, features, filterbank
from .config import ConfigError, RunConfig, config_from_mapping, override, parse_config_file

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(ValueError):
    """Bad argument values; maps to exit code 2."""


def _int_list(text: str) -> tuple[int, ...]:
    """Comma-separated integers; a..b expands to an inclusive range."""
    values: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if ".." in part:
                lo, hi = part.split("..", 1)
                values.extend(range(int(lo), int(hi) + 1))
            else:
                values.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers or a..b ranges, got {text!r}"
        )
    return tuple(values)


def _grid_pairs(text: str):
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values or len(values) % 2 != 0:
        raise argparse.ArgumentTypeError("grid must be c,gamma[,c,gamma...] pairs")
    return tuple((values[i], values[i + 1]) for i in range(0, len(values), 2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histotile",
        description="Tile, filter, featurize and classify histopathology corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="summarize a corpus directory")
    p_scan.add_argument("--root", type=Path, required=True)
    p_scan.add_argument(
        "--kind", choices=[dataset.BREAKHIS_LIKE, dataset.CRC_LIKE, dataset.SYNTHETIC],
        default=dataset.BREAKHIS_LIKE,
    )

    p_synth = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument(
        "--layout", choices=[dataset.BREAKHIS_LIKE, dataset.CRC_LIKE],
        default=dataset.BREAKHIS_LIKE,
    )
    p_synth.add_argument("--patients-per-class", type=int, default=4)
    p_synth.add_argument("--images-per-patient", type=int, default=3)
    p_synth.add_argument("--images-per-structure", type=int, default=12)
    p_synth.add_argument("--width", type=int, default=700)
    p_synth.add_argument("--height", type=int, default=460)
    p_synth.add_argument("--mags", type=_int_list, default=(200,))
    p_synth.add_argument("--seed", type=int, default=0)

    p_filter = sub.add_parser("train-filter", help="train a relevance filter")
    p_filter.add_argument("--crc-root", type=Path, required=True)
    p_filter.add_argument("--filter", type=int, required=True)
    p_filter.add_argument("--features", choices=["pftas", "deep"], default="pftas")
    p_filter.add_argument("--deep-csv", type=Path)
    p_filter.add_argument("--pca", type=int)
    p_filter.add_argument("--grid", type=_grid_pairs)
    p_filter.add_argument("--scale-to-available", action="store_true")
    p_filter.add_argument("--seed", type=int, default=0)
    p_filter.add_argument("--out", type=Path, required=True)

    p_extract = sub.add_parser("extract-features", help="export PFTAS patch features to CSV")
    p_extract.add_argument("--root", type=Path, required=True)
    p_extract.add_argument(
        "--kind", choices=[dataset.BREAKHIS_LIKE, dataset.CRC_LIKE, dataset.SYNTHETIC],
        default=dataset.BREAKHIS_LIKE,
    )
    p_extract.add_argument("--mag", type=int)
    p_extract.add_argument("--out", type=Path, required=True)

    p_import = sub.add_parser("import-deep", help="validate a deep-feature CSV")
    p_import.add_argument("--csv", type=Path, required=True)
    p_import.add_argument("--out", type=Path, help="re-export after validation")

    p_run = sub.add_parser("run", help="run the evaluation protocol")
    p_run.add_argument("--config", type=Path, help="key = value config file")
    p_run.add_argument("--corpus-root", type=Path)
    p_run.add_argument(
        "--corpus-kind", choices=[dataset.BREAKHIS_LIKE, dataset.SYNTHETIC]
    )
    p_run.add_argument("--crc-root", type=Path)
    p_run.add_argument("--mags", type=_int_list)
    p_run.add_argument("--filters", type=_int_list)
    p_run.add_argument("--features", choices=["pftas", "deep"], dest="feature_kind")
    p_run.add_argument("--pca", type=int, dest="pca_k")
    p_run.add_argument("--deep-csv", type=Path, dest="deep_features")
    p_run.add_argument("--crc-deep-csv", type=Path, dest="crc_deep_features")
    p_run.add_argument("--grid", type=_grid_pairs)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--fold-file", type=Path)
    p_run.add_argument("--out", type=Path, dest="output_dir")
    p_run.add_argument("--jobs", type=int)
    p_run.add_argument("--scale-filter", action="store_true", default=None)

    p_report = sub.add_parser("report", help="merge run reports into one CSV")
    p_report.add_argument("--runs", type=Path, required=True)
    p_report.add_argument("--out", type=Path)

    return parser


def cmd_scan(args) -> int:
    manifest = dataset.scan_corpus(args.root, args.kind)
    print(f"corpus kind: {manifest.corpus_kind}")
    print(f"images: {len(manifest)}")
    by_label: dict[str, int] = {}
    for e in manifest.entries:
        by_label[e.subtype_label] = by_label.get(e.subtype_label, 0) + 1
    for label in sorted(by_label):
        print(f"  {label}: {by_label[label]}")
    patients = [p for p in manifest.patients if p]
    if patients:
        print(f"patients: {len(patients)}")
    if manifest.magnifications:
        for mag in sorted(manifest.magnifications):
            count = sum(1 for e in manifest.entries if e.magnification == mag)
            print(f"  {mag}x: {count} images")
    return 0


def cmd_synth(args) -> int:
    spec = dataset.SyntheticSpec(
        out_dir=args.out,
        layout=args.layout,
        patients_per_class=args.patients_per_class,
        images_per_patient=args.images_per_patient,
        images_per_structure=args.images_per_structure,
        width=args.width,
        height=args.height,
        magnifications=args.mags,
    )
    manifest = dataset.generate_synthetic_corpus(spec, args.seed)
    print(f"wrote {len(manifest)} images under {args.out}")
    return 0


def cmd_train_filter(args) -> int:
    if not 1 <= args.filter <= 7:
        raise UsageError(f"--filter must be 1..7, got {args.filter}")
    if args.features == "deep" and args.deep_csv is None:
        raise UsageError("--features deep requires --deep-csv")
    manifest = dataset.scan_corpus(args.crc_root, dataset.CRC_LIKE)
    spec = filterbank.build_filter_spec(args.filter)
    if args.scale_to_available:
        per_structure = min(
            sum(1 for e in manifest.entries if e.subtype_label == s)
            for s in dataset.STRUCTURES
        )
        spec = filterbank.scale_filter_spec(spec, per_structure)
    deep = features.import_deep_features(args.deep_csv) if args.deep_csv else None
    grid = [clf.KernelParams(c, g) for c, g in args.grid] if args.grid else None
    kind = "pftas-162"
    if args.features == "deep":
        kind = "deep-2048" if args.pca is None else f"deep-pca-{args.pca}"
    model = filterbank.train_relevance_model(
        manifest, spec, feature_kind=kind, seed=args.seed,
        grid=grid, deep_features=deep, pca_k=args.pca,
    )
    filterbank.save_relevance_model(model, args.out)
    print(f"filter {args.filter}: validation accuracy {model.validation_accuracy:.4f}")
    print(f"model written to {args.out}")
    return 0


def cmd_extract_features(args) -> int:
    manifest = dataset.scan_corpus(args.root, args.kind)
    if args.mag is not None:
        manifest = manifest.at_magnification(args.mag)
        if len(manifest) == 0:
            raise UsageError(f"no images at magnification {args.mag}")
    deep = None
    patches, values = evaluation.patches_and_features(manifest.entries, deep)
    matrix = features.FeatureMatrix(
        values, features.PFTAS_KIND, [p.provenance for p in patches]
    )
    features.export_features_csv(matrix, args.out)
    print(f"wrote {len(matrix)} rows x {matrix.column_count} to {args.out}")
    return 0


def cmd_import_deep(args) -> int:
    matrix = features.import_deep_features(args.csv)
    print(f"valid: {len(matrix)} rows x {matrix.column_count}")
    if args.out:
        features.export_features_csv(matrix, args.out)
        print(f"re-exported to {args.out}")
    return 0


def _run_config_from_args(args) -> RunConfig:
    if args.config is not None:
        config = config_from_mapping(parse_config_file(args.config))
    else:
        if args.corpus_root is None:
            raise UsageError("run requires --config or --corpus-root")
        config = RunConfig(corpus_root=args.corpus_root).validate()
    return override(
        config,
        corpus_root=args.corpus_root,
        corpus_kind=args.corpus_kind,
        crc_root=args.crc_root,
        magnifications=args.mags,
        filters=args.filters,
        feature_kind=args.feature_kind,
        pca_k=args.pca_k,
        deep_features=args.deep_features,
        crc_deep_features=args.crc_deep_features,
        grid=args.grid,
        seed=args.seed,
        fold_file=args.fold_file,
        output_dir=args.output_dir,
        jobs=args.jobs,
        filter_scale_to_available=args.scale_filter,
    )


def cmd_run(args) -> int:
    config = _run_config_from_args(args)
    manifest = dataset.scan_corpus(config.corpus_root, config.corpus_kind)
    crc_manifest = None
    if any(f > 0 for f in config.filters):
        crc_manifest = dataset.scan_corpus(config.crc_root, config.crc_kind)
    relevance_models = {
        f: evaluation.build_relevance_model(config, f, crc_manifest)
        for f in config.filters
        if f > 0
    }

    cells = [(mag, f) for mag in config.magnifications for f in config.filters]

    def execute(cell):
        mag, filter_index = cell
        report = evaluation.run_experiment(
            config,
            mag,
            filter_index,
            manifest=manifest,
            relevance_model=relevance_models.get(filter_index),
            crc_manifest=crc_manifest,
        )
        return evaluation.write_report(report, config.output_dir)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            written = list(pool.map(execute, cells))
    else:
        written = [execute(cell) for cell in cells]
    for json_path, _ in written:
        print(f"report: {json_path}")
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise UsageError(f"{runs_dir} is not a directory")
    import json as jsonlib

    rows = []
    for path in sorted(runs_dir.glob("run-*.json")):
        payload = jsonlib.loads(path.read_text(encoding="utf-8"))
        mag = payload["magnification"]
        for level, rule_key in (
            ("patch", ("patch", "none")),
            ("image", ("image_sum", "sum")),
            ("image", ("image_vote", "vote")),
            ("patient", ("patient_sum", "sum")),
            ("patient", ("patient_vote", "vote")),
        ):
            metric, rule = rule_key
            if metric in payload["mean"]:
                rows.append(
                    (
                        "" if mag is None else str(mag),
                        payload["filter"],
                        payload["feature_kind"],
                        level,
                        rule,
                        payload["mean"][metric],
                        payload["std"][metric],
                    )
                )
    if not rows:
        raise UsageError(f"no run-*.json reports in {runs_dir}")
    lines = ["magnification,filter,features,level,rule,mean,std"]
    for mag, filt, kind, level, rule, mean, std in rows:
        lines.append(f"{mag},{filt},{kind},{level},{rule},{mean:.1f},{std:.1f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


_COMMANDS = {
    "scan": cmd_scan,
    "synth": cmd_synth,
    "train-filter": cmd_train_filter,
    "extract-features": cmd_extract_features,
    "import-deep": cmd_import_deep,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, dataset.CorpusLayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # runtime failure contract
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
