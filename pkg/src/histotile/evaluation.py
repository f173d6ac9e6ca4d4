"""Patient-wise evaluation: per-fold training, aggregation, accuracy reports."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import classifier as clf
from .config import RunConfig, subseed
from .dataset import (
    BENIGN,
    MALIGN,
    CorpusManifest,
    FoldAssignment,
    ImageEntry,
    load_raster,
    make_folds,
    scan_corpus,
)
from .features import (
    FeatureMatrix,
    cached_image_pftas,
    fit_pca,
    import_deep_features,
    transform_pca,
)
from .filterbank import (
    RelevanceModel,
    RetentionStats,
    all_patients_survive,
    build_filter_spec,
    classify_patches,
    retention_report_csv,
    retention_stats,
    scale_filter_spec,
    train_relevance_model,
)
from .imaging import PatchRecord, tessellate

LABEL_TO_SIGN = {BENIGN: -1.0, MALIGN: 1.0}

SUM_RULE = "sum"
VOTE_RULE = "vote"

METRICS = ("patch", "image_sum", "image_vote", "patient_sum", "patient_vote")


@dataclass(frozen=True)
class PatchPrediction:
    provenance: tuple[str, str, tuple[int, int]]
    probability_malign: float
    true_label: str

    @property
    def hard_label(self) -> str:
        return MALIGN if self.probability_malign >= 0.5 else BENIGN

    @property
    def patient_id(self) -> str:
        return self.provenance[0]

    @property
    def image_id(self) -> str:
        return self.provenance[1]


@dataclass(frozen=True)
class ImageDecision:
    image_id: str
    patient_id: str
    rule: str
    predicted: str
    true: str
    n_patches_used: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.true


def aggregate_image(preds: Sequence[PatchPrediction], rule: str) -> ImageDecision:
    """Combine one image's patch predictions into an image decision.

    Sum averages the probabilities; vote takes the majority of hard labels
    and falls back to the sum rule on ties.
    """
    if not preds:
        raise ValueError("aggregate_image needs at least one prediction")
    image_ids = {p.image_id for p in preds}
    if len(image_ids) != 1:
        raise ValueError(f"predictions span multiple images: {sorted(image_ids)}")
    if rule not in (SUM_RULE, VOTE_RULE):
        raise ValueError(f"unknown aggregation rule {rule!r}")
    mean_prob = float(np.mean([p.probability_malign for p in preds]))
    if rule == VOTE_RULE:
        malign_votes = sum(1 for p in preds if p.hard_label == MALIGN)
        benign_votes = len(preds) - malign_votes
        if malign_votes != benign_votes:
            predicted = MALIGN if malign_votes > benign_votes else BENIGN
        else:
            predicted = MALIGN if mean_prob >= 0.5 else BENIGN
    else:
        predicted = MALIGN if mean_prob >= 0.5 else BENIGN
    return ImageDecision(
        image_id=preds[0].image_id,
        patient_id=preds[0].patient_id,
        rule=rule,
        predicted=predicted,
        true=preds[0].true_label,
        n_patches_used=len(preds),
    )


def patient_score(decisions: Sequence[ImageDecision]) -> float:
    """Fraction of one patient's images classified correctly."""
    if not decisions:
        raise ValueError("patient_score needs at least one image decision")
    return sum(d.correct for d in decisions) / len(decisions)


def overall_accuracy(scores: Sequence[float]) -> float:
    """Unweighted mean of patient scores, as a percentage."""
    if not scores:
        raise ValueError("overall_accuracy needs at least one patient score")
    return 100.0 * float(np.mean(list(scores)))


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    fold_index: int
    best_params: clf.KernelParams
    metrics: dict[str, float]
    model: clf.TrainedClassifier


@dataclass
class RunReport:
    magnification: Optional[int]
    filter_index: int
    feature_kind: str
    pca_k: Optional[int]
    flagged: bool
    flagged_reason: str
    per_fold: dict[str, list[float]]
    mean: dict[str, float]
    std: dict[str, float]
    retention: Optional[RetentionStats] = None
    best_params: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        payload = {
            "magnification": self.magnification,
            "filter": self.filter_index,
            "feature_kind": self.feature_kind,
            "pca_k": self.pca_k,
            "flagged": self.flagged,
            "flagged_reason": self.flagged_reason,
            "per_fold": self.per_fold,
            "mean": self.mean,
            "std": self.std,
            "best_params": self.best_params,
            "retention": None,
        }
        if self.retention is not None:
            payload["retention"] = {
                "pct_patches": self.retention.pct_patches,
                "pct_images": self.retention.pct_images,
                "pct_patients": self.retention.pct_patients,
                "pct_patients_fractional": self.retention.pct_patients_fractional,
                "excluded_images": list(self.retention.excluded_images),
                "excluded_patients": list(self.retention.excluded_patients),
            }
        return payload


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    # Sample standard deviation over folds (n-1 denominator).
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


def _cache_dir() -> Optional[Path]:
    env = os.environ.get("HISTOTILE_CACHE")
    return Path(env) if env else None


def patches_and_features(
    entries: Sequence[ImageEntry],
    deep: Optional[FeatureMatrix],
) -> tuple[list[PatchRecord], np.ndarray]:
    """Tessellate every image and attach one feature row per patch."""
    cache = _cache_dir()
    patches: list[PatchRecord] = []
    blocks: list[np.ndarray] = []
    deep_lookup = None
    if deep is not None:
        deep_lookup = {p: i for i, p in enumerate(deep.provenance)}
    for entry in entries:
        raster = load_raster(entry.path)
        tiles = tessellate(
            raster,
            source_image_id=entry.image_id,
            patient_id=entry.patient_id,
            magnification=entry.magnification,
            binary_label=entry.binary_label,
        )
        patches.extend(tiles)
        if deep_lookup is None:
            blocks.append(cached_image_pftas(entry.path, tiles, cache))
        else:
            rows = []
            for tile in tiles:
                key = (tile.patient_id, tile.source_image_id, tile.grid_pos)
                idx = deep_lookup.get(key)
                if idx is None:
                    raise ValueError(f"no deep features for patch {key}")
                rows.append(deep.values[idx])
            blocks.append(np.stack(rows))
    features = np.concatenate(blocks) if blocks else np.zeros((0, 0))
    return patches, features


def _grid_from_config(config: RunConfig) -> Optional[list[clf.KernelParams]]:
    if config.grid is None:
        return None
    return [clf.KernelParams(c, gamma) for c, gamma in config.grid]


def build_relevance_model(
    config: RunConfig,
    filter_index: int,
    crc_manifest: Optional[CorpusManifest] = None,
) -> RelevanceModel:
    """Train the configured filter from the structure corpus (fold-independent)."""
    if crc_manifest is None:
        crc_manifest = scan_corpus(config.crc_root, config.crc_kind)
    spec = build_filter_spec(filter_index)
    if config.filter_scale_to_available:
        per_structure = min(
            sum(1 for e in crc_manifest.entries if e.subtype_label == s)
            for s in spec.relevant_counts | spec.irrelevant_counts
        )
        spec = scale_filter_spec(spec, per_structure)
    deep = None
    pca_k = None
    feature_kind = "pftas-162"
    if config.feature_kind == "deep":
        deep = import_deep_features(config.crc_deep_features)
        pca_k = config.pca_k
        feature_kind = "deep-2048" if pca_k is None else f"deep-pca-{pca_k}"
    return train_relevance_model(
        crc_manifest,
        spec,
        feature_kind=feature_kind,
        seed=subseed(config.seed, f"filter{filter_index}"),
        grid=_grid_from_config(config),
        deep_features=deep,
        pca_k=pca_k,
    )


def run_single_fold(
    fold: FoldAssignment,
    patches: Sequence[PatchRecord],
    features: np.ndarray,
    config: RunConfig,
) -> FoldOutcome:
    """Train on the fold's training patients and score its test patients."""
    train_idx = [i for i, p in enumerate(patches) if p.patient_id in fold.train_patients]
    test_idx = [i for i, p in enumerate(patches) if p.patient_id in fold.test_patients]
    if not train_idx or not test_idx:
        raise ValueError(f"fold {fold.fold_index} has an empty side after filtering")

    x_train = features[train_idx]
    y_train = np.array([LABEL_TO_SIGN[patches[i].binary_label] for i in train_idx])
    x_test = features[test_idx]

    if config.pca_k is not None:
        pca = fit_pca(x_train, config.pca_k)
        x_train = transform_pca(pca, x_train)
        x_test = transform_pca(pca, x_test)

    fold_seed = subseed(config.seed, f"fold{fold.fold_index}")
    search = clf.grid_search(
        x_train, y_train, grid=_grid_from_config(config), seed=fold_seed
    )
    model = clf.train(
        x_train, y_train, search.best, seed=fold_seed, strict=False
    )

    probs = np.atleast_1d(clf.predict_proba(model, x_test))
    predictions = [
        PatchPrediction(
            provenance=patches[i].provenance,
            probability_malign=float(prob),
            true_label=patches[i].binary_label,
        )
        for i, prob in zip(test_idx, probs)
    ]
    metrics = score_predictions(predictions)
    return FoldOutcome(
        fold_index=fold.fold_index, best_params=search.best, metrics=metrics, model=model
    )


def score_predictions(predictions: Sequence[PatchPrediction]) -> dict[str, float]:
    """Patch, image and patient accuracies (both rules) for one fold's test side."""
    if not predictions:
        raise ValueError("no test predictions to score")
    patch_acc = 100.0 * float(
        np.mean([p.hard_label == p.true_label for p in predictions])
    )
    by_image: dict[str, list[PatchPrediction]] = {}
    for p in predictions:
        by_image.setdefault(p.image_id, []).append(p)
    metrics = {"patch": patch_acc}
    for rule, image_key, patient_key in (
        (SUM_RULE, "image_sum", "patient_sum"),
        (VOTE_RULE, "image_vote", "patient_vote"),
    ):
        decisions = [aggregate_image(preds, rule) for preds in by_image.values()]
        metrics[image_key] = 100.0 * float(np.mean([d.correct for d in decisions]))
        by_patient: dict[str, list[ImageDecision]] = {}
        for d in decisions:
            by_patient.setdefault(d.patient_id, []).append(d)
        scores = [patient_score(ds) for ds in by_patient.values()]
        metrics[patient_key] = overall_accuracy(scores)
    return metrics


def run_experiment(
    config: RunConfig,
    magnification: Optional[int],
    filter_index: int,
    manifest: Optional[CorpusManifest] = None,
    relevance_model: Optional[RelevanceModel] = None,
    crc_manifest: Optional[CorpusManifest] = None,
) -> RunReport:
    """Execute the five-fold protocol for one (magnification, filter) cell."""
    config = config.validate()
    if manifest is None:
        manifest = scan_corpus(config.corpus_root, config.corpus_kind)
    working = manifest if magnification is None else manifest.at_magnification(magnification)
    if len(working) == 0:
        raise ValueError(f"no images at magnification {magnification}")

    deep = None
    if config.feature_kind == "deep":
        deep = import_deep_features(config.deep_features)
    patches, features = patches_and_features(working.entries, deep)

    retention: Optional[RetentionStats] = None
    if filter_index > 0:
        if relevance_model is None:
            relevance_model = build_relevance_model(config, filter_index, crc_manifest)
        relevant = classify_patches(relevance_model, patches, features)
        stats_list = retention_stats(patches, relevant, filter_index)
        retention = stats_list[0] if len(stats_list) == 1 else None
        if not all(all_patients_survive(s) for s in stats_list):
            excluded = sorted({p for s in stats_list for p in s.excluded_patients})
            return RunReport(
                magnification=magnification,
                filter_index=filter_index,
                feature_kind=config.feature_kind,
                pca_k=config.pca_k,
                flagged=True,
                flagged_reason=f"patients fully excluded by filter: {excluded}",
                per_fold={},
                mean={},
                std={},
                retention=retention,
            )
        patches = [p for p, keep in zip(patches, relevant) if keep]
        features = features[relevant]

    folds = make_folds(working, config.fold_file, subseed(config.seed, "folds"))
    per_fold: dict[str, list[float]] = {m: [] for m in METRICS}
    best_params: list[tuple[float, float]] = []
    for fold in folds:
        outcome = run_single_fold(fold, patches, features, config)
        for metric in METRICS:
            per_fold[metric].append(outcome.metrics[metric])
        best_params.append((outcome.best_params.c, outcome.best_params.gamma))

    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    for metric in METRICS:
        mean[metric], std[metric] = _mean_std(per_fold[metric])
    return RunReport(
        magnification=magnification,
        filter_index=filter_index,
        feature_kind=config.feature_kind,
        pca_k=config.pca_k,
        flagged=False,
        flagged_reason="",
        per_fold=per_fold,
        mean=mean,
        std=std,
        retention=retention,
        best_params=best_params,
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def report_basename(report: RunReport) -> str:
    mag = "all" if report.magnification is None else str(report.magnification)
    suffix = f"-pca{report.pca_k}" if report.pca_k else ""
    return f"run-mag{mag}-filter{report.filter_index}-{report.feature_kind}{suffix}"


def report_rows(report: RunReport) -> list[tuple[str, str, str, float, float]]:
    """(magnification, level, rule, mean, std) rows mirroring the result tables."""
    mag = "" if report.magnification is None else str(report.magnification)
    rows = []
    layout = (
        ("patch", "patch", "none"),
        ("image_sum", "image", "sum"),
        ("image_vote", "image", "vote"),
        ("patient_sum", "patient", "sum"),
        ("patient_vote", "patient", "vote"),
    )
    for metric, level, rule in layout:
        if metric in report.mean:
            rows.append((mag, level, rule, report.mean[metric], report.std[metric]))
    return rows


def write_report(report: RunReport, out_dir: Path) -> tuple[Path, Path]:
    """Emit the JSON report and its flat CSV mirror; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = report_basename(report)
    json_path = out_dir / f"{base}.json"
    csv_path = out_dir / f"{base}.csv"
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    lines = ["magnification,level,rule,mean,std"]
    for mag, level, rule, mean, std in report_rows(report):
        lines.append(f"{mag},{level},{rule},{mean:.1f},{std:.1f}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if report.retention is not None:
        retention_report_csv([report.retention], out_dir / f"{base}-retention.csv")
    return json_path, csv_path
