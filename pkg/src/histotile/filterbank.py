"""Relevance filters built from an eight-structure tile corpus.

A filter splits the structure list at an index: everything before it is
relevant, everything after irrelevant. The larger side is subsampled so the
two classes stay balanced (counts per structure: 625/89, 625/208, 625/375,
625/625, then mirrored). A binary classifier trained on that relabeling then
screens patches of the target corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import classifier as clf
from .config import spawn_rng, subseed
from .dataset import STRUCTURES, CorpusManifest, ImageEntry, load_raster, subsample_entries
from .features import FeatureMatrix, PcaModel, fit_pca, pftas, transform_pca
from .imaging import PatchRecord, round_half_up

RELEVANT = 1.0
IRRELEVANT = -1.0

# Per-structure counts by filter index; the larger side is subsampled to
# match the smaller side's total of 625 * min(i, 8-i) images.
_COUNTS_BY_INDEX = {
    1: (625, 89),
    2: (625, 208),
    3: (625, 375),
    4: (625, 625),
    5: (375, 625),
    6: (208, 625),
    7: (89, 625),
}


@dataclass(frozen=True)
class FilterSpec:
    index: int
    relevant_counts: dict[str, int]
    irrelevant_counts: dict[str, int]

    @property
    def total_relevant(self) -> int:
        return sum(self.relevant_counts.values())

    @property
    def total_irrelevant(self) -> int:
        return sum(self.irrelevant_counts.values())


def build_filter_spec(index: int) -> FilterSpec:
    """Relabeling of the eight structures into relevant/irrelevant classes."""
    if index not in _COUNTS_BY_INDEX:
        raise ValueError(f"filter index {index} outside 1..7")
    rel_count, irr_count = _COUNTS_BY_INDEX[index]
    return FilterSpec(
        index=index,
        relevant_counts={s: rel_count for s in STRUCTURES[:index]},
        irrelevant_counts={s: irr_count for s in STRUCTURES[index:]},
    )


def scale_filter_spec(spec: FilterSpec, available: int) -> FilterSpec:
    """Shrink a filter spec proportionally for corpora with fewer tiles.

    Counts scale by available/625 (rounded half up, floor 1) so class balance
    is preserved at desk scale.
    """
    if available < 1:
        raise ValueError("available images per structure must be positive")
    factor = available / 625.0

    def scaled(counts: dict[str, int]) -> dict[str, int]:
        return {s: max(1, round_half_up(n * factor)) for s, n in counts.items()}

    return FilterSpec(
        index=spec.index,
        relevant_counts=scaled(spec.relevant_counts),
        irrelevant_counts=scaled(spec.irrelevant_counts),
    )


@dataclass(frozen=True)
class RelevanceModel:
    filter_spec: FilterSpec
    model: clf.TrainedClassifier
    validation_accuracy: float
    feature_kind: str
    pca: Optional[PcaModel] = None


def constant_relevance_model(n_features: int, relevant: bool = True) -> RelevanceModel:
    """A degenerate filter with a fixed verdict; the keep-everything variant
    doubles as an identity oracle for the filtering code path."""
    model = clf.TrainedClassifier(
        support_vectors=np.zeros((0, n_features)),
        dual_coefs=np.zeros(0),
        bias=1.0 if relevant else -1.0,
        params=clf.KernelParams(1.0, 1.0),
        standardizer=clf.Standardizer(mean=np.zeros(n_features), std=np.ones(n_features)),
        calibration=(1.0, 0.0),
    )
    spec = build_filter_spec(7)
    return RelevanceModel(
        filter_spec=spec, model=model, validation_accuracy=1.0, feature_kind="pftas-162"
    )


def _entry_features(
    entries: Sequence[ImageEntry], deep: Optional[FeatureMatrix]
) -> np.ndarray:
    if deep is None:
        return np.stack([pftas(load_raster(e.path)).values for e in entries])
    # Whole-image instances: exactly one feature row per image expected.
    lookup: dict[tuple[str, str], int] = {}
    for i, p in enumerate(deep.provenance):
        key = (p[0], p[1])
        if key in lookup:
            raise ValueError(f"multiple feature rows for image {p[1]!r}; one per image expected")
        lookup[key] = i
    rows = []
    for e in entries:
        i = lookup.get((e.patient_id, e.image_id))
        if i is None:
            raise ValueError(f"no deep features for image {e.image_id!r}")
        rows.append(deep.values[i])
    return np.stack(rows)


def _stratified_split(
    labels: np.ndarray, holdout_fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        order = members[rng.permutation(len(members))]
        n_val = round_half_up(holdout_fraction * len(members))
        val_idx.extend(order[:n_val].tolist())
        train_idx.extend(order[n_val:].tolist())
    return np.array(sorted(train_idx), dtype=np.intp), np.array(sorted(val_idx), dtype=np.intp)


def train_relevance_model(
    crc: CorpusManifest,
    spec: FilterSpec,
    feature_kind: str = "pftas-162",
    seed: int = 0,
    grid: Optional[Sequence[clf.KernelParams]] = None,
    deep_features: Optional[FeatureMatrix] = None,
    pca_k: Optional[int] = None,
) -> RelevanceModel:
    """Subsample the structure corpus per the filter spec, then fit its classifier.

    85% of the relabeled tiles train the model (hyperparameters from a 5-fold
    grid search), the held-out 15% report validation accuracy. The split is
    random but stratified, and reproducible from the seed.
    """
    by_structure: dict[str, list[ImageEntry]] = {s: [] for s in STRUCTURES}
    for e in crc.entries:
        if e.subtype_label in by_structure:
            by_structure[e.subtype_label].append(e)

    chosen: list[ImageEntry] = []
    labels: list[float] = []
    for side, counts in (
        (RELEVANT, spec.relevant_counts),
        (IRRELEVANT, spec.irrelevant_counts),
    ):
        for structure, count in counts.items():
            pool = by_structure[structure]
            if len(pool) < count:
                raise ValueError(
                    f"structure {structure!r} has {len(pool)} images; filter {spec.index} needs {count}"
                )
            sub = subsample_entries(pool, count, seed, f"filter{spec.index}:{structure}")
            chosen.extend(sub)
            labels.extend([side] * count)

    x = _entry_features(chosen, deep_features)
    y = np.array(labels)

    rng = spawn_rng(seed, f"filter{spec.index}:split")
    train_idx, val_idx = _stratified_split(y, 0.15, rng)

    pca_model = None
    x_train, x_val = x[train_idx], x[val_idx]
    if pca_k is not None:
        pca_model = fit_pca(x_train, pca_k)
        x_train = transform_pca(pca_model, x_train)
        x_val = transform_pca(pca_model, x_val)

    search = clf.grid_search(
        x_train, y[train_idx], grid=grid, seed=subseed(seed, f"filter{spec.index}:grid")
    )
    model = clf.train(
        x_train,
        y[train_idx],
        search.best,
        seed=subseed(seed, f"filter{spec.index}:train"),
        strict=False,
    )
    predictions = clf.predict_labels(model, x_val)
    accuracy = float(np.mean(predictions == y[val_idx]))
    return RelevanceModel(
        filter_spec=spec,
        model=model,
        validation_accuracy=accuracy,
        feature_kind=feature_kind,
        pca=pca_model,
    )


# ---------------------------------------------------------------------------
# Applying a filter and accounting for what survives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetentionStats:
    magnification: Optional[int]
    filter_index: int
    pct_patches: float
    pct_images: float
    pct_patients: float  # patients keeping at least one image
    pct_patients_fractional: float  # mean per-patient fraction of images kept
    excluded_images: tuple[str, ...]
    excluded_patients: tuple[str, ...]

    @property
    def flagged(self) -> bool:
        return bool(self.excluded_patients)


def classify_patches(
    model: RelevanceModel,
    patches: Sequence[PatchRecord],
    features: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Boolean relevance per patch; features default to PFTAS of the pixels."""
    if len(patches) == 0:
        return np.zeros(0, dtype=bool)
    if features is None:
        features = np.stack([pftas(p.pixels).values for p in patches])
    if features.shape[0] != len(patches):
        raise ValueError("one feature row per patch required")
    if model.pca is not None:
        features = transform_pca(model.pca, features)
    return np.asarray(clf.decision_values(model.model, features)) >= 0


def _retention_for_group(
    patches: Sequence[PatchRecord], relevant: np.ndarray, magnification, filter_index: int
) -> RetentionStats:
    patch_total = len(patches)
    patch_kept = int(relevant.sum())
    images: dict[str, list[bool]] = {}
    image_patient: dict[str, str] = {}
    for p, keep in zip(patches, relevant):
        images.setdefault(p.source_image_id, []).append(bool(keep))
        image_patient[p.source_image_id] = p.patient_id
    image_kept = {img: any(keeps) for img, keeps in images.items()}
    patients: dict[str, list[bool]] = {}
    for img, kept in image_kept.items():
        patients.setdefault(image_patient[img], []).append(kept)
    patient_kept = {pat: any(keeps) for pat, keeps in patients.items()}
    fractional = [sum(keeps) / len(keeps) for keeps in patients.values()]
    return RetentionStats(
        magnification=magnification,
        filter_index=filter_index,
        pct_patches=100.0 * patch_kept / patch_total,
        pct_images=100.0 * sum(image_kept.values()) / len(image_kept),
        pct_patients=100.0 * sum(patient_kept.values()) / len(patient_kept),
        pct_patients_fractional=100.0 * float(np.mean(fractional)),
        excluded_images=tuple(sorted(img for img, kept in image_kept.items() if not kept)),
        excluded_patients=tuple(sorted(pat for pat, kept in patient_kept.items() if not kept)),
    )


def retention_stats(
    patches: Sequence[PatchRecord], relevant: np.ndarray, filter_index: int
) -> list[RetentionStats]:
    """Per-magnification accounting of what a relevance mask keeps."""
    mags = sorted({p.magnification for p in patches}, key=lambda m: (m is None, m))
    stats = []
    for mag in mags:
        group_idx = np.array([i for i, p in enumerate(patches) if p.magnification == mag])
        stats.append(
            _retention_for_group(
                [patches[i] for i in group_idx], relevant[group_idx], mag, filter_index
            )
        )
    return stats


def apply_filter(
    model: RelevanceModel,
    patches: Sequence[PatchRecord],
    features: Optional[np.ndarray] = None,
) -> tuple[list[PatchRecord], list[RetentionStats]]:
    """Keep the patches the filter calls relevant; account per magnification."""
    if not patches:
        raise ValueError("apply_filter needs at least one patch")
    relevant = classify_patches(model, patches, features)
    retained = [p for p, keep in zip(patches, relevant) if keep]
    return retained, retention_stats(patches, relevant, model.filter_spec.index)


def all_patients_survive(stats: RetentionStats) -> bool:
    """False flags the run: some patient lost every image to the filter."""
    return not stats.excluded_patients


def retention_report_csv(stats_list: Sequence[RetentionStats], path: Path) -> None:
    lines = ["magnification,filter,pct_patches,pct_images,pct_patients,flagged"]
    for s in stats_list:
        mag = "" if s.magnification is None else str(s.magnification)
        lines.append(
            f"{mag},{s.filter_index},{s.pct_patches:.1f},{s.pct_images:.1f},"
            f"{s.pct_patients:.1f},{str(s.flagged).lower()}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def relevance_model_to_dict(model: RelevanceModel) -> dict:
    payload = {
        "format": "histotile-relevance",
        "version": 1,
        "filter": {
            "index": model.filter_spec.index,
            "relevant_counts": model.filter_spec.relevant_counts,
            "irrelevant_counts": model.filter_spec.irrelevant_counts,
        },
        "validation_accuracy": model.validation_accuracy,
        "feature_kind": model.feature_kind,
        "classifier": clf.model_to_dict(model.model),
        "pca": None,
    }
    if model.pca is not None:
        payload["pca"] = {
            "mean": model.pca.mean.tolist(),
            "components": model.pca.components.tolist(),
            "eigenvalues": model.pca.eigenvalues.tolist(),
            "total_variance": model.pca.total_variance,
            "k": model.pca.k,
        }
    return payload


def relevance_model_from_dict(payload: dict) -> RelevanceModel:
    if payload.get("format") != "histotile-relevance":
        raise ValueError("not a relevance model payload")
    spec = FilterSpec(
        index=payload["filter"]["index"],
        relevant_counts={k: int(v) for k, v in payload["filter"]["relevant_counts"].items()},
        irrelevant_counts={k: int(v) for k, v in payload["filter"]["irrelevant_counts"].items()},
    )
    pca = None
    if payload.get("pca"):
        p = payload["pca"]
        pca = PcaModel(
            mean=np.array(p["mean"], dtype=np.float64),
            components=np.array(p["components"], dtype=np.float64),
            eigenvalues=np.array(p["eigenvalues"], dtype=np.float64),
            total_variance=float(p["total_variance"]),
            k=int(p["k"]),
        )
    return RelevanceModel(
        filter_spec=spec,
        model=clf.model_from_dict(payload["classifier"]),
        validation_accuracy=float(payload["validation_accuracy"]),
        feature_kind=payload["feature_kind"],
        pca=pca,
    )


def save_relevance_model(model: RelevanceModel, path: Path) -> None:
    Path(path).write_text(json.dumps(relevance_model_to_dict(model)), encoding="utf-8")


def load_relevance_model(path: Path) -> RelevanceModel:
    return relevance_model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
