"""Texture features, deep-feature ingestion, and PCA reduction."""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .imaging import BinaryMask, Raster, binarize, otsu_threshold, round_half_up

PFTAS_KIND = "pftas-162"
DEEP_KIND = "deep-2048"
PFTAS_DIM = 162
DEEP_DIM = 2048
PFTAS_VERSION = "pftas-1"

Provenance = tuple[str, str, tuple[int, int]]


class FeatureFormatError(ValueError):
    """A feature file violates the CSV contract."""


def pca_kind(k: int) -> str:
    return f"deep-pca-{k}"


def kind_width(kind: str) -> int:
    if kind == PFTAS_KIND:
        return PFTAS_DIM
    if kind == DEEP_KIND:
        return DEEP_DIM
    if kind.startswith("deep-pca-"):
        return int(kind.rsplit("-", 1)[1])
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    kind: str
    provenance: Provenance = ("", "", (0, 0))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("feature vector must be 1-D")
        if v.shape[0] != kind_width(self.kind):
            raise ValueError(
                f"kind {self.kind} expects {kind_width(self.kind)} values, got {v.shape[0]}"
            )
        object.__setattr__(self, "values", v)


@dataclass
class FeatureMatrix:
    """Row-per-instance features of a uniform kind, with provenance keys."""

    values: np.ndarray
    kind: str
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if v.shape[1] != kind_width(self.kind):
            raise ValueError(
                f"kind {self.kind} expects width {kind_width(self.kind)}, got {v.shape[1]}"
            )
        if len(self.provenance) != v.shape[0]:
            raise ValueError("one provenance key per row required")
        if len(set(self.provenance)) != len(self.provenance):
            raise ValueError("duplicate provenance keys in feature matrix")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def column_count(self) -> int:
        return self.values.shape[1]

    def row(self, i: int) -> FeatureVector:
        return FeatureVector(self.values[i], self.kind, self.provenance[i])


def tas_histogram(mask: BinaryMask) -> np.ndarray:
    """9-bin distribution of set-neighbor counts over the mask's set pixels.

    Bin b holds the fraction of set pixels with exactly b set 8-neighbors;
    neighbors outside the mask bounds count as unset. An all-clear mask maps
    to all zeros so downstream vectors stay finite.
    """
    bits = mask.bits
    if bits.size == 0:
        raise ValueError("tas_histogram needs a nonempty mask")
    total = int(bits.sum())
    if total == 0:
        return np.zeros(9, dtype=np.float64)
    padded = np.pad(bits, 1).astype(np.uint8)
    neighbors = (
        padded[:-2, :-2] + padded[:-2, 1:-1] + padded[:-2, 2:]
        + padded[1:-1, :-2] + padded[1:-1, 2:]
        + padded[2:, :-2] + padded[2:, 1:-1] + padded[2:, 2:]
    )
    hist = np.bincount(neighbors[bits], minlength=9).astype(np.float64)
    return hist / total


def _channel_tas_groups(channel: np.ndarray) -> list[np.ndarray]:
    t = otsu_threshold(channel)
    above = channel[channel > t]
    if above.size:
        mu = float(above.mean())
        sigma = float(above.std())  # population, not sample
    else:
        mu = 0.0
        sigma = 0.0
    ranges = [(mu - sigma, mu + sigma), (mu - sigma, 255.0), (mu + sigma, 255.0)]
    groups = []
    for lo_f, hi_f in ranges:
        lo = min(255, max(0, round_half_up(lo_f)))
        hi = min(255, max(0, round_half_up(hi_f)))
        mask = binarize(channel, lo, hi)
        groups.append(tas_histogram(mask))
        groups.append(tas_histogram(mask.complement()))
    return groups


def pftas(img: Raster, provenance: Provenance = ("", "", (0, 0))) -> FeatureVector:
    """162-value texture descriptor of an RGB raster.

    Per channel, in R,G,B order: take the Otsu threshold, the mean and the
    population standard deviation of the above-threshold pixels, then binarize
    at [mu-s, mu+s], [mu-s, 255] and [mu+s, 255] (bounds rounded half up, then
    clamped to [0, 255]). Each mask contributes its 9-bin neighbor histogram
    followed by its complement's, giving 54 values per channel.
    """
    if img.channels != 3:
        raise ValueError("pftas expects a 3-channel raster")
    groups: list[np.ndarray] = []
    for c in range(3):
        groups.extend(_channel_tas_groups(img.channel(c)))
    return FeatureVector(np.concatenate(groups), PFTAS_KIND, provenance)


def pftas_matrix(patches: Sequence) -> FeatureMatrix:
    """PFTAS rows for a batch of PatchRecords, in input order."""
    rows = [pftas(p.pixels, p.provenance) for p in patches]
    values = np.stack([r.values for r in rows]) if rows else np.zeros((0, PFTAS_DIM))
    return FeatureMatrix(values, PFTAS_KIND, [r.provenance for r in rows])


def cached_image_pftas(
    image_path: Path, patches: Sequence, cache_dir: Optional[Path]
) -> np.ndarray:
    """PFTAS rows for one image's patches, memoized on disk when a cache is set.

    Cache entries are keyed by the image file's content hash plus the extractor
    version, so edits to the file or the algorithm invalidate them.
    """
    if cache_dir is None:
        return np.stack([pftas(p.pixels).values for p in patches])
    digest = hashlib.sha1(Path(image_path).read_bytes()).hexdigest()
    key = f"{digest}-{PFTAS_VERSION}.npy"
    cache_file = Path(cache_dir) / key
    if cache_file.exists():
        values = np.load(cache_file)
        if values.shape == (len(patches), PFTAS_DIM):
            return values
    values = np.stack([pftas(p.pixels).values for p in patches])
    cache_file.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache_file.parent / (cache_file.name + f".tmp{os.getpid()}.npy")
    np.save(tmp, values)
    os.replace(tmp, cache_file)
    return values


# ---------------------------------------------------------------------------
# Feature CSV contract: header patient_id,image_id,col,row,f0,...,f{n-1}
# ---------------------------------------------------------------------------

def export_features_csv(matrix: FeatureMatrix, path: Path) -> None:
    width = matrix.column_count
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "image_id", "col", "row"] + [f"f{i}" for i in range(width)])
        for i in range(len(matrix)):
            patient_id, image_id, (col, row) = matrix.provenance[i]
            writer.writerow(
                [patient_id, image_id, col, row] + [repr(v) for v in matrix.values[i].tolist()]
            )


def import_features_csv(path: Path, expected_width: int, kind: str) -> FeatureMatrix:
    path = Path(path)
    rows: list[np.ndarray] = []
    provenance: list[Provenance] = []
    seen: set[Provenance] = set()
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FeatureFormatError(f"{path}: empty feature file")
        expected_header = ["patient_id", "image_id", "col", "row"] + [
            f"f{i}" for i in range(expected_width)
        ]
        if header != expected_header:
            raise FeatureFormatError(
                f"{path}: header does not match the {expected_width}-wide contract"
            )
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 4 + expected_width:
                raise FeatureFormatError(
                    f"{path}: row {line_no} has {len(record) - 4} values, expected {expected_width}"
                )
            try:
                key: Provenance = (record[0], record[1], (int(record[2]), int(record[3])))
                values = np.array([float(v) for v in record[4:]], dtype=np.float64)
            except ValueError as exc:
                raise FeatureFormatError(f"{path}: row {line_no} unparseable: {exc}") from exc
            if key in seen:
                raise FeatureFormatError(f"{path}: row {line_no} duplicates provenance {key}")
            seen.add(key)
            provenance.append(key)
            rows.append(values)
    if not rows:
        raise FeatureFormatError(f"{path}: no feature rows")
    return FeatureMatrix(np.stack(rows), kind, provenance)


def import_deep_features(path: Path) -> FeatureMatrix:
    """Load externally computed 2048-wide deep features."""
    return import_features_csv(path, DEEP_DIM, DEEP_KIND)


def import_pftas_features(path: Path) -> FeatureMatrix:
    return import_features_csv(path, PFTAS_DIM, PFTAS_KIND)


# ---------------------------------------------------------------------------
# PCA on the training covariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    """Top-k eigenpairs of the mean-centered training covariance."""

    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    eigenvalues: np.ndarray  # (k,), nonincreasing, clamped at 0
    total_variance: float  # sum over all d eigenvalues
    k: int

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros(self.k)
        return self.eigenvalues / self.total_variance


def fit_pca(train, k: int) -> PcaModel:
    """Eigendecompose the training covariance and keep the top-k components.

    Signs follow a fixed convention: the largest-magnitude entry of each
    component is made positive, so refits are reproducible.
    """
    x = train.values if isinstance(train, FeatureMatrix) else np.asarray(train, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("fit_pca expects a 2-D matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError("fit_pca needs at least 2 rows")
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} out of range 1..{min(n - 1, d)}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order[:k]].T.copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        eigenvalues=eigvals[:k].copy(),
        total_variance=float(eigvals.sum()),
        k=k,
    )


def transform_pca(model: PcaModel, x) -> np.ndarray:
    """Project mean-centered input onto the model's components."""
    arr = x.values if isinstance(x, (FeatureVector, FeatureMatrix)) else np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != model.input_dim:
        raise ValueError(f"width {arr.shape[-1]} does not match model input {model.input_dim}")
    return (arr - model.mean) @ model.components.T


def transform_pca_matrix(model: PcaModel, matrix: FeatureMatrix) -> FeatureMatrix:
    values = transform_pca(model, matrix.values)
    return FeatureMatrix(values, pca_kind(model.k), list(matrix.provenance))
