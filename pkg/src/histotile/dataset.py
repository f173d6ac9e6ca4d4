"""Corpus ingestion, patient-wise fold construction, synthetic corpora.

Directory layouts this package reads:
  breakhis-like: root/<benign|malign>/<subtype>/<patient_id>/<mag>/<images>
  crc-like:      root/<structure>/<images>
Magnification directories may be spelled "40", "40x" or "40X". Supported
codecs are PNG and TIFF. Fold files are UTF-8 lines "fold,patient_id,side".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import spawn_rng
from .imaging import Raster, round_half_up

BREAKHIS_LIKE = "breakhis-like"
CRC_LIKE = "crc-like"
SYNTHETIC = "synthetic"

BENIGN = "benign"
MALIGN = "malign"

MAGNIFICATIONS = (40, 100, 200, 400)

BENIGN_SUBTYPES = ("adenosis", "fibroadenoma", "tubular_adenoma", "phyllodes_tumor")
MALIGN_SUBTYPES = (
    "ductal_carcinoma",
    "lobular_carcinoma",
    "mucinous_carcinoma",
    "papillary_carcinoma",
)
SUBTYPE_TO_BINARY = {s: BENIGN for s in BENIGN_SUBTYPES} | {
    s: MALIGN for s in MALIGN_SUBTYPES
}

# Structure order matters: relevance filters split it at an index.
STRUCTURES = (
    "tumor",
    "stroma",
    "complex_stroma",
    "lymphoid",
    "debris",
    "mucosa",
    "adipose",
    "empty",
)
# Directory aliases accepted for crc-like corpora (Kather-style numbering).
_STRUCTURE_ALIASES = {
    "tumor": "tumor",
    "stroma": "stroma",
    "complex_stroma": "complex_stroma",
    "complex": "complex_stroma",
    "lymphoid": "lymphoid",
    "lympho": "lymphoid",
    "debris": "debris",
    "mucosa": "mucosa",
    "adipose": "adipose",
    "empty": "empty",
    "background": "empty",
}

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class CorpusLayoutError(ValueError):
    """The on-disk corpus does not match the documented layout."""


@dataclass(frozen=True)
class ImageEntry:
    path: Path
    patient_id: str
    image_id: str
    subtype_label: str
    magnification: Optional[int] = None
    binary_label: Optional[str] = None


@dataclass(frozen=True)
class CorpusManifest:
    corpus_kind: str
    entries: tuple[ImageEntry, ...]
    magnifications: frozenset[int] = frozenset()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def patients(self) -> tuple[str, ...]:
        return tuple(sorted({e.patient_id for e in self.entries}))

    def patients_by_binary(self) -> dict[str, tuple[str, ...]]:
        by: dict[str, set[str]] = {}
        for e in self.entries:
            if e.binary_label is not None:
                by.setdefault(e.binary_label, set()).add(e.patient_id)
        return {label: tuple(sorted(p)) for label, p in sorted(by.items())}

    def at_magnification(self, mag: int) -> "CorpusManifest":
        kept = tuple(e for e in self.entries if e.magnification == mag)
        return CorpusManifest(self.corpus_kind, kept, frozenset({mag}))


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: int
    train_patients: frozenset[str]
    test_patients: frozenset[str]

    def __post_init__(self):
        if not 1 <= self.fold_index <= 5:
            raise ValueError(f"fold index {self.fold_index} outside 1..5")
        if self.train_patients & self.test_patients:
            raise ValueError("train and test patients overlap")

    def side_of(self, patient_id: str) -> str:
        if patient_id in self.train_patients:
            return "train"
        if patient_id in self.test_patients:
            return "test"
        raise KeyError(f"patient {patient_id} not assigned in fold {self.fold_index}")


def load_raster(path: Path) -> Raster:
    """Decode a PNG or TIFF file into an 8-bit RGB raster."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return Raster(np.asarray(rgb, dtype=np.uint8))
    except (UnidentifiedImageError, OSError) as exc:
        raise CorpusLayoutError(f"cannot decode {path}: {exc}") from exc


def _is_decodable_image(path: Path) -> bool:
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        return False
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def _image_id_for(root: Path, path: Path) -> str:
    rel = path.relative_to(root)
    return rel.with_suffix("").as_posix()


def _parse_magnification(name: str) -> int:
    text = name.lower().removesuffix("x")
    try:
        mag = int(text)
    except ValueError:
        raise CorpusLayoutError(f"unrecognized magnification directory {name!r}") from None
    if mag not in MAGNIFICATIONS:
        raise CorpusLayoutError(f"magnification {mag} not one of {MAGNIFICATIONS}")
    return mag


def _scan_breakhis_like(root: Path) -> list[ImageEntry]:
    entries: list[ImageEntry] = []
    for binary_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        binary = binary_dir.name.lower()
        if binary not in (BENIGN, MALIGN):
            raise CorpusLayoutError(
                f"top-level directory {binary_dir.name!r} is neither benign nor malign"
            )
        for subtype_dir in sorted(p for p in binary_dir.iterdir() if p.is_dir()):
            subtype = subtype_dir.name.lower()
            if subtype not in SUBTYPE_TO_BINARY:
                raise CorpusLayoutError(f"unknown tumor subtype directory {subtype_dir.name!r}")
            if SUBTYPE_TO_BINARY[subtype] != binary:
                raise CorpusLayoutError(
                    f"subtype {subtype!r} filed under {binary!r}; ambiguous labeling"
                )
            for patient_dir in sorted(p for p in subtype_dir.iterdir() if p.is_dir()):
                for mag_dir in sorted(p for p in patient_dir.iterdir() if p.is_dir()):
                    mag = _parse_magnification(mag_dir.name)
                    for f in sorted(mag_dir.iterdir()):
                        if f.is_file() and _is_decodable_image(f):
                            entries.append(
                                ImageEntry(
                                    path=f,
                                    patient_id=patient_dir.name,
                                    image_id=_image_id_for(root, f),
                                    subtype_label=subtype,
                                    magnification=mag,
                                    binary_label=binary,
                                )
                            )
    return entries


def _scan_crc_like(root: Path) -> list[ImageEntry]:
    entries: list[ImageEntry] = []
    for structure_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        raw = structure_dir.name.lower()
        raw = raw.split("_", 1)[1] if raw.split("_", 1)[0].isdigit() and "_" in raw else raw
        structure = _STRUCTURE_ALIASES.get(raw)
        if structure is None:
            raise CorpusLayoutError(f"unknown structure directory {structure_dir.name!r}")
        for f in sorted(structure_dir.rglob("*")):
            if f.is_file() and _is_decodable_image(f):
                entries.append(
                    ImageEntry(
                        path=f,
                        patient_id="",
                        image_id=_image_id_for(root, f),
                        subtype_label=structure,
                    )
                )
    return entries


def scan_corpus(root: Path, kind: str) -> CorpusManifest:
    """Walk a corpus root and list every decodable image with its labels."""
    root = Path(root)
    if kind not in (BREAKHIS_LIKE, CRC_LIKE, SYNTHETIC):
        raise CorpusLayoutError(f"unknown corpus kind {kind!r}")
    if not root.is_dir():
        raise CorpusLayoutError(f"corpus root {root} is not a readable directory")
    if kind == CRC_LIKE:
        entries = _scan_crc_like(root)
    else:
        entries = _scan_breakhis_like(root)
    if not entries:
        raise CorpusLayoutError(f"no images found under {root}")
    entries.sort(key=lambda e: e.path.relative_to(root).as_posix())
    keys = [(e.patient_id, e.image_id) for e in entries]
    if len(set(keys)) != len(keys):
        raise CorpusLayoutError("duplicate (patient_id, image_id) pairs in corpus")
    mags = frozenset(e.magnification for e in entries if e.magnification is not None)
    return CorpusManifest(corpus_kind=kind, entries=tuple(entries), magnifications=mags)


# ---------------------------------------------------------------------------
# Patient-wise folds
# ---------------------------------------------------------------------------

def _apportion_test_counts(class_sizes: dict[str, int], n_test: int) -> dict[str, int]:
    # Largest-remainder apportionment; ties resolve in label order.
    quotas = {c: n * n_test / sum(class_sizes.values()) for c, n in class_sizes.items()}
    counts = {c: int(q) for c, q in quotas.items()}
    leftover = n_test - sum(counts.values())
    for c in sorted(quotas, key=lambda c: (-(quotas[c] - counts[c]), c))[:leftover]:
        counts[c] += 1
    return counts


def make_folds(
    manifest: CorpusManifest,
    predefined: Optional[Path] = None,
    seed: int = 0,
    test_fraction: float = 0.3,
) -> list[FoldAssignment]:
    """Five patient-wise train/test splits, stratified by binary label.

    Each fold is an independent split holding out about 30% of patients;
    a predefined fold file reproduces its assignments exactly instead.
    """
    if manifest.corpus_kind == CRC_LIKE:
        raise ValueError("folds are defined for breakhis-like or synthetic corpora")
    patients = manifest.patients
    if predefined is not None:
        return _load_fold_file(Path(predefined), patients)
    by_class = manifest.patients_by_binary()
    for label, members in by_class.items():
        # Two per class is the structural floor: below it one side of some
        # split would lose the class entirely.
        if len(members) < 2:
            raise ValueError(f"class {label!r} has {len(members)} patients; need at least 2")
    class_sizes = {label: len(members) for label, members in by_class.items()}
    n_test = round_half_up(test_fraction * len(patients))
    test_per_class = _apportion_test_counts(class_sizes, n_test)
    folds = []
    for fold_index in range(1, 6):
        test: set[str] = set()
        for label, members in by_class.items():
            rng = spawn_rng(seed, f"fold{fold_index}:{label}")
            order = list(members)
            rng.shuffle(order)
            test.update(order[: test_per_class[label]])
        train = set(patients) - test
        folds.append(
            FoldAssignment(
                fold_index=fold_index,
                train_patients=frozenset(train),
                test_patients=frozenset(test),
            )
        )
    return folds


def _load_fold_file(path: Path, patients: tuple[str, ...]) -> list[FoldAssignment]:
    if not path.is_file():
        raise ValueError(f"fold file {path} not found")
    known = set(patients)
    sides: dict[int, dict[str, str]] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise ValueError(f"{path}:{line_no}: expected 'fold,patient_id,train|test'")
        fold_index = int(parts[0])
        patient = parts[1]
        if patient not in known:
            raise ValueError(f"{path}:{line_no}: unknown patient {patient!r}")
        sides.setdefault(fold_index, {})[patient] = parts[2]
    if sorted(sides) != [1, 2, 3, 4, 5]:
        raise ValueError(f"{path}: fold indices must be exactly 1..5, got {sorted(sides)}")
    folds = []
    for fold_index in range(1, 6):
        assignment = sides[fold_index]
        missing = known - set(assignment)
        if missing:
            raise ValueError(
                f"{path}: fold {fold_index} missing patients {sorted(missing)[:5]}"
            )
        folds.append(
            FoldAssignment(
                fold_index=fold_index,
                train_patients=frozenset(p for p, s in assignment.items() if s == "train"),
                test_patients=frozenset(p for p, s in assignment.items() if s == "test"),
            )
        )
    return folds


def write_fold_file(folds: list[FoldAssignment], path: Path) -> None:
    lines = []
    for fold in folds:
        for patient in sorted(fold.train_patients):
            lines.append(f"{fold.fold_index},{patient},train")
        for patient in sorted(fold.test_patients):
            lines.append(f"{fold.fold_index},{patient},test")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic corpora with controllable texture statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale corpus geometry and per-class texture parameters."""

    out_dir: Path
    layout: str = BREAKHIS_LIKE  # breakhis-like or crc-like tree
    patients_per_class: int = 4
    images_per_patient: int = 3
    width: int = 700
    height: int = 460
    magnifications: tuple[int, ...] = (200,)
    class_densities: tuple[float, float] = (0.10, 0.40)
    images_per_structure: int = 12


# Blob density and radius per structure; spread out so groupings separate.
_STRUCTURE_TEXTURES = {
    "tumor": (0.45, 5),
    "stroma": (0.22, 9),
    "complex_stroma": (0.34, 7),
    "lymphoid": (0.55, 4),
    "debris": (0.14, 6),
    "mucosa": (0.28, 12),
    "adipose": (0.06, 14),
    "empty": (0.005, 5),
}

_BACKGROUND = np.array((233, 215, 226), dtype=np.float64)
_BLOB = np.array((94, 58, 128), dtype=np.float64)


def _render_texture(
    width: int, height: int, density: float, radius: int, rng: np.random.Generator
) -> np.ndarray:
    canvas = np.tile(_BACKGROUND, (height, width, 1))
    blob_area = np.pi * radius * radius
    n_blobs = int(density * width * height / blob_area)
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (xx * xx + yy * yy) <= radius * radius
    for _ in range(n_blobs):
        cx = int(rng.integers(0, width))
        cy = int(rng.integers(0, height))
        x0, x1 = max(0, cx - radius), min(width, cx + radius + 1)
        y0, y1 = max(0, cy - radius), min(height, cy + radius + 1)
        window = disk[
            (y0 - cy + radius) : (y1 - cy + radius), (x0 - cx + radius) : (x1 - cx + radius)
        ]
        canvas[y0:y1, x0:x1][window] = _BLOB
    noise = rng.integers(-8, 9, size=(height, width, 1)).astype(np.float64)
    return np.clip(canvas + noise, 0, 255).astype(np.uint8)


def _write_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode="RGB").save(path, format="PNG")


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> CorpusManifest:
    """Write a deterministic synthetic corpus and return its manifest.

    Each image's pixels derive from a sub-seed labeled with its relative path,
    so regeneration is byte-identical regardless of traversal order.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.layout == CRC_LIKE:
        for structure in STRUCTURES:
            density, radius = _STRUCTURE_TEXTURES[structure]
            for i in range(spec.images_per_structure):
                rel = f"{structure}/{structure}_{i:04d}.png"
                rng = spawn_rng(seed, f"synth:{rel}")
                # CRC-style corpora are 150x150 tiles.
                _write_png(_render_texture(150, 150, density, radius, rng), out / rel)
        return scan_corpus(out, CRC_LIKE)

    if spec.layout not in (BREAKHIS_LIKE, SYNTHETIC):
        raise ValueError(f"unknown synthetic layout {spec.layout!r}")
    class_plan = [
        (BENIGN, "adenosis", spec.class_densities[0]),
        (MALIGN, "ductal_carcinoma", spec.class_densities[1]),
    ]
    for binary, subtype, density in class_plan:
        for p in range(spec.patients_per_class):
            patient = f"{subtype[:3]}_{p:02d}"
            for mag in spec.magnifications:
                for i in range(spec.images_per_patient):
                    rel = f"{binary}/{subtype}/{patient}/{mag}X/{patient}_{mag}_{i:03d}.png"
                    rng = spawn_rng(seed, f"synth:{rel}")
                    _write_png(
                        _render_texture(spec.width, spec.height, density, 6, rng), out / rel
                    )
    manifest = scan_corpus(out, SYNTHETIC)
    return manifest


def subsample_entries(
    entries: list[ImageEntry], count: int, seed: int, label: str
) -> list[ImageEntry]:
    """Deterministic subsample: sort by image id, seeded shuffle, take the head."""
    if count > len(entries):
        raise ValueError(f"need {count} entries for {label!r}, have {len(entries)}")
    ordered = sorted(entries, key=lambda e: e.image_id)
    rng = spawn_rng(seed, f"subsample:{label}")
    perm = rng.permutation(len(ordered))
    return [ordered[i] for i in perm[:count]]
