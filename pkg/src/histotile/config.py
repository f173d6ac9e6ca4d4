"""Run configuration, the key=value config grammar, and seed derivation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


def subseed(master: int, label: str) -> int:
    """Stable sub-seed for one purpose, derived by labeled hashing.

    Every random choice in the pipeline draws from one of these, so fold
    generation, subsampling and calibration splits are independently
    reproducible from the single master seed.
    """
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def spawn_rng(master: int, label: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(subseed(master, label)))


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment matrix needs; flags override file values."""

    corpus_root: Path
    corpus_kind: str = "breakhis-like"
    crc_root: Optional[Path] = None
    crc_kind: str = "crc-like"
    magnifications: tuple[int, ...] = (200,)
    filters: tuple[int, ...] = (0,)  # 0 disables filtering
    feature_kind: str = "pftas"  # pftas | deep
    pca_k: Optional[int] = None
    deep_features: Optional[Path] = None  # CSV for the main corpus
    crc_deep_features: Optional[Path] = None  # CSV for the filter corpus
    grid: Optional[tuple[tuple[float, float], ...]] = None  # (c, gamma) pairs
    seed: int = 0
    fold_file: Optional[Path] = None
    output_dir: Path = Path("runs")
    jobs: int = 1
    filter_scale_to_available: bool = False

    def validate(self) -> "RunConfig":
        if self.feature_kind not in ("pftas", "deep"):
            raise ConfigError(f"feature_kind must be pftas or deep, got {self.feature_kind!r}")
        if self.pca_k is not None and self.feature_kind != "deep":
            raise ConfigError("pca_k is only valid with deep features")
        if self.pca_k is not None and self.pca_k < 1:
            raise ConfigError("pca_k must be positive")
        for f in self.filters:
            if not 0 <= f <= 7:
                raise ConfigError(f"filter index {f} outside 0..7")
        if any(f > 0 for f in self.filters) and self.crc_root is None:
            raise ConfigError("filters > 0 require crc_root")
        if self.feature_kind == "deep" and self.deep_features is None:
            raise ConfigError("deep features require a deep_features CSV")
        if self.feature_kind == "deep" and any(f > 0 for f in self.filters) and (
            self.crc_deep_features is None
        ):
            raise ConfigError("deep-feature filtering requires crc_deep_features")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.grid is not None:
            for c, gamma in self.grid:
                if not (c > 0 and gamma > 0):
                    raise ConfigError(f"grid point ({c}, {gamma}) must be positive")
        return self


_PATH_KEYS = {"corpus_root", "crc_root", "deep_features", "crc_deep_features",
              "fold_file", "output_dir"}
_INT_TUPLE_KEYS = {"magnifications", "filters"}


def _parse_scalar(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_file(path: Path) -> dict:
    """Flat key = value grammar: one pair per line, # comments, comma lists."""
    result: dict = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{line_no}: empty key")
        if "," in raw:
            result[key] = [_parse_scalar(part) for part in raw.split(",")]
        else:
            result[key] = _parse_scalar(raw)
    return result


def config_from_mapping(mapping: dict) -> RunConfig:
    """Build a RunConfig from parsed key/value pairs, coercing field types."""
    known = {f.name for f in fields(RunConfig)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "corpus_root" not in mapping:
        raise ConfigError("config requires corpus_root")
    kwargs = {}
    for key, value in mapping.items():
        if key in _PATH_KEYS and value is not None:
            kwargs[key] = Path(value)
        elif key in _INT_TUPLE_KEYS:
            items = value if isinstance(value, list) else [value]
            kwargs[key] = tuple(int(v) for v in items)
        elif key == "grid" and value is not None:
            flat = [float(v) for v in (value if isinstance(value, list) else [value])]
            if len(flat) % 2 != 0:
                raise ConfigError("grid must list c,gamma pairs")
            kwargs[key] = tuple(
                (flat[i], flat[i + 1]) for i in range(0, len(flat), 2)
            )
        else:
            kwargs[key] = value
    return RunConfig(**kwargs).validate()


def override(config: RunConfig, **updates) -> RunConfig:
    cleaned = {k: v for k, v in updates.items() if v is not None}
    return replace(config, **cleaned).validate() if cleaned else config
