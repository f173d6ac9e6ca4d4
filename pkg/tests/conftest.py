import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from histotile.classifier import KernelParams
from histotile.dataset import CRC_LIKE, SyntheticSpec, generate_synthetic_corpus

SMALL_GRID = [
    KernelParams(c, gamma) for c in (1.0, 10.0, 100.0) for gamma in (0.01, 0.1)
]
SMALL_GRID_PAIRS = tuple((p.c, p.gamma) for p in SMALL_GRID)


@pytest.fixture(scope="session")
def breakhis_corpus(tmp_path_factory):
    """8 patients (4 per class), 3 images each, 700x460 at 200x; separable."""
    root = tmp_path_factory.mktemp("synth-breakhis") / "corpus"
    spec = SyntheticSpec(out_dir=root, patients_per_class=4, images_per_patient=3)
    manifest = generate_synthetic_corpus(spec, seed=11)
    return root, manifest


@pytest.fixture(scope="session")
def crc_corpus(tmp_path_factory):
    """12 tiles per structure, 150x150, distinct blob textures per structure."""
    root = tmp_path_factory.mktemp("synth-crc") / "corpus"
    spec = SyntheticSpec(out_dir=root, layout=CRC_LIKE, images_per_structure=12)
    manifest = generate_synthetic_corpus(spec, seed=5)
    return root, manifest


@pytest.fixture
def small_grid():
    return list(SMALL_GRID)
