"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Criterion 9 needs the real corpora and is skipped unless the
HISTOTILE_BREAKHIS_ROOT / HISTOTILE_CRC_ROOT environment variables point at
them.
"""

import os
import time

import numpy as np
import pytest

from histotile.classifier import grid_search, kkt_residuals
from histotile.config import RunConfig
from histotile.dataset import STRUCTURES
from histotile.evaluation import (
    PatchPrediction,
    aggregate_image,
    overall_accuracy,
    patient_score,
    run_experiment,
)
from histotile.features import fit_pca, pftas, transform_pca
from histotile.filterbank import build_filter_spec, constant_relevance_model
from histotile.imaging import Raster, grid_offsets, otsu_threshold, patch_grid_shape, tessellate
from conftest import SMALL_GRID_PAIRS
from oracles import max_subspace_angle, otsu_exhaustive, pftas_reference


def report(n, text):
    print(f"\n[criterion {n}] PASS - {text}")


def test_criterion_1_tessellation_geometry():
    started = time.time()
    patches = tessellate(Raster(np.zeros((460, 700, 3), dtype=np.uint8)))
    assert len(patches) == 15
    xs = grid_offsets(700, 150)
    overlaps = [xs[i] + 150 - xs[i + 1] for i in range(len(xs) - 1)]
    assert overlaps == [12, 13, 12, 13]
    cols, rows = patch_grid_shape(700, 460)
    per_image = cols * rows
    assert per_image * 7909 == 118_635
    elapsed = time.time() - started
    assert elapsed < 1.0
    report(1, f"700x460 -> 15 patches, overlaps 12/13, 7909 images -> 118635 ({elapsed:.2f}s)")


def test_criterion_2_pftas_oracle_equivalence():
    started = time.time()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        img = Raster(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
        ours = pftas(img).values
        assert ours.shape == (162,)
        ref = np.array(pftas_reference(img.pixels))
        worst = max(worst, float(np.abs(ours - ref).max()))
        assert worst <= 1e-9
    elapsed = time.time() - started
    assert elapsed < 10.0
    report(2, f"50 rasters, max |diff| {worst:.2e} <= 1e-9, length 162 ({elapsed:.1f}s)")


def test_criterion_3_otsu_oracle_equivalence():
    started = time.time()
    for seed in range(200):
        rng = np.random.default_rng(2000 + seed)
        values = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
        assert otsu_threshold(values) == otsu_exhaustive(values)
    elapsed = time.time() - started
    assert elapsed < 5.0
    report(3, f"200 rasters match the exhaustive 256-way search exactly ({elapsed:.1f}s)")


def test_criterion_4_filter_spec_counts():
    expected = {
        1: (625, 89),
        2: (625, 208),
        3: (625, 375),
        4: (625, 625),
        5: (375, 625),
        6: (208, 625),
        7: (89, 625),
    }
    for index, (rel_n, irr_n) in expected.items():
        spec = build_filter_spec(index)
        assert spec.relevant_counts == {s: rel_n for s in STRUCTURES[:index]}
        assert spec.irrelevant_counts == {s: irr_n for s in STRUCTURES[index:]}
    # row 1 prints a 625 total but the seven 89s sum to 623; per-class wins
    assert build_filter_spec(1).total_irrelevant == 623
    assert build_filter_spec(7).total_relevant == 623
    report(4, "filters 1..7 reproduce every per-structure count (623-vs-625 documented)")


def test_criterion_5_classifier_grid_search_and_kkt():
    started = time.time()
    rng = np.random.default_rng(7)
    a = rng.normal(loc=(0.0, 0.0), scale=1.0, size=(100, 2))
    b = rng.normal(loc=(6.0, 6.0), scale=1.0, size=(100, 2))
    x = np.vstack([a, b])
    y = np.array([-1.0] * 100 + [1.0] * 100)

    search = grid_search(x, y, seed=3)  # default coarse log grid
    best_acc = max(acc for _, acc in search.grid)
    assert best_acc >= 0.99

    shuffled = y.copy()
    rng.shuffle(shuffled)
    shuffled_search = grid_search(x, shuffled, seed=3)
    shuffled_acc = max(acc for _, acc in shuffled_search.grid)
    assert 0.4 <= shuffled_acc <= 0.6

    residuals = kkt_residuals(x, y, search.best, tol=1e-3)
    assert residuals.max() <= 1e-3

    elapsed = time.time() - started
    assert elapsed < 30.0
    report(
        5,
        f"CV accuracy {best_acc:.3f} >= 0.99, shuffled {shuffled_acc:.3f} in [0.4, 0.6], "
        f"max KKT residual {residuals.max():.2e} <= 1e-3 ({elapsed:.1f}s)",
    )


def test_criterion_6_pca_oracle_and_variance():
    from oracles import jacobi_eigensolve

    started = time.time()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 20)) @ np.diag(np.linspace(3.0, 0.2, 20))
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (len(x) - 1)
    oracle_vals, oracle_vecs = jacobi_eigensolve(cov)

    worst_angle = 0.0
    ratios = []
    for k in (5, 10, 15, 20):
        model = fit_pca(x, k)
        angle = max_subspace_angle(model.components, oracle_vecs[:k])
        worst_angle = max(worst_angle, angle)
        assert angle <= 1e-6
        ratios.append(float(model.explained_variance_ratio.sum()))
    assert all(lo <= hi + 1e-12 for lo, hi in zip(ratios, ratios[1:]))
    # projecting equals the oracle's projection up to component signs
    model = fit_pca(x, 20)
    ours = transform_pca(model, x)
    theirs = centered @ oracle_vecs[:20].T
    signs = np.sign(np.sum(ours * theirs, axis=0))
    assert np.allclose(ours, theirs * signs, atol=1e-6)

    elapsed = time.time() - started
    assert elapsed < 5.0
    report(
        6,
        f"subspace angle {worst_angle:.2e} <= 1e-6, variance ratios {[round(r, 3) for r in ratios]} "
        f"nondecreasing ({elapsed:.1f}s)",
    )


def test_criterion_7_protocol_arithmetic():
    from histotile.evaluation import ImageDecision

    def decision(correct, image):
        return ImageDecision(
            image_id=image, patient_id="p", rule="sum",
            predicted="malign" if correct else "benign",
            true="malign", n_patches_used=1,
        )

    eight_of_ten = [decision(i < 8, f"i{i}") for i in range(10)]
    assert patient_score(eight_of_ten) == 0.8
    assert overall_accuracy([1.0, 0.5]) == 75.0

    rng = np.random.default_rng(77)
    probs = rng.random(9)
    preds = [
        PatchPrediction(("p", "img", (i, 0)), float(v), "malign")
        for i, v in enumerate(probs)
    ]
    base = {rule: aggregate_image(preds, rule).predicted for rule in ("sum", "vote")}
    for _ in range(1000):
        perm = [preds[i] for i in rng.permutation(len(preds))]
        for rule in ("sum", "vote"):
            assert aggregate_image(perm, rule).predicted == base[rule]
    report(7, "patient score 8/10 = 0.8, accuracy {1.0, 0.5} = 75.0%, 1000 permutations invariant")


def test_criterion_8_end_to_end_desk_scale(breakhis_corpus, tmp_path):
    root, manifest = breakhis_corpus  # 8 patients, 2 classes, 700x460, separable
    config = RunConfig(
        corpus_root=root,
        corpus_kind="synthetic",
        magnifications=(200,),
        filters=(0,),
        seed=13,
        grid=SMALL_GRID_PAIRS,
        output_dir=tmp_path / "runs",
    )
    started = time.time()
    plain = run_experiment(config, 200, 0, manifest=manifest)
    elapsed = time.time() - started
    assert plain.mean["patient_sum"] >= 95.0
    assert plain.mean["patient_vote"] >= 95.0
    assert elapsed < 120.0

    identity = run_experiment(
        config, 200, 7, manifest=manifest,
        relevance_model=constant_relevance_model(162, relevant=True),
    )
    assert identity.per_fold == plain.per_fold
    report(
        8,
        f"patient accuracy sum {plain.mean['patient_sum']:.1f} / vote "
        f"{plain.mean['patient_vote']:.1f} >= 95 in {elapsed:.1f}s; "
        "all-relevant filter changed no prediction",
    )


@pytest.mark.skipif(
    not (os.environ.get("HISTOTILE_BREAKHIS_ROOT") and os.environ.get("HISTOTILE_CRC_ROOT")),
    reason="real-data mode: set HISTOTILE_BREAKHIS_ROOT and HISTOTILE_CRC_ROOT",
)
def test_criterion_9_real_data_reference_points(tmp_path):
    """Optional: with the real corpora, compare against the published table values.

    Deviations are reported rather than asserted; the published predefined
    folds and solver defaults are unavailable, so exact reproduction is not
    expected.
    """
    config = RunConfig(
        corpus_root=os.environ["HISTOTILE_BREAKHIS_ROOT"],
        corpus_kind="breakhis-like",
        crc_root=os.environ["HISTOTILE_CRC_ROOT"],
        magnifications=(200,),
        filters=(0, 7),
        seed=1,
        output_dir=tmp_path / "real-runs",
    )
    plain = run_experiment(config, 200, 0)
    filtered = run_experiment(config, 200, 7)
    reference = {"no filter": (plain, 88.4), "filter 7": (filtered, 89.2)}
    lines = []
    for name, (run, expected) in reference.items():
        got = run.mean["patient_sum"]
        delta = got - expected
        flag = "within +-3" if abs(delta) <= 3.0 else "OUTSIDE +-3 (reported, not asserted)"
        lines.append(f"{name}: patient sum {got:.1f} vs published {expected} ({flag})")
    report(9, "; ".join(lines))
