import numpy as np
import pytest

from histotile.dataset import STRUCTURES
from histotile.filterbank import (
    all_patients_survive,
    apply_filter,
    build_filter_spec,
    constant_relevance_model,
    load_relevance_model,
    relevance_model_to_dict,
    retention_report_csv,
    save_relevance_model,
    scale_filter_spec,
    train_relevance_model,
)
from histotile.imaging import PatchRecord, Raster


def patch(patient, image, col=0, row=0, mag=200, seed=0):
    rng = np.random.default_rng(seed)
    pixels = Raster(rng.integers(0, 256, size=(150, 150, 3), dtype=np.uint8))
    return PatchRecord(
        pixels=pixels,
        origin=(col * 150, row * 150),
        grid_pos=(col, row),
        source_image_id=image,
        patient_id=patient,
        magnification=mag,
        binary_label="benign",
    )


class TestFilterSpecs:
    # (index, relevant count per structure, irrelevant count per structure)
    TABLE = {
        1: (625, 89),
        2: (625, 208),
        3: (625, 375),
        4: (625, 625),
        5: (375, 625),
        6: (208, 625),
        7: (89, 625),
    }

    @pytest.mark.parametrize("index", range(1, 8))
    def test_per_structure_counts(self, index):
        spec = build_filter_spec(index)
        rel_n, irr_n = self.TABLE[index]
        assert set(spec.relevant_counts) == set(STRUCTURES[:index])
        assert set(spec.irrelevant_counts) == set(STRUCTURES[index:])
        assert all(v == rel_n for v in spec.relevant_counts.values())
        assert all(v == irr_n for v in spec.irrelevant_counts.values())

    def test_filter_four_is_balanced_at_625(self):
        spec = build_filter_spec(4)
        assert spec.relevant_counts == {s: 625 for s in STRUCTURES[:4]}
        assert spec.irrelevant_counts == {s: 625 for s in STRUCTURES[4:]}
        assert spec.total_relevant == spec.total_irrelevant == 2500

    def test_filter_one_documents_623_total(self):
        spec = build_filter_spec(1)
        assert spec.relevant_counts == {"tumor": 625}
        # seven classes at 89 each; the printed total of 625 is off by two
        assert spec.total_irrelevant == 623

    def test_filter_seven_mirrors_filter_one(self):
        spec = build_filter_spec(7)
        assert spec.irrelevant_counts == {"empty": 625}
        assert all(v == 89 for v in spec.relevant_counts.values())

    @pytest.mark.parametrize("index", (1, 2, 3))
    def test_mirror_symmetry(self, index):
        lo = build_filter_spec(index)
        hi = build_filter_spec(8 - index)
        assert sorted(lo.relevant_counts.values()) == sorted(hi.irrelevant_counts.values())
        assert sorted(lo.irrelevant_counts.values()) == sorted(hi.relevant_counts.values())

    @pytest.mark.parametrize("index", (0, 8, -1))
    def test_out_of_range_rejected(self, index):
        with pytest.raises(ValueError):
            build_filter_spec(index)

    def test_scaling_preserves_structure_sets(self):
        spec = scale_filter_spec(build_filter_spec(4), 12)
        assert all(v == 12 for v in spec.relevant_counts.values())
        assert all(v == 12 for v in spec.irrelevant_counts.values())
        tiny = scale_filter_spec(build_filter_spec(1), 12)
        assert tiny.relevant_counts == {"tumor": 12}
        assert all(v == 2 for v in tiny.irrelevant_counts.values())


class TestTrainRelevance:
    def test_separable_structures_reach_high_validation_accuracy(self, crc_corpus, small_grid):
        _, manifest = crc_corpus
        spec = scale_filter_spec(build_filter_spec(7), 12)
        model = train_relevance_model(manifest, spec, seed=3, grid=small_grid)
        assert model.validation_accuracy >= 0.95

    def test_same_seed_gives_identical_model_bytes(self, crc_corpus, small_grid, tmp_path):
        _, manifest = crc_corpus
        spec = scale_filter_spec(build_filter_spec(4), 12)
        paths = []
        for name in ("a.json", "b.json"):
            model = train_relevance_model(manifest, spec, seed=9, grid=small_grid)
            path = tmp_path / name
            save_relevance_model(model, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_insufficient_images_rejected(self, crc_corpus, small_grid):
        _, manifest = crc_corpus
        spec = build_filter_spec(4)  # wants 625 per structure, corpus has 12
        with pytest.raises(ValueError, match="needs 625"):
            train_relevance_model(manifest, spec, seed=0, grid=small_grid)

    def test_split_sizes_85_15(self):
        # 85/15 with per-class rounding: filter 4 at full size trains on 4250
        from histotile.filterbank import _stratified_split
        labels = np.array([1.0] * 2500 + [-1.0] * 2500)
        rng = np.random.default_rng(0)
        train_idx, val_idx = _stratified_split(labels, 0.15, rng)
        assert len(train_idx) == 4250
        assert len(val_idx) == 750

    def test_serialization_round_trip(self, crc_corpus, small_grid, tmp_path):
        _, manifest = crc_corpus
        spec = scale_filter_spec(build_filter_spec(7), 12)
        model = train_relevance_model(manifest, spec, seed=3, grid=small_grid)
        path = tmp_path / "filter.json"
        save_relevance_model(model, path)
        loaded = load_relevance_model(path)
        assert loaded.validation_accuracy == model.validation_accuracy
        assert loaded.filter_spec == model.filter_spec
        assert relevance_model_to_dict(loaded) == relevance_model_to_dict(model)

    def test_deep_features_with_pca(self, crc_corpus, small_grid, tmp_path):
        from histotile.features import FeatureMatrix

        _, manifest = crc_corpus
        spec = scale_filter_spec(build_filter_spec(4), 12)
        relevant_set = set(spec.relevant_counts)
        rng = np.random.default_rng(2)
        rows, provenance = [], []
        for e in manifest.entries:
            shift = 1.5 if e.subtype_label in relevant_set else -1.5
            rows.append(shift + rng.normal(size=2048))
            provenance.append((e.patient_id, e.image_id, (0, 0)))
        deep = FeatureMatrix(np.stack(rows), "deep-2048", provenance)
        model = train_relevance_model(
            manifest, spec, feature_kind="deep-pca-16", seed=3,
            grid=small_grid, deep_features=deep, pca_k=16,
        )
        assert model.validation_accuracy >= 0.95
        assert model.pca is not None and model.pca.k == 16
        path = tmp_path / "deep-filter.json"
        save_relevance_model(model, path)
        loaded = load_relevance_model(path)
        np.testing.assert_array_equal(loaded.pca.components, model.pca.components)


class TestApplyFilter:
    def _patch_set(self):
        patches = []
        for p in range(3):
            for i in range(2):
                for col in range(2):
                    patches.append(
                        patch(f"pat{p}", f"pat{p}/img{i}", col=col, seed=p * 10 + i + col)
                    )
        return patches

    def test_keep_everything_gives_full_retention(self):
        patches = self._patch_set()
        model = constant_relevance_model(162, relevant=True)
        retained, stats = apply_filter(model, patches)
        assert len(retained) == len(patches)
        s = stats[0]
        assert (s.pct_patches, s.pct_images, s.pct_patients) == (100.0, 100.0, 100.0)
        assert s.pct_patients_fractional == 100.0
        assert not s.excluded_images and not s.excluded_patients
        assert all_patients_survive(s)

    def test_drop_everything_excludes_all_patients(self):
        patches = self._patch_set()
        model = constant_relevance_model(162, relevant=False)
        retained, stats = apply_filter(model, patches)
        assert retained == []
        s = stats[0]
        assert (s.pct_patches, s.pct_images, s.pct_patients) == (0.0, 0.0, 0.0)
        assert set(s.excluded_patients) == {"pat0", "pat1", "pat2"}
        assert not all_patients_survive(s)

    def test_image_retained_iff_any_patch_retained(self):
        from histotile.filterbank import retention_stats

        patches = self._patch_set()
        in_img0 = np.array([p.source_image_id == "pat0/img0" for p in patches])
        # keep only the first patch of pat0/img0, drop its sibling
        one_patch = np.ones(len(patches), dtype=bool)
        one_patch[np.flatnonzero(in_img0)[1:]] = False
        stats = retention_stats(patches, one_patch, filter_index=7)[0]
        assert stats.pct_images == 100.0  # every image still has >= 1 patch
        # dropping every patch of images other than pat0/img0 excludes them
        stats2 = retention_stats(patches, in_img0, filter_index=7)[0]
        assert "pat0/img1" in stats2.excluded_images
        assert "pat0/img0" not in stats2.excluded_images

    def test_filtering_is_deterministic(self, crc_corpus, small_grid):
        _, manifest = crc_corpus
        spec = scale_filter_spec(build_filter_spec(7), 12)
        model = train_relevance_model(manifest, spec, seed=3, grid=small_grid)
        patches = self._patch_set()
        first, _ = apply_filter(model, patches)
        second, _ = apply_filter(model, patches)
        assert [p.provenance for p in first] == [p.provenance for p in second]

    def test_stats_split_by_magnification(self):
        patches = [patch("p0", "p0/a", mag=100, seed=1), patch("p0", "p0/b", mag=400, seed=2)]
        model = constant_relevance_model(162, relevant=True)
        _, stats = apply_filter(model, patches)
        assert [s.magnification for s in stats] == [100, 400]

    def test_retention_csv_columns(self, tmp_path):
        patches = self._patch_set()
        model = constant_relevance_model(162, relevant=True)
        _, stats = apply_filter(model, patches)
        path = tmp_path / "retention.csv"
        retention_report_csv(stats, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "magnification,filter,pct_patches,pct_images,pct_patients,flagged"
        assert lines[1] == "200,7,100.0,100.0,100.0,false"


class TestSurvival:
    def test_pass_when_no_exclusions(self):
        patches = [patch("p0", "p0/a", seed=1)]
        model = constant_relevance_model(162, relevant=True)
        _, stats = apply_filter(model, patches)
        assert all_patients_survive(stats[0])
        assert not stats[0].flagged

    def test_flagged_when_one_patient_fully_excluded(self):
        from histotile.filterbank import retention_stats

        patches = [patch("p0", "p0/a", seed=1), patch("p1", "p1/a", seed=2)]
        relevant = np.array([True, False])
        stats = retention_stats(patches, relevant, filter_index=1)[0]
        assert stats.excluded_patients == ("p1",)
        assert stats.flagged
        assert not all_patients_survive(stats)
