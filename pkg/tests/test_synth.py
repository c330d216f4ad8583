"""Synthetic slides: planted truth, placement geometry, the closed loop."""

import numpy as np
import pytest

from phenogate.engine import OutcomeKind, evaluate, label_nuclei
from phenogate.errors import NoWitnessError, PlacementFailureError
from phenogate.rulelang import compile_program
from phenogate.slideio import (
    Disease,
    Site,
    SlideManifest,
    compute_nucleus_features,
)
from phenogate.synth import (
    CohortManifest,
    CohortSpec,
    SynthSpec,
    TruthTable,
    generate_synthetic_cohort,
    generate_synthetic_slide,
    planted_thresholds,
    plant_gate_vector,
)


class TestPlantedGateVectors:
    def test_every_class_round_trips_through_evaluation(self, program, compiled):
        rng = np.random.default_rng(0)
        for name in program.classes:
            for _ in range(5):
                bits = plant_gate_vector(name, rng, program)
                outcome = evaluate(compiled, bits)
                assert outcome.kind is OutcomeKind.ASSIGNED
                assert outcome.class_name == name

    def test_nuclear_marker_bit_always_set(self, program):
        rng = np.random.default_rng(1)
        dapi = program.marker_names.index("DAPI")
        for name in program.classes:
            bits = plant_gate_vector(name, rng, program)
            assert bits >> dapi & 1 == 1

    def test_unknown_class_rejected(self, program):
        with pytest.raises(NoWitnessError):
            plant_gate_vector("astrocyte", np.random.default_rng(0), program)

    def test_draws_are_seed_deterministic(self, program):
        a = [plant_gate_vector("goblet", np.random.default_rng(7), program)
             for _ in range(1)]
        b = [plant_gate_vector("goblet", np.random.default_rng(7), program)
             for _ in range(1)]
        assert a == b


class TestSpecValidation:
    def test_radius_range(self):
        with pytest.raises(ValueError):
            SynthSpec(radius_min=5, radius_max=4)
        with pytest.raises(ValueError):
            SynthSpec(radius_min=0)

    def test_threshold_between_means(self):
        with pytest.raises(ValueError):
            SynthSpec(threshold=40.0)
        with pytest.raises(ValueError):
            SynthSpec(threshold=250.0)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(positive_std=-1.0)

    def test_proportions_must_be_a_distribution(self):
        with pytest.raises(ValueError):
            SynthSpec(class_proportions=(0.5, 0.4))
        with pytest.raises(ValueError):
            SynthSpec(class_proportions=(1.5, -0.5))


def disk_pixel_counts(r_lo, r_hi):
    counts = {}
    for r in range(r_lo, r_hi + 1):
        yy, xx = np.ogrid[-r:r + 1, -r:r + 1]
        counts[int(((xx * xx + yy * yy) <= r * r).sum())] = r
    return counts


class TestSlideGeneration:
    def test_same_spec_reproduces_the_slide(self, program):
        spec = SynthSpec(width=150, height=150, nucleus_count=30, seed=21)
        a = generate_synthetic_slide(spec, program)
        b = generate_synthetic_slide(spec, program)
        assert np.array_equal(a.mask, b.mask)
        assert a.truth.classes == b.truth.classes
        assert np.array_equal(a.truth.gate_bits, b.truth.gate_bits)
        for marker in a.channels:
            assert np.array_equal(a.channels[marker], b.channels[marker])
        assert np.array_equal(a.centroids, b.centroids)

    def test_mask_labels_and_disk_separation(self, tiny_slide):
        spec, slide = tiny_slide
        ids = np.unique(slide.mask)
        assert ids[0] == 0
        assert ids[1:].tolist() == list(range(1, spec.nucleus_count + 1))
        by_count = disk_pixel_counts(spec.radius_min, spec.radius_max)
        areas = np.bincount(slide.mask.reshape(-1))[1:]
        radii = np.array([by_count[int(a)] for a in areas])
        xy = slide.centroids
        diff = xy[:, None, :] - xy[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        need = radii[:, None] + radii[None, :] + 1
        np.fill_diagonal(dist, np.inf)
        assert (dist >= need - 1e-9).all()

    def test_channel_panel_matches_the_program(self, tiny_slide, program):
        _, slide = tiny_slide
        assert tuple(slide.channels) == program.marker_names
        for img in slide.channels.values():
            assert img.dtype == np.uint16

    def test_zero_noise_channels_are_two_valued(self, program):
        spec = SynthSpec(width=120, height=120, nucleus_count=15,
                         positive_std=0.0, negative_std=0.0, seed=3)
        slide = generate_synthetic_slide(spec, program)
        dapi_idx = program.marker_names.index("DAPI")
        for j, (marker, img) in enumerate(slide.channels.items()):
            assert set(np.unique(img)) <= {50, 200}
            for i in range(spec.nucleus_count):
                inside = img[slide.mask == i + 1]
                positive = int(slide.truth.gate_bits[i]) >> j & 1
                assert (inside == (200 if positive else 50)).all()
            assert j != dapi_idx or (img[slide.mask > 0] == 200).all()

    def test_zero_noise_closed_loop_reproduces_truth_exactly(self, program):
        spec = SynthSpec(width=200, height=200, nucleus_count=50,
                         positive_std=0.0, negative_std=0.0, seed=5)
        slide = generate_synthetic_slide(spec, program)
        features = compute_nucleus_features(slide.channels, slide.mask)
        labels = label_nuclei(features, planted_thresholds(spec, "s"), program)
        assert (labels.outcomes.codes == 1).all()  # everything assigned
        assert np.array_equal(labels.gate_bits, slide.truth.gate_bits)
        got = [labels.class_names[c] for c in labels.outcomes.class_idx]
        assert got == list(slide.truth.classes)

    def test_noisy_closed_loop_stays_faithful(self, program):
        spec = SynthSpec(width=300, height=300, nucleus_count=150,
                         positive_std=10.0, negative_std=10.0, seed=6)
        slide = generate_synthetic_slide(spec, program)
        features = compute_nucleus_features(slide.channels, slide.mask)
        labels = label_nuclei(features, planted_thresholds(spec, "s"), program)
        got = np.array([labels.class_names[c] if k == 1 else "?"
                        for k, c in zip(labels.outcomes.codes,
                                        labels.outcomes.class_idx)])
        agreement = (got == np.array(slide.truth.classes)).mean()
        assert agreement >= 0.999

    def test_class_proportions_are_honored(self, program):
        props = tuple([1.0] + [0.0] * 13)
        spec = SynthSpec(width=150, height=150, nucleus_count=20,
                         class_proportions=props, seed=2)
        slide = generate_synthetic_slide(spec, program)
        assert set(slide.truth.classes) == {program.classes[0]}

    def test_impossible_density_fails_with_diagnosis(self, program):
        spec = SynthSpec(width=40, height=40, nucleus_count=100, seed=0)
        with pytest.raises(PlacementFailureError):
            generate_synthetic_slide(spec, program)

    def test_radius_larger_than_field_fails(self, program):
        spec = SynthSpec(width=10, height=10, nucleus_count=1,
                         radius_min=5, radius_max=5, seed=0)
        with pytest.raises(PlacementFailureError):
            generate_synthetic_slide(spec, program)

    def test_empty_slide(self, program):
        spec = SynthSpec(width=50, height=50, nucleus_count=0, seed=0)
        slide = generate_synthetic_slide(spec, program)
        assert len(slide.truth) == 0
        assert (slide.mask == 0).all()


class TestTruthTable:
    def test_csv_round_trip(self, tiny_slide, tmp_path):
        _, slide = tiny_slide
        slide.truth.to_csv(tmp_path / "truth.csv")
        loaded = TruthTable.from_csv(tmp_path / "truth.csv")
        assert np.array_equal(loaded.nucleus_ids, slide.truth.nucleus_ids)
        assert loaded.classes == slide.truth.classes
        assert np.array_equal(loaded.gate_bits, slide.truth.gate_bits)

    def test_unexpected_header_rejected(self, tmp_path):
        (tmp_path / "truth.csv").write_text("id,who,bits\n")
        with pytest.raises(ValueError):
            TruthTable.from_csv(tmp_path / "truth.csv")

    def test_class_counts(self):
        truth = TruthTable(np.array([1, 2, 3]), ("a", "b", "a"),
                           np.array([1, 2, 1]))
        assert truth.class_counts() == {"a": 2, "b": 1}


SMALL_COHORT = CohortSpec(
    patient_count=5, slides_per_patient=1, microns_per_pixel=0.32,
    slide=SynthSpec(width=100, height=100, nucleus_count=8, seed=0), seed=17)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory, program):
    root = tmp_path_factory.mktemp("synthco")
    return generate_synthetic_cohort(root, SMALL_COHORT, program), root


class TestCohort:
    def test_layout_and_strata(self, cohort):
        manifest, root = cohort
        assert [p.patient_id for p in manifest.patients] == [
            f"P{i:02d}" for i in range(1, 6)]
        assert [p.site for p in manifest.patients] == [
            Site.ASCENDING_COLON, Site.TERMINAL_ILEUM, Site.ASCENDING_COLON,
            Site.TERMINAL_ILEUM, Site.ASCENDING_COLON]
        assert [p.disease for p in manifest.patients] == [
            Disease.NORMAL, Disease.INACTIVE_CD, Disease.ACTIVE_CD,
            Disease.NORMAL, Disease.INACTIVE_CD]
        for slide in manifest.slides:
            d = root / slide.path
            assert (d / "manifest.json").exists()
            assert (d / "truth.csv").exists()
            assert (d / "thresholds.json").exists()
            assert (d / "mask.tiff").exists()
            loaded = SlideManifest.from_json(d / "manifest.json")
            assert loaded.slide_id == slide.slide_id
            assert loaded.patient_id == slide.patient_id

    def test_manifest_json_round_trip(self, cohort):
        manifest, root = cohort
        loaded = CohortManifest.from_json(root / "cohort.json")
        assert loaded == manifest

    def test_slide_dir_lookup(self, cohort):
        manifest, root = cohort
        assert manifest.slide_dir("P03_s1") == root / "slides" / "P03_s1"
        with pytest.raises(KeyError):
            manifest.slide_dir("nope")

    def test_patient_infos_collapse_strata(self, cohort):
        manifest, _ = cohort
        infos = manifest.patient_infos()
        assert [i.patient_id for i in infos] == [
            f"P{i:02d}" for i in range(1, 6)]
        assert infos[0].sites == frozenset({Site.ASCENDING_COLON})
        assert infos[1].diseases == frozenset({Disease.INACTIVE_CD})

    def test_regeneration_is_byte_identical(self, tmp_path, program, cohort):
        _, root = cohort
        again = tmp_path / "again"
        generate_synthetic_cohort(again, SMALL_COHORT, program)
        rel = "slides/P01_s1"
        for name in ("truth.csv", "thresholds.json", "channels/DAPI.tiff"):
            assert ((again / rel / name).read_bytes()
                    == (root / rel / name).read_bytes())
