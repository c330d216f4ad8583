"""Patch geometry, the record file format, fold planning, and sampling."""

import math
import struct

import numpy as np
import pytest

from phenogate.engine import label_nuclei
from phenogate.errors import (
    DecodeError,
    EmptyClassError,
    LabelTableMismatchError,
    MissingImageError,
    OutOfBoundsError,
    UnsatisfiableError,
)
from phenogate.patches import (
    FEATURE_DIM,
    FLAG_EDGE_PADDED,
    PATCH_SIZE,
    TARGET_MPP,
    DatasetManifest,
    FoldAssignment,
    FoldPlan,
    PatchDataset,
    PatientInfo,
    RecordFileWriter,
    SlideInput,
    balanced_sampler,
    build_dataset,
    extract_patch,
    make_folds,
    sample_batch,
    subset_indices,
    validate_fold_plan,
)
from phenogate.pseudohe import StainMixSpec, render_pseudo_he
from phenogate.rulelang import CANONICAL_PANEL
from phenogate.slideio import (
    Disease,
    NucleusTable,
    Site,
    SlideManifest,
    ThresholdSet,
    compute_nucleus_features,
)


def ref_extract(image, cx, cy, source_mpp):
    """Independent scalar reimplementation of the patch geometry."""
    h, w = image.shape[:2]
    scale = source_mpp / TARGET_MPP
    tx = math.ceil(cx * scale - 0.5)
    ty = math.ceil(cy * scale - 0.5)
    out = np.zeros((PATCH_SIZE, PATCH_SIZE, 3))
    padded = False
    for r, dy in enumerate(range(-20, 21)):
        for c, dx in enumerate(range(-20, 21)):
            sx = (tx + dx) / scale
            sy = (ty + dy) / scale
            if not (0 <= sx <= w - 1 and 0 <= sy <= h - 1):
                padded = True
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            val = np.zeros(3)
            for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    yc = min(max(yy, 0), h - 1)
                    xc = min(max(xx, 0), w - 1)
                    val += image[yc, xc].astype(float) * wx * wy
            out[r, c] = val
    return out / 255.0, padded


class TestPatchGeometry:
    def test_output_shape_range_and_dtype(self, rng):
        image = rng.integers(0, 256, (100, 100, 3)).astype(np.uint8)
        patch = extract_patch(image, (50.0, 50.0), 0.32)
        assert patch.pixels.shape == (41, 41, 3)
        assert patch.pixels.dtype == np.float64
        assert patch.pixels.min() >= 0.0
        assert patch.pixels.max() <= 1.0

    def test_identity_resample_reproduces_constant_image_exactly(self):
        image = np.full((60, 60, 3), 137, np.uint8)
        patch = extract_patch(image, (30.0, 30.0), TARGET_MPP)
        assert (patch.pixels == 137 / 255.0).all()
        assert not patch.edge_padded

    def test_identity_resample_copies_pixels_at_integer_centroid(self, rng):
        image = rng.integers(0, 256, (70, 70, 3)).astype(np.uint8)
        patch = extract_patch(image, (33.0, 35.0), TARGET_MPP)
        assert np.array_equal(patch.pixels,
                              image[15:56, 13:54].astype(float) / 255.0)

    def test_delta_image_lands_at_the_patch_center(self):
        image = np.zeros((50, 50, 3), np.uint8)
        image[25, 20] = 255
        patch = extract_patch(image, (20.0, 25.0), TARGET_MPP)
        assert patch.pixels[20, 20, 0] == 1.0
        assert patch.pixels.sum() == 3.0  # single pixel, three channels

    def test_center_rounding_ties_go_toward_negative_infinity(self):
        image = np.zeros((50, 50, 3), np.uint8)
        image[10, 10] = 255
        # cx*scale - 0.5 == 10.0 exactly: ceil keeps 10, not 11
        patch = extract_patch(image, (10.5, 10.5), TARGET_MPP)
        assert patch.pixels[20, 20, 0] == 1.0
        nudged = extract_patch(image, (10.5 + 1e-6, 10.5), TARGET_MPP)
        assert nudged.pixels[20, 19, 0] > 0.99  # center moved one to the right

    def test_agrees_with_reference_implementation(self, rng):
        image = rng.integers(0, 256, (90, 80, 3)).astype(np.uint8)
        for cx, cy, mpp in [(40.2, 45.7, 0.32), (10.0, 70.5, 0.5),
                            (2.0, 3.0, 0.25), (78.9, 1.1, 0.65)]:
            patch = extract_patch(image, (cx, cy), mpp)
            expected, padded = ref_extract(image, cx, cy, mpp)
            assert np.allclose(patch.pixels, expected, atol=1e-12)
            assert patch.edge_padded == padded

    def test_scale_factor_for_the_default_acquisition(self):
        # 0.32 um/px source -> 0.64 source pixels per target pixel, so the
        # 41-pixel window spans 26.24 source pixels; verify via the sample
        # coordinates implied by a delta image
        image = np.zeros((200, 200, 3), np.uint8)
        image[100, 100] = 255
        patch = extract_patch(image, (100.0, 100.0), 0.32)
        row = patch.pixels[20, :, 0]
        lit = np.flatnonzero(row > 1e-9)
        # neighboring target pixels sample 1/0.64 = 1.5625 source px apart,
        # so only the center tap hits the delta within bilinear reach
        assert 0.32 / TARGET_MPP == 0.64
        assert lit.tolist() == [20]

    def test_edge_padding_flag_and_replication(self):
        image = np.full((30, 30, 3), 200, np.uint8)
        patch = extract_patch(image, (0.0, 0.0), TARGET_MPP)
        assert patch.edge_padded
        assert (patch.pixels == 200 / 255.0).all()  # replicated edges
        big = np.full((100, 100, 3), 200, np.uint8)
        inner = extract_patch(big, (50.0, 50.0), 0.32)
        assert not inner.edge_padded

    def test_centroid_outside_image_rejected(self):
        image = np.zeros((20, 20, 3), np.uint8)
        with pytest.raises(OutOfBoundsError):
            extract_patch(image, (20.0, 5.0), 0.32)
        with pytest.raises(OutOfBoundsError):
            extract_patch(image, (5.0, -0.1), 0.32)
        extract_patch(image, (19.0, 0.0), 0.32)  # corners are legal

    def test_nonpositive_mpp_rejected(self):
        with pytest.raises(ValueError):
            extract_patch(np.zeros((20, 20, 3), np.uint8), (5.0, 5.0), 0.0)


class TestRecordFile:
    def test_round_trip_with_backpatched_count(self, tmp_path, rng):
        path = tmp_path / "ds.nucp"
        pix = rng.uniform(0, 1, (41, 41, 3))
        with RecordFileWriter(path, class_count=14) as writer:
            writer.write(0, 11, 3, False, pix)
            writer.write(1, 22, 9, True, pix)
            writer.write(2, 33, 13, False, pix)
        ds = PatchDataset.open(path)
        assert len(ds) == 3
        assert ds.class_count == 14
        assert ds.labels.tolist() == [3, 9, 13]
        assert ds.slide_idx.tolist() == [0, 1, 2]
        assert ds.nucleus_ids.tolist() == [11, 22, 33]
        assert ds.edge_padded.tolist() == [False, True, False]
        assert np.array_equal(ds.data["pixels"][0],
                              np.rint(pix.reshape(-1) * 255).astype(np.uint8))

    def test_quantization_is_exact_on_the_encode_grid(self, tmp_path):
        path = tmp_path / "ds.nucp"
        pix = (np.arange(FEATURE_DIM) % 256 / 255.0).reshape(41, 41, 3)
        with RecordFileWriter(path, class_count=2) as writer:
            writer.write(0, 1, 0, False, pix)
        ds = PatchDataset.open(path)
        assert np.array_equal(ds.patch(0).pixels, pix)
        assert np.array_equal(ds.features([0])[0], pix.reshape(-1))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "ds.nucp"
        with RecordFileWriter(path, class_count=2) as writer:
            writer.write(0, 1, 0, False, np.zeros((41, 41, 3)))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(DecodeError):
            PatchDataset.open(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "ds.nucp"
        with RecordFileWriter(path, class_count=2) as writer:
            writer.write(0, 1, 0, False, np.zeros((41, 41, 3)))
        raw = bytearray(path.read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        path.write_bytes(raw)
        with pytest.raises(DecodeError):
            PatchDataset.open(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "ds.nucp"
        with RecordFileWriter(path, class_count=2) as writer:
            writer.write(0, 1, 0, False, np.zeros((41, 41, 3)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DecodeError):
            PatchDataset.open(path)

    def test_from_arrays_validates_range(self):
        with pytest.raises(ValueError):
            PatchDataset.from_arrays(np.full((1, 41, 41, 3), 1.5), [0], 2)

    def test_class_histogram(self):
        ds = PatchDataset.from_arrays(np.zeros((5, 41, 41, 3)),
                                      [0, 0, 2, 1, 2], 4)
        assert ds.class_histogram().tolist() == [2, 1, 2, 0]


def synthetic_slide_input(slide_id, patient_id, n, seed, program):
    """A small in-memory slide whose nuclei gate to assorted classes."""
    rng = np.random.default_rng(seed)
    panel = CANONICAL_PANEL
    size = 120
    means = rng.uniform(0, 255, (n, len(panel)))
    features = NucleusTable(panel, np.arange(1, n + 1, dtype=np.int64),
                            rng.uniform(5, size - 6, n),
                            rng.uniform(5, size - 6, n),
                            rng.integers(20, 60, n).astype(np.int64), means)
    thresholds = ThresholdSet(slide_id, 0, {m: 125.0 for m in panel})
    labels = label_nuclei(features, thresholds, program)
    manifest = SlideManifest(
        slide_id=slide_id, patient_id=patient_id, site=Site.ASCENDING_COLON,
        disease=Disease.NORMAL, microns_per_pixel=0.32, channels=(),
        mask_path=None)
    he = rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
    return SlideInput(manifest, features, labels, he)


class TestBuildDataset:
    def test_records_cover_exactly_the_assigned_nuclei(self, tmp_path, program):
        inputs = [synthetic_slide_input("s0", "PA", 60, 1, program),
                  synthetic_slide_input("s1", "PB", 40, 2, program)]
        path = tmp_path / "ds.nucp"
        manifest = build_dataset(inputs, path, fold_plan_ref="folds.json")
        ds = PatchDataset.open(path)
        for idx, s in enumerate(inputs):
            expected = sorted(
                int(n) for n, o in zip(s.labels.nucleus_ids,
                                       s.labels.outcomes.codes) if o == 1)
            got = ds.nucleus_ids[ds.slide_idx == idx].tolist()
            assert got == expected  # ascending nucleus ids within the slide
        assert manifest.record_count == len(ds)
        assert manifest.class_names == inputs[0].labels.class_names
        assert manifest.fold_plan == "folds.json"
        assert sum(manifest.class_counts.values()) == len(ds)
        assert [s.patient_id for s in manifest.slides] == ["PA", "PB"]

    def test_labels_match_the_stored_class_indices(self, tmp_path, program):
        s = synthetic_slide_input("s0", "PA", 50, 3, program)
        manifest = build_dataset([s], tmp_path / "ds.nucp")
        ds = PatchDataset.open(tmp_path / "ds.nucp")
        for i in range(len(ds)):
            _, outcome = s.labels.lookup(int(ds.nucleus_ids[i]))
            assert manifest.class_names[ds.labels[i]] == outcome.class_name

    def test_missing_image_rejected(self, tmp_path, program):
        s = synthetic_slide_input("s0", "PA", 30, 4, program)
        broken = SlideInput(s.manifest, s.features, s.labels, None)
        with pytest.raises(MissingImageError):
            build_dataset([broken], tmp_path / "ds.nucp")

    def test_label_id_absent_from_features_rejected(self, tmp_path, program):
        s = synthetic_slide_input("s0", "PA", 30, 5, program)
        trimmed = NucleusTable(
            s.features.marker_names, s.features.nucleus_ids[:-1],
            s.features.cx[:-1], s.features.cy[:-1], s.features.area[:-1],
            s.features.means[:-1])
        with pytest.raises(LabelTableMismatchError):
            build_dataset([SlideInput(s.manifest, trimmed, s.labels,
                                      s.he_image)], tmp_path / "ds.nucp")

    def test_manifest_json_round_trip(self, tmp_path, program):
        s = synthetic_slide_input("s0", "PA", 40, 6, program)
        manifest = build_dataset([s], tmp_path / "ds.nucp")
        manifest.to_json(tmp_path / "ds.json")
        assert DatasetManifest.from_json(tmp_path / "ds.json") == manifest


def twenty_patients():
    sites = [Site.ASCENDING_COLON, Site.TERMINAL_ILEUM]
    diseases = [Disease.NORMAL, Disease.INACTIVE_CD, Disease.ACTIVE_CD]
    return [PatientInfo(f"P{i:02d}", frozenset({sites[i % 2]}),
                        frozenset({diseases[i % 3]}))
            for i in range(1, 21)]


class TestFoldPlanning:
    def test_constraints_hold_for_several_seeds(self):
        patients = twenty_patients()
        for seed in range(10):
            plan = make_folds(patients, seed=seed)
            assert validate_fold_plan(plan, patients) == []

    def test_same_seed_reproduces_the_plan(self):
        patients = twenty_patients()
        assert make_folds(patients, seed=41) == make_folds(patients, seed=41)

    def test_test_sets_partition_the_patients(self):
        patients = twenty_patients()
        plan = make_folds(patients, seed=7)
        tested = [pid for fold in plan.folds for pid in fold.test]
        assert sorted(tested) == sorted(p.patient_id for p in patients)
        assert len(set(tested)) == 20

    def test_wrong_patient_count_unsatisfiable(self):
        with pytest.raises(UnsatisfiableError):
            make_folds(twenty_patients()[:19], seed=0)

    def test_impossible_strata_unsatisfiable(self):
        # every patient at one site: no plan can cover both sites per role
        patients = [PatientInfo(f"P{i:02d}",
                                frozenset({Site.ASCENDING_COLON}),
                                frozenset({Disease.NORMAL,
                                           Disease.ACTIVE_CD}))
                    for i in range(1, 21)]
        with pytest.raises(UnsatisfiableError):
            make_folds(patients, seed=0, max_attempts=50)

    def test_validator_reports_overlap_and_size_problems(self):
        patients = twenty_patients()
        plan = make_folds(patients, seed=3)
        f0 = plan.folds[0]
        # move one train patient into val: 11/5/4 sizes plus an overlap
        corrupted = FoldPlan(plan.k, plan.seed, (FoldAssignment(
            f0.train, f0.val + (f0.train[0],), f0.test),) + plan.folds[1:])
        problems = validate_fold_plan(corrupted, patients)
        assert any("sizes" in p for p in problems)
        assert any("overlapping" in p for p in problems)

    def test_json_round_trip(self, tmp_path):
        plan = make_folds(twenty_patients(), seed=11)
        plan.to_json(tmp_path / "folds.json")
        assert FoldPlan.from_json(tmp_path / "folds.json") == plan

    def test_subset_indices_follow_patient_roles(self, tmp_path, program):
        inputs = [synthetic_slide_input(f"s{i}", f"P{i:02d}", 30, i, program)
                  for i in range(1, 21)]
        manifest = build_dataset(inputs, tmp_path / "ds.nucp")
        ds = PatchDataset.open(tmp_path / "ds.nucp")
        patients = twenty_patients()
        plan = make_folds(patients, seed=2)
        seen = set()
        for role in ("train", "val", "test"):
            idx = subset_indices(ds, manifest, plan, 0, role)
            want = set(plan.role_patients(0, role))
            patient_of = manifest.patient_of_slide_idx()
            assert {patient_of[int(s)] for s in ds.slide_idx[idx]} <= want
            seen.update(idx.tolist())
        assert len(seen) == len(ds)  # the three roles cover every record


class TestBalancedSampler:
    def test_deterministic_per_seed(self):
        labels = np.array([0, 0, 0, 1, 2, 2])
        s1 = balanced_sampler(labels, 5, 3)
        s2 = balanced_sampler(labels, 5, 3)
        first = [next(s1) for _ in range(100)]
        second = [next(s2) for _ in range(100)]
        assert first == second
        s3 = balanced_sampler(labels, 6, 3)
        assert [next(s3) for _ in range(100)] != first

    def test_respects_include_subset(self):
        labels = np.array([0, 1, 0, 1, 0, 1])
        include = np.array([2, 3, 4, 5])
        stream = balanced_sampler(labels, 0, 2, include=include)
        drawn = {next(stream) for _ in range(200)}
        assert drawn <= set(include.tolist())
        assert drawn >= {2, 3}  # both classes appear

    def test_empty_class_raises_with_name(self):
        labels = np.array([0, 0, 2])
        with pytest.raises(EmptyClassError) as err:
            balanced_sampler(labels, 0, 3, class_names=("a", "b", "c"))
        assert "b" in str(err.value)

    def test_class_frequencies_are_roughly_uniform(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 14, 500)
        stream = balanced_sampler(labels, 1, 14)
        draws = np.fromiter((labels[next(stream)] for _ in range(7_000)),
                            np.int64, count=7_000)
        counts = np.bincount(draws, minlength=14)
        expected = 7_000 / 14
        sigma = math.sqrt(7_000 * (1 / 14) * (13 / 14))
        assert (np.abs(counts - expected) < 4 * sigma).all()

    def test_sample_batch_shape(self):
        labels = np.array([0, 1])
        batch = sample_batch(balanced_sampler(labels, 0, 2), 32)
        assert batch.shape == (32,)
        assert set(batch.tolist()) <= {0, 1}
