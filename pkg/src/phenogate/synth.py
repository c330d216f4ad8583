"""Synthetic slides with planted ground truth.

Nuclei are non-overlapping disks; each gets a class, a gate vector drawn
from that class's enumeration witness set, and per-channel pixel
intensities from a positive or negative normal distribution according to
the vector.  Gating the result at the planted threshold must reproduce
the truth exactly when the noise is zero, which makes these slides the
end-to-end oracle for the whole pipeline.
"""

from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import enumerate_rule_space, evaluate
from .errors import NoWitnessError, PlacementFailureError
from .rulelang import CANONICAL_PANEL, RuleProgram, canonical_table1_program, compile_program
from .slideio import Disease, Site, SlideManifest, ThresholdSet, write_channel, write_mask

_NUCLEAR_MARKER = "DAPI"


@functools.lru_cache(maxsize=4)
def _compiled_and_witnesses(program: RuleProgram):
    compiled = compile_program(program)
    report = enumerate_rule_space(compiled)
    return compiled, report.witnesses


def plant_gate_vector(class_name: str, rng: np.random.Generator,
                      program: RuleProgram | None = None) -> int:
    """Gate word (with the nuclear marker forced positive) for a class.

    Drawn uniformly from the class's witness set, so evaluation always
    lands on exactly that class.
    """
    program = program or canonical_table1_program()
    _, witnesses = _compiled_and_witnesses(program)
    if class_name not in witnesses:
        raise NoWitnessError(class_name)
    pool = witnesses[class_name]
    if len(pool) == 0:
        raise NoWitnessError(class_name)
    bits = int(pool[rng.integers(0, len(pool))])
    names = program.marker_names
    if _NUCLEAR_MARKER in names:
        bits |= 1 << names.index(_NUCLEAR_MARKER)
    return bits


@dataclass(frozen=True)
class SynthSpec:
    width: int = 512
    height: int = 512
    nucleus_count: int = 200
    class_proportions: tuple[float, ...] | None = None  # uniform when None
    radius_min: int = 4
    radius_max: int = 7
    positive_mean: float = 200.0
    positive_std: float = 10.0
    negative_mean: float = 50.0
    negative_std: float = 10.0
    threshold: float = 125.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("radius range must satisfy 0 < min <= max")
        if not self.negative_mean < self.threshold < self.positive_mean:
            raise ValueError("threshold must separate the intensity means")
        if self.positive_std < 0 or self.negative_std < 0:
            raise ValueError("intensity stds must be nonnegative")
        if self.class_proportions is not None:
            p = np.asarray(self.class_proportions)
            if (p < 0).any() or not np.isclose(p.sum(), 1.0):
                raise ValueError("class proportions must be nonnegative and sum to 1")


class TruthTable:
    """Planted nucleus_id -> (class, gate bits)."""

    CSV_HEADER = ("nucleus_id", "class", "gate_bits_hex")

    def __init__(self, nucleus_ids: np.ndarray, classes: Sequence[str],
                 gate_bits: np.ndarray):
        self.nucleus_ids = np.asarray(nucleus_ids, np.int64)
        self.classes = tuple(classes)
        self.gate_bits = np.asarray(gate_bits, np.uint64)

    def __len__(self) -> int:
        return len(self.nucleus_ids)

    def class_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name in self.classes:
            out[name] = out.get(name, 0) + 1
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            for i in range(len(self)):
                writer.writerow([int(self.nucleus_ids[i]), self.classes[i],
                                 format(int(self.gate_bits[i]), "x")])

    @classmethod
    def from_csv(cls, path) -> "TruthTable":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != cls.CSV_HEADER:
                raise ValueError(f"unexpected truth header {header!r}")
            ids, classes, bits = [], [], []
            for nid, cls_name, hexbits in reader:
                ids.append(int(nid))
                classes.append(cls_name)
                bits.append(int(hexbits, 16))
        return cls(np.array(ids, np.int64), classes, np.array(bits, np.uint64))


@dataclass
class SynthSlide:
    spec: SynthSpec
    channels: dict[str, np.ndarray]
    mask: np.ndarray
    truth: TruthTable
    centroids: np.ndarray = field(repr=False)  # (n, 2) planted centers (x, y)


def _place_disks(spec: SynthSpec, rng: np.random.Generator):
    """Non-overlapping (x, y, r) triples via grid-hashed rejection."""
    cell = 2 * spec.radius_max + 1
    grid: dict[tuple[int, int], list[int]] = {}
    xs, ys, rs = [], [], []
    budget = max(1000, spec.nucleus_count * 200)
    attempts = 0
    while len(xs) < spec.nucleus_count:
        if attempts >= budget:
            raise PlacementFailureError(
                f"placed {len(xs)} of {spec.nucleus_count} nuclei "
                f"in {budget} attempts; reduce density")
        attempts += 1
        r = int(rng.integers(spec.radius_min, spec.radius_max + 1))
        if spec.width <= 2 * r or spec.height <= 2 * r:
            raise PlacementFailureError(
                f"radius {r} does not fit a {spec.width}x{spec.height} field")
        x = int(rng.integers(r, spec.width - r))
        y = int(rng.integers(r, spec.height - r))
        cx_cell, cy_cell = x // cell, y // cell
        clash = False
        for gx in range(cx_cell - 1, cx_cell + 2):
            for gy in range(cy_cell - 1, cy_cell + 2):
                for j in grid.get((gx, gy), ()):
                    min_gap = r + rs[j] + 1
                    if (x - xs[j]) ** 2 + (y - ys[j]) ** 2 < min_gap ** 2:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        grid.setdefault((cx_cell, cy_cell), []).append(len(xs))
        xs.append(x)
        ys.append(y)
        rs.append(r)
    return np.array(xs), np.array(ys), np.array(rs)


def generate_synthetic_slide(spec: SynthSpec,
                             program: RuleProgram | None = None,
                             rng: np.random.Generator | None = None) -> SynthSlide:
    """Disk nuclei with planted classes, channels, and an exact truth table."""
    program = program or canonical_table1_program()
    compiled, _ = _compiled_and_witnesses(program)
    panel = program.marker_names
    rng = rng if rng is not None else np.random.default_rng(spec.seed)

    n = spec.nucleus_count
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), np.int32)
    pixel_sets: list[np.ndarray] = []
    if n:
        xs, ys, rs = _place_disks(spec, rng)
        for i in range(n):
            x, y, r = int(xs[i]), int(ys[i]), int(rs[i])
            yy, xx = np.ogrid[-r:r + 1, -r:r + 1]
            disk = (xx * xx + yy * yy) <= r * r
            window = mask[y - r:y + r + 1, x - r:x + r + 1]
            window[disk] = i + 1
            rows, cols = np.nonzero(disk)
            pixel_sets.append((rows + y - r) * w + (cols + x - r))
        centroids = np.stack([xs, ys], axis=1).astype(np.float64)
    else:
        centroids = np.zeros((0, 2))

    class_names = program.classes
    if spec.class_proportions is None:
        drawn = rng.integers(0, len(class_names), size=n)
    else:
        drawn = rng.choice(len(class_names), size=n, p=spec.class_proportions)
    classes = [class_names[c] for c in drawn]
    bits = np.array([plant_gate_vector(name, rng, program) for name in classes],
                    np.uint64)
    for i, name in enumerate(classes):
        outcome = evaluate(compiled, int(bits[i]))
        assert outcome.class_name == name, "witness draw lost its class"

    channels: dict[str, np.ndarray] = {}
    for j, marker in enumerate(panel):
        if spec.negative_std > 0:
            img = rng.normal(spec.negative_mean, spec.negative_std, (h, w))
        else:
            img = np.full((h, w), spec.negative_mean)
        flat = img.reshape(-1)
        for i in range(n):
            if bits[i] >> np.uint64(j) & np.uint64(1):
                px = pixel_sets[i]
                if spec.positive_std > 0:
                    flat[px] = rng.normal(spec.positive_mean, spec.positive_std,
                                          len(px))
                else:
                    flat[px] = spec.positive_mean
        channels[marker] = np.clip(np.rint(img), 0, 65535).astype(np.uint16)

    truth = TruthTable(np.arange(1, n + 1), classes, bits)
    return SynthSlide(spec=spec, channels=channels, mask=mask, truth=truth,
                      centroids=centroids)


def planted_thresholds(spec: SynthSpec, slide_id: str,
                       panel: Sequence[str] = CANONICAL_PANEL) -> ThresholdSet:
    return ThresholdSet(slide_id=slide_id, version=0,
                        thresholds={m: spec.threshold for m in panel})


# --- cohort -----------------------------------------------------------------

@dataclass(frozen=True)
class CohortSpec:
    patient_count: int = 20
    slides_per_patient: int = 1
    microns_per_pixel: float = 0.32
    slide: SynthSpec = SynthSpec()
    seed: int = 0


@dataclass(frozen=True)
class CohortPatient:
    patient_id: str
    site: Site
    disease: Disease


@dataclass(frozen=True)
class CohortSlide:
    slide_id: str
    patient_id: str
    path: str  # slide directory, relative to the cohort root


@dataclass(frozen=True)
class CohortManifest:
    root: Path
    seed: int
    patients: tuple[CohortPatient, ...]
    slides: tuple[CohortSlide, ...]

    def slide_dir(self, slide_id: str) -> Path:
        for s in self.slides:
            if s.slide_id == slide_id:
                return self.root / s.path
        raise KeyError(slide_id)

    def patient_infos(self):
        from .patches import PatientInfo
        by_id: dict[str, tuple[set, set]] = {}
        for p in self.patients:
            sites, diseases = by_id.setdefault(p.patient_id, (set(), set()))
            sites.add(p.site)
            diseases.add(p.disease)
        return [PatientInfo(pid, frozenset(s), frozenset(d))
                for pid, (s, d) in sorted(by_id.items())]

    @classmethod
    def from_json(cls, path) -> "CohortManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            root=path.parent,
            seed=int(doc["seed"]),
            patients=tuple(CohortPatient(p["patient_id"], Site(p["site"]),
                                         Disease(p["disease"]))
                           for p in doc["patients"]),
            slides=tuple(CohortSlide(s["slide_id"], s["patient_id"], s["path"])
                         for s in doc["slides"]),
        )

    def to_json(self, path) -> None:
        doc = {
            "seed": self.seed,
            "patients": [
                {"patient_id": p.patient_id, "site": p.site.value,
                 "disease": p.disease.value}
                for p in self.patients
            ],
            "slides": [
                {"slide_id": s.slide_id, "patient_id": s.patient_id, "path": s.path}
                for s in self.slides
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def write_synthetic_slide(slide_dir: Path, slide_id: str, patient_id: str,
                          site: Site, disease: Disease, mpp: float,
                          slide: SynthSlide) -> SlideManifest:
    """Slide directory with channels, mask, manifest, truth, thresholds."""
    slide_dir = Path(slide_dir)
    chan_dir = slide_dir / "channels"
    chan_dir.mkdir(parents=True, exist_ok=True)
    channels = []
    for marker, img in slide.channels.items():
        path = chan_dir / f"{marker}.tiff"
        write_channel(path, img)
        channels.append((marker, path))
    mask_path = slide_dir / "mask.tiff"
    write_mask(mask_path, slide.mask)
    manifest = SlideManifest(
        slide_id=slide_id,
        patient_id=patient_id,
        site=site,
        disease=disease,
        microns_per_pixel=mpp,
        channels=tuple(channels),
        mask_path=mask_path,
    )
    manifest.to_json(slide_dir / "manifest.json")
    slide.truth.to_csv(slide_dir / "truth.csv")
    panel = tuple(slide.channels)
    planted_thresholds(slide.spec, slide_id, panel).to_json(
        slide_dir / "thresholds.json")
    return manifest


def generate_synthetic_cohort(out_dir, spec: CohortSpec,
                              program: RuleProgram | None = None) -> CohortManifest:
    """Per-patient slides alternating sites and cycling disease statuses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sites = (Site.ASCENDING_COLON, Site.TERMINAL_ILEUM)
    diseases = (Disease.NORMAL, Disease.INACTIVE_CD, Disease.ACTIVE_CD)
    n_slides = spec.patient_count * spec.slides_per_patient
    children = np.random.SeedSequence(spec.seed).spawn(n_slides)

    patients = []
    slides = []
    k = 0
    for i in range(spec.patient_count):
        patient_id = f"P{i + 1:02d}"
        site = sites[i % 2]
        disease = diseases[i % 3]
        patients.append(CohortPatient(patient_id, site, disease))
        for j in range(spec.slides_per_patient):
            slide_id = f"{patient_id}_s{j + 1}"
            child_seed = int(children[k].generate_state(1, np.uint64)[0])
            k += 1
            slide_spec = replace(spec.slide, seed=child_seed)
            slide = generate_synthetic_slide(slide_spec, program)
            rel = Path("slides") / slide_id
            write_synthetic_slide(out_dir / rel, slide_id, patient_id, site,
                                  disease, spec.microns_per_pixel, slide)
            slides.append(CohortSlide(slide_id, patient_id, rel.as_posix()))

    manifest = CohortManifest(root=out_dir, seed=spec.seed,
                              patients=tuple(patients), slides=tuple(slides))
    manifest.to_json(out_dir / "cohort.json")
    return manifest
