"""Patch dataset construction: extraction, storage, folds, and sampling.

Every assigned nucleus becomes a 41x41 RGB patch cut from the rendered
H&E image after conceptual resampling to 0.5 um/px.  Patches live in a
flat little-endian record file ("NUCP") with 8-bit pixels that are
normalized back to [0, 1] on load; fold assignment happens at the
patient level with site and disease stratification.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .engine import CODE_ASSIGNED, LabelTable
from .errors import (
    DecodeError,
    EmptyClassError,
    LabelTableMismatchError,
    MissingImageError,
    OutOfBoundsError,
    UnsatisfiableError,
)
from .slideio import DISEASED, Disease, NucleusTable, Site, SlideManifest

PATCH_SIZE = 41
PATCH_HALF = PATCH_SIZE // 2
TARGET_MPP = 0.5
FEATURE_DIM = PATCH_SIZE * PATCH_SIZE * 3  # 5043

MAGIC = b"NUCP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIB")  # magic, version, record count, class count

RECORD_DTYPE = np.dtype([
    ("slide_idx", "<u2"),
    ("nucleus_id", "<u4"),
    ("label", "u1"),
    ("flags", "u1"),
    ("pixels", "u1", (FEATURE_DIM,)),
])

FLAG_EDGE_PADDED = 0x01


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # (41, 41, 3) float64 in [0, 1]
    label: int = -1
    nucleus_id: int = 0
    slide_id: str = ""
    edge_padded: bool = False


def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample (H, W, 3) at real coordinates with edge clamping."""
    h, w = image.shape[:2]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    img = image.astype(np.float64, copy=False)
    v00 = img[y0c, x0c]
    v01 = img[y0c, x1c]
    v10 = img[y1c, x0c]
    v11 = img[y1c, x1c]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def extract_patch(image: np.ndarray, centroid: tuple[float, float],
                  source_mpp: float, label: int = -1, nucleus_id: int = 0,
                  slide_id: str = "") -> Patch:
    """Nucleus-centered 41x41 patch at 0.5 um/px from a source-resolution image.

    The image is conceptually rescaled by s = source_mpp / 0.5; the window
    centers on the mapped centroid rounded to the nearest target pixel
    (ties toward negative infinity).  Samples falling outside the source
    are produced by edge replication and flagged.
    """
    if source_mpp <= 0:
        raise ValueError("source_mpp must be positive")
    h, w = image.shape[:2]
    cx, cy = centroid
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise OutOfBoundsError(
            f"centroid ({cx}, {cy}) outside image {w}x{h}")
    scale = source_mpp / TARGET_MPP
    tx = math.ceil(cx * scale - 0.5)
    ty = math.ceil(cy * scale - 0.5)
    grid = np.arange(-PATCH_HALF, PATCH_HALF + 1)
    xs = (tx + grid)[None, :] / scale
    ys = (ty + grid)[:, None] / scale
    edge_padded = bool(xs.min() < 0 or xs.max() > w - 1
                       or ys.min() < 0 or ys.max() > h - 1)
    xs_full = np.broadcast_to(xs, (PATCH_SIZE, PATCH_SIZE))
    ys_full = np.broadcast_to(ys, (PATCH_SIZE, PATCH_SIZE))
    values = _bilinear(image, xs_full, ys_full) / 255.0
    return Patch(pixels=values, label=label, nucleus_id=nucleus_id,
                 slide_id=slide_id, edge_padded=edge_padded)


# --- record file ------------------------------------------------------------

class RecordFileWriter:
    """Streams records; the header count is patched on close."""

    def __init__(self, path, class_count: int):
        self.path = Path(path)
        self.class_count = class_count
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0, class_count))

    def write(self, slide_idx: int, nucleus_id: int, label: int,
              edge_padded: bool, pixels01: np.ndarray) -> None:
        rec = np.zeros((), RECORD_DTYPE)
        rec["slide_idx"] = slide_idx
        rec["nucleus_id"] = nucleus_id
        rec["label"] = label
        rec["flags"] = FLAG_EDGE_PADDED if edge_padded else 0
        rec["pixels"] = np.rint(np.asarray(pixels01).reshape(-1) * 255.0).astype(np.uint8)
        self._fh.write(rec.tobytes())
        self.count += 1

    def close(self) -> None:
        self._fh.seek(6)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PatchDataset:
    """Loaded record file; pixels normalize to [0, 1] on access."""

    def __init__(self, data: np.ndarray, class_count: int, path: Path | None = None):
        self.data = data
        self.class_count = class_count
        self.path = path

    @classmethod
    def open(cls, path) -> "PatchDataset":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DecodeError(f"{path}: truncated record file header")
        magic, version, count, class_count = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DecodeError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DecodeError(f"{path}: unsupported version {version}")
        expected = _HEADER.size + count * RECORD_DTYPE.itemsize
        if len(raw) != expected:
            raise DecodeError(
                f"{path}: size {len(raw)} does not match {count} records ({expected})")
        data = np.frombuffer(raw, RECORD_DTYPE, count=count, offset=_HEADER.size)
        return cls(data, class_count, path)

    @classmethod
    def from_arrays(cls, pixels01: np.ndarray, labels: Sequence[int],
                    class_count: int, slide_idx: Sequence[int] | None = None,
                    nucleus_ids: Sequence[int] | None = None) -> "PatchDataset":
        pixels01 = np.asarray(pixels01, np.float64)
        n = len(pixels01)
        if pixels01.shape[1:] not in ((PATCH_SIZE, PATCH_SIZE, 3), (FEATURE_DIM,)):
            raise ValueError(f"unexpected pixel shape {pixels01.shape}")
        if pixels01.min() < 0 or pixels01.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        data = np.zeros(n, RECORD_DTYPE)
        data["pixels"] = np.rint(pixels01.reshape(n, -1) * 255.0).astype(np.uint8)
        data["label"] = np.asarray(labels, np.uint8)
        data["slide_idx"] = 0 if slide_idx is None else np.asarray(slide_idx)
        data["nucleus_id"] = (np.arange(n) if nucleus_ids is None
                              else np.asarray(nucleus_ids))
        return cls(data, class_count)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def labels(self) -> np.ndarray:
        return self.data["label"]

    @property
    def slide_idx(self) -> np.ndarray:
        return self.data["slide_idx"]

    @property
    def nucleus_ids(self) -> np.ndarray:
        return self.data["nucleus_id"]

    @property
    def edge_padded(self) -> np.ndarray:
        return (self.data["flags"] & FLAG_EDGE_PADDED) != 0

    def patch(self, i: int) -> Patch:
        rec = self.data[i]
        return Patch(
            pixels=rec["pixels"].reshape(PATCH_SIZE, PATCH_SIZE, 3) / 255.0,
            label=int(rec["label"]),
            nucleus_id=int(rec["nucleus_id"]),
            edge_padded=bool(rec["flags"] & FLAG_EDGE_PADDED),
        )

    def features(self, indices=None) -> np.ndarray:
        """Flat (n, 5043) float64 features in [0, 1]."""
        rows = self.data["pixels"] if indices is None else self.data["pixels"][indices]
        return rows / 255.0

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# --- dataset build ----------------------------------------------------------

@dataclass(frozen=True)
class SlideProvenance:
    index: int
    slide_id: str
    patient_id: str
    count: int


@dataclass(frozen=True)
class DatasetManifest:
    record_file: str
    class_names: tuple[str, ...]
    class_counts: dict[str, int]
    slides: tuple[SlideProvenance, ...]
    source_mpp: float
    target_mpp: float = TARGET_MPP
    fold_plan: str | None = None

    def __post_init__(self):
        total = sum(self.class_counts.values())
        per_slide = sum(s.count for s in self.slides)
        if self.slides and total != per_slide:
            raise ValueError(
                f"class counts sum to {total} but slide counts to {per_slide}")

    @property
    def record_count(self) -> int:
        return sum(self.class_counts.values())

    def patient_of_slide_idx(self) -> dict[int, str]:
        return {s.index: s.patient_id for s in self.slides}

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            record_file=doc["record_file"],
            class_names=tuple(doc["class_names"]),
            class_counts={k: int(v) for k, v in doc["class_counts"].items()},
            slides=tuple(SlideProvenance(int(s["index"]), s["slide_id"],
                                         s["patient_id"], int(s["count"]))
                         for s in doc["slides"]),
            source_mpp=float(doc["source_mpp"]),
            target_mpp=float(doc.get("target_mpp", TARGET_MPP)),
            fold_plan=doc.get("fold_plan"),
        )

    def to_json(self, path) -> None:
        doc = {
            "record_file": self.record_file,
            "class_names": list(self.class_names),
            "class_counts": self.class_counts,
            "slides": [
                {"index": s.index, "slide_id": s.slide_id,
                 "patient_id": s.patient_id, "count": s.count}
                for s in self.slides
            ],
            "source_mpp": self.source_mpp,
            "target_mpp": self.target_mpp,
            "fold_plan": self.fold_plan,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SlideInput:
    manifest: SlideManifest
    features: NucleusTable
    labels: LabelTable
    he_image: np.ndarray | None  # rendered RGB at slide resolution


def build_dataset(slides: Sequence[SlideInput], record_path,
                  fold_plan_ref: str | None = None) -> DatasetManifest:
    """Extract one record per assigned nucleus across the given slides.

    Slide order defines the stored slide index; nuclei are written in
    nucleus-id order within each slide.
    """
    record_path = Path(record_path)
    class_names: tuple[str, ...] | None = None
    source_mpp: float | None = None
    for s in slides:
        if class_names is None:
            class_names = s.labels.class_names
            source_mpp = s.manifest.microns_per_pixel
        elif s.labels.class_names != class_names:
            raise LabelTableMismatchError(
                f"slide {s.manifest.slide_id}: class list differs across slides")
    if class_names is None:
        raise ValueError("no slides given")

    counts = np.zeros(len(class_names), np.int64)
    provenance = []
    with RecordFileWriter(record_path, len(class_names)) as writer:
        for slide_idx, s in enumerate(slides):
            if s.he_image is None:
                raise MissingImageError(s.manifest.slide_id)
            feat_pos = {int(n): i for i, n in enumerate(s.features.nucleus_ids)}
            missing = [int(n) for n in s.labels.nucleus_ids if int(n) not in feat_pos]
            if missing:
                raise LabelTableMismatchError(
                    f"slide {s.manifest.slide_id}: label table ids "
                    f"{missing[:5]} absent from features")
            written = 0
            order = np.argsort(s.labels.nucleus_ids, kind="stable")
            for row in order:
                if s.labels.outcomes.codes[row] != CODE_ASSIGNED:
                    continue
                nid = int(s.labels.nucleus_ids[row])
                fi = feat_pos[nid]
                patch = extract_patch(
                    s.he_image,
                    (float(s.features.cx[fi]), float(s.features.cy[fi])),
                    s.manifest.microns_per_pixel,
                )
                label = int(s.labels.outcomes.class_idx[row])
                writer.write(slide_idx, nid, label, patch.edge_padded, patch.pixels)
                counts[label] += 1
                written += 1
            provenance.append(SlideProvenance(
                slide_idx, s.manifest.slide_id, s.manifest.patient_id, written))
    return DatasetManifest(
        record_file=record_path.name,
        class_names=class_names,
        class_counts={name: int(c) for name, c in zip(class_names, counts)},
        slides=tuple(provenance),
        source_mpp=float(source_mpp),
        fold_plan=fold_plan_ref,
    )


# --- fold planning ----------------------------------------------------------

@dataclass(frozen=True)
class PatientInfo:
    patient_id: str
    sites: frozenset[Site]
    diseases: frozenset[Disease]


@dataclass(frozen=True)
class FoldAssignment:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[FoldAssignment, ...]

    @classmethod
    def from_json(cls, path) -> "FoldPlan":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            k=int(doc["k"]),
            seed=int(doc["seed"]),
            folds=tuple(FoldAssignment(tuple(f["train"]), tuple(f["val"]),
                                       tuple(f["test"])) for f in doc["folds"]),
        )

    def to_json(self, path) -> None:
        doc = {
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {"train": list(f.train), "val": list(f.val), "test": list(f.test)}
                for f in self.folds
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    def role_patients(self, fold: int, role: str) -> tuple[str, ...]:
        return getattr(self.folds[fold], role)


def _covers_strata(patients: Iterable[PatientInfo]) -> bool:
    sites: set[Site] = set()
    normal = diseased = False
    for p in patients:
        sites |= p.sites
        if Disease.NORMAL in p.diseases:
            normal = True
        if p.diseases & DISEASED:
            diseased = True
    return sites >= {Site.ASCENDING_COLON, Site.TERMINAL_ILEUM} and normal and diseased


def validate_fold_plan(plan: FoldPlan, patients: Sequence[PatientInfo],
                       sizes: tuple[int, int, int] = (12, 4, 4)) -> list[str]:
    """All constraint violations, empty when the plan is valid."""
    by_id = {p.patient_id: p for p in patients}
    problems = []
    all_ids = set(by_id)
    tested: list[str] = []
    for i, fold in enumerate(plan.folds):
        train, val, test = set(fold.train), set(fold.val), set(fold.test)
        if (len(fold.train), len(fold.val), len(fold.test)) != sizes:
            problems.append(f"fold {i}: sizes {len(train)}/{len(val)}/{len(test)}")
        if train & val or train & test or val & test:
            problems.append(f"fold {i}: overlapping role sets")
        if train | val | test != all_ids:
            problems.append(f"fold {i}: does not cover every patient")
        tested.extend(fold.test)
        for role, members in (("train", train), ("val", val), ("test", test)):
            if not _covers_strata(by_id[pid] for pid in members if pid in by_id):
                problems.append(f"fold {i}: {role} set misses a site or disease stratum")
    if sorted(tested) != sorted(all_ids):
        problems.append("test sets do not partition the patients")
    return problems


def make_folds(patients: Sequence[PatientInfo], seed: int, k: int = 5,
               sizes: tuple[int, int, int] = (12, 4, 4),
               max_attempts: int = 10_000) -> FoldPlan:
    """Rejection-sample seeded shuffles until all fold constraints hold."""
    train_n, val_n, test_n = sizes
    n = len(patients)
    if n != k * test_n or train_n + val_n + test_n != n:
        raise UnsatisfiableError(
            f"{n} patients cannot split into {k} folds of {train_n}/{val_n}/{test_n}")
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != n:
        raise UnsatisfiableError("duplicate patient ids")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        perm = rng.permutation(n)
        folds = []
        for i in range(k):
            test_idx = perm[i * test_n:(i + 1) * test_n]
            rest = np.concatenate([perm[:i * test_n], perm[(i + 1) * test_n:]])
            rest = rest[rng.permutation(len(rest))]
            val_idx = rest[:val_n]
            train_idx = rest[val_n:]
            folds.append(FoldAssignment(
                train=tuple(sorted(ids[j] for j in train_idx)),
                val=tuple(sorted(ids[j] for j in val_idx)),
                test=tuple(sorted(ids[j] for j in test_idx)),
            ))
        plan = FoldPlan(k=k, seed=seed, folds=tuple(folds))
        if not validate_fold_plan(plan, patients, sizes):
            return plan
    raise UnsatisfiableError(
        f"no valid fold plan within {max_attempts} attempts (seed {seed})")


# --- sampling ---------------------------------------------------------------

def subset_indices(dataset: PatchDataset, manifest: DatasetManifest,
                   plan: FoldPlan, fold: int, role: str) -> np.ndarray:
    """Record indices whose slide's patient belongs to (fold, role)."""
    wanted = set(plan.role_patients(fold, role))
    patient_of = manifest.patient_of_slide_idx()
    slide_ok = np.array([patient_of.get(int(si)) in wanted
                         for si in dataset.slide_idx])
    return np.flatnonzero(slide_ok)


def balanced_sampler(labels: np.ndarray, seed: int, class_count: int,
                     include: np.ndarray | None = None,
                     class_names: Sequence[str] | None = None,
                     block: int = 4096) -> Iterator[int]:
    """Infinite record-index stream: uniform class, then uniform record.

    Indices are global into ``labels``; ``include`` restricts the pool.
    The stream is a pure function of the seed.
    """
    labels = np.asarray(labels)
    pool = np.arange(len(labels)) if include is None else np.asarray(include)
    buckets = [pool[labels[pool] == c] for c in range(class_count)]
    for c, bucket in enumerate(buckets):
        if len(bucket) == 0:
            name = class_names[c] if class_names else str(c)
            raise EmptyClassError(name)
    sizes = np.array([len(b) for b in buckets])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(buckets)

    def stream() -> Iterator[int]:
        rng = np.random.default_rng(seed)
        while True:
            cls = rng.integers(0, class_count, size=block)
            pos = rng.integers(0, sizes[cls])
            for idx in flat[offsets[cls] + pos]:
                yield int(idx)

    return stream()


def sample_batch(stream: Iterator[int], batch_size: int) -> np.ndarray:
    return np.fromiter((next(stream) for _ in range(batch_size)), np.int64,
                       count=batch_size)
