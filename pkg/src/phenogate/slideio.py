"""Slide loading and per-nucleus feature extraction.

A slide is a set of single-channel 16-bit grayscale TIFFs (one per
marker) plus a 32-bit instance mask whose nonzero ids are nuclei.  The
features computed here — centroid, area, per-channel mean intensity —
are the only inputs the gating cascade needs, so downstream stages never
touch pixels again.

Intensity sums accumulate in integers (exactly representable in float64
bincounts, then cast) so results are independent of pixel visitation
order and thread count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    DimensionMismatchError,
    EmptyMaskError,
    SlideIOError,
)

Image.MAX_IMAGE_PIXELS = None  # whole-slide images exceed the default bomb guard


class Site(Enum):
    ASCENDING_COLON = "ascending-colon"
    TERMINAL_ILEUM = "terminal-ileum"


class Disease(Enum):
    NORMAL = "normal"
    INACTIVE_CD = "inactive-cd"
    ACTIVE_CD = "active-cd"


#: Disease values grouped as "diseased" for stratification purposes.
DISEASED = frozenset({Disease.INACTIVE_CD, Disease.ACTIVE_CD})


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    patient_id: str
    site: Site
    disease: Disease
    microns_per_pixel: float
    channels: tuple[tuple[str, Path], ...]  # (marker, image path) in panel order
    mask_path: Path

    def __post_init__(self):
        if self.microns_per_pixel <= 0:
            raise SlideIOError(f"slide {self.slide_id}: microns_per_pixel must be positive")
        names = [m for m, _ in self.channels]
        if len(set(names)) != len(names):
            raise SlideIOError(f"slide {self.slide_id}: duplicate channel marker")

    @property
    def marker_names(self) -> tuple[str, ...]:
        return tuple(m for m, _ in self.channels)

    def channel_path(self, marker: str) -> Path:
        for name, path in self.channels:
            if name == marker:
                return path
        raise KeyError(marker)

    @classmethod
    def from_json(cls, path) -> "SlideManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise SlideIOError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SlideIOError(f"malformed manifest {path}: {exc}") from None
        base = path.parent
        try:
            return cls(
                slide_id=doc["slide_id"],
                patient_id=doc["patient_id"],
                site=Site(doc["site"]),
                disease=Disease(doc["disease"]),
                microns_per_pixel=float(doc["microns_per_pixel"]),
                channels=tuple((c["marker"], base / c["path"]) for c in doc["channels"]),
                mask_path=base / doc["mask_path"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SlideIOError(f"malformed manifest {path}: {exc}") from None

    def to_json(self, path) -> None:
        path = Path(path)
        base = path.parent
        doc = {
            "slide_id": self.slide_id,
            "patient_id": self.patient_id,
            "site": self.site.value,
            "disease": self.disease.value,
            "microns_per_pixel": self.microns_per_pixel,
            "channels": [
                {"marker": m, "path": _relative_to(p, base)} for m, p in self.channels
            ],
            "mask_path": _relative_to(self.mask_path, base),
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _relative_to(target: Path, base: Path) -> str:
    try:
        return Path(target).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return Path(target).as_posix()


@dataclass(frozen=True)
class ThresholdSet:
    """Per-marker gating thresholds for one slide, with a write version."""

    slide_id: str
    version: int
    thresholds: dict[str, float]

    def __post_init__(self):
        for marker, value in self.thresholds.items():
            if value < 0:
                raise ValueError(f"threshold for {marker} must be nonnegative")

    def with_updates(self, updates: dict[str, float]) -> "ThresholdSet":
        merged = dict(self.thresholds)
        merged.update(updates)
        return replace(self, version=self.version + 1, thresholds=merged)

    @classmethod
    def from_json(cls, path) -> "ThresholdSet":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise SlideIOError(f"threshold file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SlideIOError(f"malformed threshold file {path}: {exc}") from None
        try:
            return cls(
                slide_id=doc["slide_id"],
                version=int(doc["version"]),
                thresholds={k: float(v) for k, v in doc["thresholds"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SlideIOError(f"malformed threshold file {path}: {exc}") from None

    def to_json(self, path) -> None:
        doc = {
            "slide_id": self.slide_id,
            "version": self.version,
            "thresholds": self.thresholds,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class NucleusRecord:
    nucleus_id: int
    cx: float
    cy: float
    area: int
    means: dict[str, float]


class NucleusTable:
    """Per-nucleus features in nucleus-id order, one row per nucleus."""

    def __init__(self, marker_names: Sequence[str], nucleus_ids: np.ndarray,
                 cx: np.ndarray, cy: np.ndarray, area: np.ndarray,
                 means: np.ndarray, channel_sums: np.ndarray | None = None):
        self.marker_names = tuple(marker_names)
        self.nucleus_ids = np.asarray(nucleus_ids, np.int64)
        self.cx = np.asarray(cx, np.float64)
        self.cy = np.asarray(cy, np.float64)
        self.area = np.asarray(area, np.int64)
        self.means = np.asarray(means, np.float64)
        self.channel_sums = channel_sums  # exact int64 sums when freshly computed
        if self.means.shape != (len(self.nucleus_ids), len(self.marker_names)):
            raise ValueError("means matrix shape disagrees with ids/markers")

    def __len__(self) -> int:
        return len(self.nucleus_ids)

    def mean_matrix(self, markers: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """(ids, means) with columns reordered to the requested markers."""
        cols = [self.marker_names.index(m) for m in markers]
        return self.nucleus_ids, self.means[:, cols]

    def records(self) -> Iterable[NucleusRecord]:
        for i in range(len(self)):
            yield NucleusRecord(
                nucleus_id=int(self.nucleus_ids[i]),
                cx=float(self.cx[i]),
                cy=float(self.cy[i]),
                area=int(self.area[i]),
                means={m: float(self.means[i, j])
                       for j, m in enumerate(self.marker_names)},
            )

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(("nucleus_id", "cx", "cy", "area") + self.marker_names))
            fh.write("\n")
            for i in range(len(self)):
                row = [str(int(self.nucleus_ids[i])), repr(float(self.cx[i])),
                       repr(float(self.cy[i])), str(int(self.area[i]))]
                row.extend(repr(float(v)) for v in self.means[i])
                fh.write(",".join(row))
                fh.write("\n")

    @classmethod
    def from_csv(cls, path) -> "NucleusTable":
        path = Path(path)
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                header = fh.readline().rstrip("\n").split(",")
                if header[:4] != ["nucleus_id", "cx", "cy", "area"]:
                    raise SlideIOError(f"unexpected feature header in {path}")
                markers = tuple(header[4:])
                ids, cxs, cys, areas, means = [], [], [], [], []
                for line in fh:
                    parts = line.rstrip("\n").split(",")
                    ids.append(int(parts[0]))
                    cxs.append(float(parts[1]))
                    cys.append(float(parts[2]))
                    areas.append(int(parts[3]))
                    means.append([float(v) for v in parts[4:]])
        except FileNotFoundError:
            raise SlideIOError(f"feature file not found: {path}") from None
        n = len(ids)
        return cls(markers, np.array(ids, np.int64), np.array(cxs), np.array(cys),
                   np.array(areas, np.int64),
                   np.array(means, np.float64).reshape(n, len(markers)))


# --- image io ---------------------------------------------------------------

def _read_image(path: Path, what: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError:
        raise SlideIOError(f"{what} image not found: {path}") from None
    except UnidentifiedImageError:
        raise DecodeError(f"cannot decode {what} image: {path}") from None
    if arr.ndim != 2:
        raise DecodeError(f"{what} image {path} is not single-channel")
    return arr


def read_channel(path) -> np.ndarray:
    """One marker channel as uint16 (H, W)."""
    arr = _read_image(Path(path), "channel")
    if arr.dtype not in (np.uint8, np.uint16, np.int32):
        raise DecodeError(f"channel image {path} has unsupported dtype {arr.dtype}")
    if arr.dtype == np.int32 and (arr.min() < 0 or arr.max() > 65535):
        raise DecodeError(f"channel image {path} exceeds 16-bit range")
    return arr.astype(np.uint16, copy=False)


def read_mask(path) -> np.ndarray:
    """Instance mask as int32 (H, W); 0 is background."""
    arr = _read_image(Path(path), "mask")
    if arr.dtype not in (np.uint8, np.uint16, np.int32):
        raise DecodeError(f"mask image {path} has unsupported dtype {arr.dtype}")
    arr = arr.astype(np.int32, copy=False)
    if arr.size and arr.min() < 0:
        raise DecodeError(f"mask image {path} contains negative ids")
    return arr


def write_channel(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, np.uint16)
    Image.fromarray(arr).save(path, format="TIFF")  # stored as 16-bit grayscale


def write_mask(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels, np.int32)
    if arr.size and arr.min() < 0:
        raise ValueError("mask ids must be nonnegative")
    Image.fromarray(arr).save(path, format="TIFF")  # stored as 32-bit integer


def load_slide(manifest: SlideManifest) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """All channel images plus the mask, dimension-checked."""
    mask = read_mask(manifest.mask_path)
    channels: dict[str, np.ndarray] = {}
    for marker, path in manifest.channels:
        arr = read_channel(path)
        if arr.shape != mask.shape:
            raise DimensionMismatchError(
                f"channel {marker}: shape {arr.shape} does not match mask {mask.shape}")
        channels[marker] = arr
    return channels, mask


# --- feature extraction -----------------------------------------------------

def compute_nucleus_features(channels: dict[str, np.ndarray], mask: np.ndarray,
                             threads: int = 1) -> NucleusTable:
    """Centroid, area, and exact per-channel mean for every mask id.

    Records come back sorted by nucleus id.  Channel sums use float64
    bincount, exact for integer data below 2^53, then cast to int64.
    """
    for marker, arr in channels.items():
        if arr.shape != mask.shape:
            raise DimensionMismatchError(
                f"channel {marker}: shape {arr.shape} does not match mask {mask.shape}")
    flat = mask.ravel()
    sel = np.flatnonzero(flat)
    if sel.size == 0:
        raise EmptyMaskError("mask contains no nonzero ids")
    ids = np.unique(flat[sel])
    comp = np.searchsorted(ids, flat[sel])
    n = len(ids)
    area = np.bincount(comp, minlength=n).astype(np.int64)
    width = mask.shape[1]
    xs = (sel % width).astype(np.float64)
    ys = (sel // width).astype(np.float64)
    cx = np.bincount(comp, weights=xs, minlength=n) / area
    cy = np.bincount(comp, weights=ys, minlength=n) / area

    marker_names = tuple(channels)

    def channel_sum(marker: str) -> np.ndarray:
        vals = channels[marker].ravel()[sel].astype(np.float64)
        return np.bincount(comp, weights=vals, minlength=n).astype(np.int64)

    if threads > 1 and len(marker_names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sums = list(pool.map(channel_sum, marker_names))
    else:
        sums = [channel_sum(m) for m in marker_names]
    channel_sums = np.stack(sums, axis=1) if sums else np.zeros((n, 0), np.int64)
    means = channel_sums / area[:, None]
    return NucleusTable(marker_names, ids.astype(np.int64), cx, cy, area, means,
                        channel_sums=channel_sums)


# --- threshold suggestion ---------------------------------------------------

def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Split point maximizing inter-class variance on a binned histogram.

    Ties along a flat optimum plateau resolve to the plateau middle.
    """
    values = np.asarray(values, np.float64)
    hist, edges = np.histogram(values, bins=bins)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    centers = (edges[:-1] + edges[1:]) / 2
    cum_mean = np.cumsum(hist * centers)
    grand = cum_mean[-1]
    # between-class variance for a cut after each bin; last cut is void
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_mean / w0
        mu1 = (grand - cum_mean) / w1
        sigma_b = w0 * w1 * (mu0 - mu1) ** 2
    sigma_b = np.nan_to_num(sigma_b[:-1], nan=-1.0)
    best = np.flatnonzero(sigma_b == sigma_b.max())
    cut = int(best[(len(best) - 1) // 2])
    return float(edges[cut + 1])


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """p-th percentile by the nearest-rank rule (rank = ceil(p/100 · n))."""
    values = np.sort(np.asarray(values, np.float64))
    if not 0 <= p <= 100:
        raise ValueError("percentile must be in [0, 100]")
    rank = int(np.ceil(p / 100 * len(values)))
    return float(values[max(rank, 1) - 1])


def suggest_thresholds(features: NucleusTable, method: str = "otsu",
                       p: float = 50.0, slide_id: str = "",
                       version: int = 0) -> ThresholdSet:
    """Per-marker starting thresholds over per-nucleus mean intensities."""
    if len(features) == 0:
        raise EmptyMaskError("cannot suggest thresholds without nuclei")
    out: dict[str, float] = {}
    for j, marker in enumerate(features.marker_names):
        col = features.means[:, j]
        if method == "otsu":
            out[marker] = otsu_threshold(col)
        elif method == "percentile":
            out[marker] = nearest_rank_percentile(col, p)
        else:
            raise ValueError(f"unknown threshold method {method!r}")
    return ThresholdSet(slide_id=slide_id, version=version, thresholds=out)
