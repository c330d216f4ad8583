"""Deterministic H&E-style RGB rendering from marker channels.

Two virtual stains (hematoxylin and eosin) are built as weighted channel
mixes, normalized to [0, 1] absorbance, and converted to RGB through
Beer-Lambert attenuation with fixed optical-density triples.  Nuclear
channels land blue-violet, the rest pink, on a white background — enough
for the patch pipeline to operate on plausible imagery without a learned
style model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatchError, MissingChannelError

OD_HEMATOXYLIN = (0.65, 0.704, 0.286)
OD_EOSIN = (0.07, 0.99, 0.11)
DEFAULT_GAIN = 2.0
NORM_PERCENTILE = 99.0  # per-stain normalization point; robust to hot pixels


@dataclass(frozen=True)
class StainMixSpec:
    hematoxylin: dict[str, float]
    eosin: dict[str, float]
    od_hematoxylin: tuple[float, float, float] = OD_HEMATOXYLIN
    od_eosin: tuple[float, float, float] = OD_EOSIN
    gain: float = DEFAULT_GAIN

    def __post_init__(self):
        for name, weights in (("hematoxylin", self.hematoxylin), ("eosin", self.eosin)):
            if any(w < 0 for w in weights.values()):
                raise ValueError(f"{name} weights must be nonnegative")
            if not any(w > 0 for w in weights.values()):
                raise ValueError(f"{name} needs at least one positive weight")
        if any(v < 0 for v in self.od_hematoxylin + self.od_eosin):
            raise ValueError("optical densities must be nonnegative")
        if self.gain <= 0:
            raise ValueError("gain must be positive")

    @classmethod
    def default(cls, markers, nuclear_marker: str = "DAPI") -> "StainMixSpec":
        """Nuclear marker as hematoxylin; every other marker as eosin."""
        markers = list(markers)
        if nuclear_marker not in markers:
            nuclear_marker = markers[0]
        eosin = {m: 1.0 for m in markers if m != nuclear_marker}
        if not eosin:
            eosin = {nuclear_marker: 1.0}
        return cls(hematoxylin={nuclear_marker: 1.0}, eosin=eosin)

    @classmethod
    def from_json(cls, path) -> "StainMixSpec":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            hematoxylin={k: float(v) for k, v in doc["hematoxylin"].items()},
            eosin={k: float(v) for k, v in doc["eosin"].items()},
            od_hematoxylin=tuple(doc.get("od_hematoxylin", OD_HEMATOXYLIN)),
            od_eosin=tuple(doc.get("od_eosin", OD_EOSIN)),
            gain=float(doc.get("gain", DEFAULT_GAIN)),
        )

    def to_json(self, path) -> None:
        doc = {
            "hematoxylin": self.hematoxylin,
            "eosin": self.eosin,
            "od_hematoxylin": list(self.od_hematoxylin),
            "od_eosin": list(self.od_eosin),
            "gain": self.gain,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _stain_absorbance(channels: dict[str, np.ndarray],
                      weights: dict[str, float]) -> np.ndarray:
    mix = None
    for marker, weight in weights.items():
        if marker not in channels:
            raise MissingChannelError(marker)
        term = channels[marker].astype(np.float64) * weight
        mix = term if mix is None else mix + term
    scale = np.percentile(mix, NORM_PERCENTILE)
    if scale <= 0:
        return np.zeros_like(mix)
    return np.clip(mix / scale, 0.0, 1.0)


def render_pseudo_he(channels: dict[str, np.ndarray],
                     spec: StainMixSpec) -> np.ndarray:
    """8-bit RGB image via Beer-Lambert mixing of two virtual stains."""
    shapes = {arr.shape for arr in channels.values()}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"channel shapes differ: {sorted(shapes)}")
    a_h = _stain_absorbance(channels, spec.hematoxylin)
    a_e = _stain_absorbance(channels, spec.eosin)
    rgb = np.empty(a_h.shape + (3,), np.uint8)
    for c in range(3):
        attenuation = np.exp(-spec.gain * (a_h * spec.od_hematoxylin[c]
                                           + a_e * spec.od_eosin[c]))
        rgb[..., c] = np.rint(255.0 * attenuation).astype(np.uint8)
    return rgb


def write_rgb(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image; format follows the suffix."""
    suffix = Path(path).suffix.lower()
    fmt = {"png": "PNG", "tif": "TIFF", "tiff": "TIFF"}.get(suffix.lstrip("."))
    if fmt is None:
        raise ValueError(f"unsupported image suffix {suffix!r} (use .png or .tiff)")
    Image.fromarray(np.asarray(rgb, np.uint8), mode="RGB").save(path, format=fmt)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))
