"""HTTP service for interactive threshold tuning.

Per-nucleus mean intensities are cached at load, so a threshold update
re-gates from memory in milliseconds and never re-reads pixels.  Every
update swaps in a new immutable snapshot (thresholds + label table)
under a per-slide writer lock; readers always see one consistent
version.  Optimistic concurrency: a PUT carrying a stale version is
rejected with 409 so two tuners cannot silently clobber each other.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pydantic as _pydantic
from PIL import Image

from .engine import CODE_ASSIGNED, CODE_EXCLUDED, LabelTable, label_nuclei
from .errors import PhenogateError
from .pseudohe import StainMixSpec, render_pseudo_he
from .rulelang import (
    CompiledProgram,
    RuleProgram,
    canonical_rules_source,
    canonical_table1_program,
    compile_program,
    format_rule_program,
    parse_rule_program,
)
from .slideio import (
    NucleusTable,
    SlideManifest,
    ThresholdSet,
    compute_nucleus_features,
    load_slide,
    suggest_thresholds,
)
from .synth import CohortManifest

#: Fixed tint palette for the 14 classes, in annotate order.
CLASS_PALETTE = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150),
)
EXCLUDED_TINT = (60, 60, 60)
UNASSIGNED_TINT = (200, 200, 200)
GATE_POSITIVE_TINT = (0, 200, 0)
GATE_NEGATIVE_TINT = (120, 120, 120)


@dataclass(frozen=True)
class SlideSnapshot:
    """One consistent (thresholds, labels) state; replaced, never mutated."""

    thresholds: ThresholdSet
    labels: LabelTable

    @property
    def version(self) -> int:
        return self.thresholds.version


class StaleVersionError(PhenogateError):
    def __init__(self, sent: int, current: int):
        super().__init__(f"threshold version {sent} is stale (server holds {current})")
        self.sent = sent
        self.current = current


class SlideSession:
    """Cached features plus the current snapshot for one slide."""

    def __init__(self, manifest: SlideManifest, features: NucleusTable,
                 thresholds: ThresholdSet, compiled: CompiledProgram,
                 mask: np.ndarray | None = None,
                 channels: dict[str, np.ndarray] | None = None,
                 he_image: np.ndarray | None = None):
        self.manifest = manifest
        self.features = features
        self.compiled = compiled
        self.mask = mask
        self.channels = channels
        self.he_image = he_image
        self.predictions: dict[int, int] | None = None
        self._lock = threading.Lock()
        self.snapshot = SlideSnapshot(thresholds,
                                      label_nuclei(features, thresholds, compiled))

    @property
    def slide_id(self) -> str:
        return self.manifest.slide_id

    def update_thresholds(self, based_on_version: int,
                          updates: dict[str, float]) -> SlideSnapshot:
        """Re-gate under the writer lock; stale versions are rejected."""
        with self._lock:
            current = self.snapshot
            if based_on_version != current.version:
                raise StaleVersionError(based_on_version, current.version)
            thresholds = current.thresholds.with_updates(updates)
            snapshot = SlideSnapshot(thresholds,
                                     label_nuclei(self.features, thresholds,
                                                  self.compiled))
            self.snapshot = snapshot
            return snapshot


class TunerService:
    """All loaded slides plus the active rule program."""

    def __init__(self, program: RuleProgram | None = None,
                 rules_text: str | None = None):
        self.program = program or canonical_table1_program()
        self.compiled = compile_program(self.program)
        self.rules_text = rules_text if rules_text is not None else (
            canonical_rules_source() if program is None
            else format_rule_program(self.program))
        self.sessions: dict[str, SlideSession] = {}

    def add_slide(self, manifest: SlideManifest, features: NucleusTable,
                  thresholds: ThresholdSet, mask: np.ndarray | None = None,
                  channels: dict[str, np.ndarray] | None = None,
                  he_image: np.ndarray | None = None) -> SlideSession:
        session = SlideSession(manifest, features, thresholds, self.compiled,
                               mask=mask, channels=channels, he_image=he_image)
        self.sessions[manifest.slide_id] = session
        return session

    def load_manifest(self, manifest_path, with_images: bool = True) -> SlideSession:
        """One slide from its manifest; features and thresholds are cached
        beside it on first load."""
        manifest_path = Path(manifest_path)
        manifest = SlideManifest.from_json(manifest_path)
        slide_dir = manifest_path.parent
        features_path = slide_dir / "features.csv"
        mask = channels = he_image = None
        if features_path.exists():
            features = NucleusTable.from_csv(features_path)
            if with_images:
                channels, mask = load_slide(manifest)
        else:
            channels, mask = load_slide(manifest)
            features = compute_nucleus_features(channels, mask)
            features.to_csv(features_path)
        if with_images and channels is not None:
            he_image = render_pseudo_he(
                channels, StainMixSpec.default(manifest.marker_names))
        if not with_images:
            channels = mask = None
        thresholds_path = slide_dir / "thresholds.json"
        if thresholds_path.exists():
            thresholds = ThresholdSet.from_json(thresholds_path)
        else:
            thresholds = suggest_thresholds(features, "otsu",
                                            slide_id=manifest.slide_id)
        return self.add_slide(manifest, features, thresholds, mask=mask,
                              channels=channels, he_image=he_image)

    @classmethod
    def from_cohort(cls, cohort_dir, program: RuleProgram | None = None,
                    rules_text: str | None = None,
                    with_images: bool = True) -> "TunerService":
        service = cls(program, rules_text)
        cohort = CohortManifest.from_json(Path(cohort_dir) / "cohort.json")
        for slide in cohort.slides:
            service.load_manifest(cohort.root / slide.path / "manifest.json",
                                  with_images=with_images)
        return service

    def session(self, slide_id: str) -> SlideSession | None:
        return self.sessions.get(slide_id)

    def load_predictions(self, slide_id: str, csv_path) -> int:
        """Attach predicted labels (for the predictions overlay layer)."""
        session = self.sessions[slide_id]
        out: dict[int, int] = {}
        with open(csv_path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                if row["slide_id"] == slide_id:
                    out[int(row["nucleus_id"])] = int(row["pred_label"])
        session.predictions = out
        return len(out)


# --- overlay rendering ------------------------------------------------------

def _clamp_bbox(bbox, width: int, height: int):
    x, y, w, h = bbox
    x0 = max(0, min(int(x), width))
    y0 = max(0, min(int(y), height))
    x1 = max(x0, min(int(x) + int(w), width))
    y1 = max(y0, min(int(y) + int(h), height))
    return x0, y0, x1, y1


def _tint_lut(session: SlideSession, layer: str) -> np.ndarray | None:
    """Per-nucleus-id RGBA lookup table for the requested layer."""
    labels = session.snapshot.labels
    ids = labels.nucleus_ids
    max_id = int(ids.max()) if len(ids) else 0
    lut = np.zeros((max_id + 2, 4), np.uint8)

    def paint(id_subset: np.ndarray, rgb: tuple[int, int, int]) -> None:
        lut[id_subset] = (*rgb, 255)

    if layer == "class-labels":
        codes = labels.outcomes.codes
        class_idx = labels.outcomes.class_idx
        for c, rgb in enumerate(CLASS_PALETTE[:len(labels.class_names)]):
            paint(ids[(codes == CODE_ASSIGNED) & (class_idx == c)], rgb)
        paint(ids[codes == CODE_EXCLUDED], EXCLUDED_TINT)
        paint(ids[(codes != CODE_ASSIGNED) & (codes != CODE_EXCLUDED)],
              UNASSIGNED_TINT)
        return lut
    if layer.startswith("gate:"):
        marker = layer.split(":", 1)[1]
        if marker not in labels.panel:
            return None
        bit = np.uint64(labels.panel.index(marker))
        positive = (labels.gate_bits >> bit & np.uint64(1)).astype(bool)
        paint(ids[positive], GATE_POSITIVE_TINT)
        paint(ids[~positive], GATE_NEGATIVE_TINT)
        return lut
    if layer == "predictions":
        if session.predictions is None:
            return None
        for nid, pred in session.predictions.items():
            if 0 <= pred < len(CLASS_PALETTE) and nid <= max_id:
                lut[nid] = (*CLASS_PALETTE[pred], 255)
        return lut
    return None


def render_overlay(session: SlideSession, layer: str,
                   bbox: tuple[int, int, int, int] | None = None,
                   scale: float = 1.0) -> np.ndarray | None:
    """RGBA tile for one layer; None when the layer is unavailable.

    Nucleus tints composite over the pseudo-H&E base when images were
    loaded; regions outside the slide stay fully transparent.
    """
    if bbox is None:
        if session.mask is not None:
            h, w = session.mask.shape
        elif session.he_image is not None:
            h, w = session.he_image.shape[:2]
        else:
            return None
        bbox = (0, 0, w, h)
    if session.mask is not None:
        height, width = session.mask.shape
    elif session.he_image is not None:
        height, width = session.he_image.shape[:2]
    else:
        return None
    x0, y0, x1, y1 = _clamp_bbox(bbox, width, height)
    out_w = max(1, round(int(bbox[2]) * scale))
    out_h = max(1, round(int(bbox[3]) * scale))
    tile = np.zeros((int(bbox[3]), int(bbox[2]), 4), np.uint8)

    if layer == "he":
        if session.he_image is None:
            return None
        crop = session.he_image[y0:y1, x0:x1]
        dst = tile[y0 - int(bbox[1]):y1 - int(bbox[1]),
                   x0 - int(bbox[0]):x1 - int(bbox[0])]
        dst[..., :3] = crop
        dst[..., 3] = 255
    elif layer.startswith("channel:"):
        marker = layer.split(":", 1)[1]
        if session.channels is None or marker not in session.channels:
            return None
        crop = (session.channels[marker][y0:y1, x0:x1] // 257).astype(np.uint8)
        dst = tile[y0 - int(bbox[1]):y1 - int(bbox[1]),
                   x0 - int(bbox[0]):x1 - int(bbox[0])]
        dst[..., 0] = dst[..., 1] = dst[..., 2] = crop
        dst[..., 3] = 255
    else:
        if session.mask is None:
            return None
        lut = _tint_lut(session, layer)
        if lut is None:
            return None
        mask_crop = session.mask[y0:y1, x0:x1]
        tinted = lut[np.clip(mask_crop, 0, len(lut) - 1)]
        dst = tile[y0 - int(bbox[1]):y1 - int(bbox[1]),
                   x0 - int(bbox[0]):x1 - int(bbox[0])]
        if session.he_image is not None:
            dst[..., :3] = session.he_image[y0:y1, x0:x1]
            dst[..., 3] = 255
        covered = tinted[..., 3] > 0
        dst[covered] = tinted[covered]

    if (out_w, out_h) != (tile.shape[1], tile.shape[0]):
        resample = (Image.Resampling.BILINEAR
                    if layer == "he" or layer.startswith("channel:")
                    else Image.Resampling.NEAREST)
        img = Image.fromarray(tile, "RGBA").resize((out_w, out_h), resample)
        tile = np.asarray(img)
    return tile


def _png_bytes(rgba: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgba, "RGBA").save(buf, format="PNG")
    return buf.getvalue()


# --- HTTP app ---------------------------------------------------------------

class ThresholdUpdate(_pydantic.BaseModel):
    version: int
    thresholds: dict[str, float]


def build_app(service: TunerService, ui_dir: Path | None = None):
    from fastapi import FastAPI, HTTPException, Query, Response

    app = FastAPI(title="nucleus threshold tuner")

    def get_session(slide_id: str) -> SlideSession:
        session = service.session(slide_id)
        if session is None:
            raise HTTPException(404, f"unknown slide {slide_id!r}")
        return session

    def parse_bbox(bbox: str | None):
        if bbox is None:
            return None
        try:
            parts = [int(float(v)) for v in bbox.split(",")]
        except ValueError:
            parts = []
        if len(parts) != 4 or parts[2] < 0 or parts[3] < 0:
            raise HTTPException(422, f"malformed bbox {bbox!r}")
        return tuple(parts)

    @app.get("/api/slides")
    def list_slides():
        out = []
        for session in service.sessions.values():
            snap = session.snapshot
            out.append({
                "slide_id": session.slide_id,
                "patient_id": session.manifest.patient_id,
                "site": session.manifest.site.value,
                "disease": session.manifest.disease.value,
                "microns_per_pixel": session.manifest.microns_per_pixel,
                "nucleus_count": len(session.features),
                "version": snap.version,
            })
        return out

    @app.get("/api/slides/{slide_id}")
    def slide_detail(slide_id: str):
        session = get_session(slide_id)
        snap = session.snapshot
        return {
            "slide_id": session.slide_id,
            "patient_id": session.manifest.patient_id,
            "site": session.manifest.site.value,
            "disease": session.manifest.disease.value,
            "microns_per_pixel": session.manifest.microns_per_pixel,
            "markers": list(session.features.marker_names),
            "nucleus_count": len(session.features),
            "version": snap.version,
            "has_images": session.mask is not None,
            "width": None if session.mask is None else session.mask.shape[1],
            "height": None if session.mask is None else session.mask.shape[0],
        }

    @app.get("/api/slides/{slide_id}/channels/{marker}/histogram")
    def channel_histogram(slide_id: str, marker: str,
                          bins: int = Query(default=256, ge=1, le=4096)):
        session = get_session(slide_id)
        if marker not in session.features.marker_names:
            raise HTTPException(404, f"unknown channel {marker!r}")
        col = session.features.means[:, session.features.marker_names.index(marker)]
        counts, edges = np.histogram(col, bins=bins)
        snap = session.snapshot
        return {
            "slide_id": slide_id,
            "marker": marker,
            "bins": bins,
            "counts": counts.tolist(),
            "edges": edges.tolist(),
            "min": float(col.min()),
            "max": float(col.max()),
            "threshold": snap.thresholds.thresholds.get(marker),
            "version": snap.version,
        }

    @app.get("/api/slides/{slide_id}/thresholds")
    def get_thresholds(slide_id: str):
        snap = get_session(slide_id).snapshot
        return {
            "slide_id": slide_id,
            "version": snap.version,
            "thresholds": snap.thresholds.thresholds,
        }

    @app.put("/api/slides/{slide_id}/thresholds")
    def put_thresholds(slide_id: str, body: ThresholdUpdate):
        session = get_session(slide_id)
        known = set(session.features.marker_names)
        unknown = sorted(set(body.thresholds) - known)
        if unknown:
            raise HTTPException(422, f"unknown markers in update: {unknown}")
        try:
            snap = session.update_thresholds(body.version, body.thresholds)
        except StaleVersionError as exc:
            raise HTTPException(409, str(exc)) from None
        return {
            "slide_id": slide_id,
            "version": snap.version,
            "thresholds": snap.thresholds.thresholds,
        }

    @app.get("/api/slides/{slide_id}/classes")
    def class_counts(slide_id: str):
        snap = get_session(slide_id).snapshot
        return {
            "slide_id": slide_id,
            "version": snap.version,
            "counts": snap.labels.class_counts(),
        }

    @app.get("/api/slides/{slide_id}/nuclei")
    def nuclei(slide_id: str, bbox: str | None = None):
        session = get_session(slide_id)
        box = parse_bbox(bbox)
        snap = session.snapshot
        feats = session.features
        keep = np.arange(len(feats))
        if box is not None:
            x, y, w, h = box
            keep = keep[(feats.cx >= x) & (feats.cx < x + w)
                        & (feats.cy >= y) & (feats.cy < y + h)]
        rows = []
        labels = snap.labels
        for i in map(int, keep):
            outcome = labels.outcomes[i]
            rows.append({
                "nucleus_id": int(feats.nucleus_ids[i]),
                "cx": float(feats.cx[i]),
                "cy": float(feats.cy[i]),
                "area": int(feats.area[i]),
                "gate_bits_hex": format(int(labels.gate_bits[i]), "x"),
                "outcome": outcome.kind.value,
                "class": outcome.class_name,
                "step": outcome.step,
            })
        return {"slide_id": slide_id, "version": snap.version, "nuclei": rows}

    @app.get("/api/slides/{slide_id}/overlay")
    def overlay(slide_id: str, layer: str, bbox: str | None = None,
                scale: float = Query(default=1.0, gt=0, le=8)):
        session = get_session(slide_id)
        tile = render_overlay(session, layer, parse_bbox(bbox), scale)
        if tile is None:
            raise HTTPException(404, f"layer {layer!r} unavailable for {slide_id!r}")
        return Response(content=_png_bytes(tile), media_type="image/png")

    @app.get("/api/rules")
    def rules():
        return Response(content=service.rules_text, media_type="text/plain")

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
