# src/faceshield/storage.py
"""
Reading and writing images, annotations, reports and manifests.

Protected images are PNG only: a lossy format would quietly apply the very
recompression the robustness suite studies.
"""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import cv2
import numpy as np

from faceshield.config import MANIFEST_SCHEMA_VERSION
from faceshield.domain import Box, DetectionBox, DetectionSet, GroundTruth, Image
from faceshield.errors import InputError

logger = logging.getLogger(__name__)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def is_png(path: Path | str) -> bool:
    path = Path(path)
    if path.suffix.lower() != ".png" or not path.exists():
        return False
    with open(path, "rb") as f:
        return f.read(8) == PNG_MAGIC


def read_image(path: Path | str, image_id: str | None = None) -> Image:
    path = Path(path)
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InputError(f"could not read image {path}")
    return Image(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), image_id if image_id is not None else str(path))


def write_png(image: Image, path: Path | str) -> Path:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise InputError(f"protected outputs must be PNG, got {path.name}")
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image.data), cv2.COLOR_RGB2BGR),
                     [int(cv2.IMWRITE_PNG_COMPRESSION), 3])
    if not ok:
        raise InputError(f"failed to write {path}")
    return path


def write_json(data: Any, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
    return path


def read_json(path: Path | str) -> Any:
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"missing file {path}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Annotations: {"images": [{"path": str, "boxes": [[x1, y1, x2, y2], ...], "scores": [...]?}]}
# ---------------------------------------------------------------------------

def _entries(doc: Mapping[str, Any], path: Path | str) -> list[Mapping[str, Any]]:
    if not isinstance(doc, Mapping) or not isinstance(doc.get("images"), list):
        raise InputError(f"{path}: expected {{'images': [...]}}")
    return doc["images"]


def load_ground_truth(path: Path | str) -> dict[str, GroundTruth]:
    out: dict[str, GroundTruth] = {}
    for entry in _entries(read_json(path), path):
        key = str(entry["path"])
        out[key] = GroundTruth(tuple(Box(*map(float, b)) for b in entry.get("boxes", [])), key)
    return out


def load_predictions(path: Path | str, threshold: float = 0.0) -> dict[str, DetectionSet]:
    out: dict[str, DetectionSet] = {}
    for entry in _entries(read_json(path), path):
        key = str(entry["path"])
        boxes = entry.get("boxes", [])
        scores = entry.get("scores") or [1.0] * len(boxes)
        if len(scores) != len(boxes):
            raise InputError(f"{path}: {key} has {len(boxes)} boxes but {len(scores)} scores")
        dets = tuple(DetectionBox(*map(float, b), score=float(s)) for b, s in zip(boxes, scores))
        out[key] = DetectionSet(dets, key, threshold)
    return out


def dump_ground_truth(items: Iterable[GroundTruth], path: Path | str) -> Path:
    return write_json({"images": [gt.to_dict() for gt in items]}, path)


def dump_predictions(items: Iterable[DetectionSet], path: Path | str) -> Path:
    return write_json({"images": [d.to_dict() for d in items]}, path)


# ---------------------------------------------------------------------------
# Frame directories
# ---------------------------------------------------------------------------

def frame_name(index: int) -> str:
    return f"{index:05d}.png"


def read_frames(directory: Path | str) -> tuple[list[Image], float]:
    """Numbered PNG frames in name order, plus the fps from manifest.json (25.0 if absent)."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("*.png"))
    if not paths:
        raise InputError(f"no PNG frames in {directory}")
    fps = 25.0
    manifest = directory / "manifest.json"
    if manifest.exists():
        fps = float(read_json(manifest).get("fps", fps))
    return [read_image(p, p.name) for p in paths], fps


def write_frames(frames: Iterable[Image], directory: Path | str, fps: float) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [write_png(frame, directory / frame_name(i)) for i, frame in enumerate(frames)]
    write_json({"fps": fps, "frames": [p.name for p in written]}, directory / "manifest.json")
    return written


# ---------------------------------------------------------------------------
# Run manifest (schema-versioned)
# ---------------------------------------------------------------------------

def write_manifest(run_config, path: Path | str, extra: Mapping[str, Any] | None = None) -> Path:
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "updated_at_utc": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        **run_config.to_dict(),
        **dict(extra or {}),
    }
    path = write_json(doc, path)
    logger.info("💾 Wrote manifest %s", path)
    return path
