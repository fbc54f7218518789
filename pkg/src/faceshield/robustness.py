# src/faceshield/robustness.py
"""
Does the protection survive post-processing?

Each setting of the RobustnessSpec is applied to every protected image, detection is re-run,
and one F1 row is reported per (transform, setting), after an untransformed baseline row.

Transforms:
- jpeg:   lossy re-encode at the given quality (OpenCV)
- resize: downscale by the ratio, then back to the original size (bilinear)
- noise:  additive Gaussian noise, std in 0-255 units, seeded per (setting, image)
- blur:   Gaussian blur with a k x k kernel
"""

from __future__ import annotations

import logging
from typing import Sequence

import cv2
import numpy as np
import pandas as pd

from faceshield.config import RobustnessSpec, derive_seed
from faceshield.detector import DetectorHandle, detect
from faceshield.domain import GroundTruth, Image
from faceshield.errors import FaceShieldError, InputError
from faceshield.evaluation import f1_score, match_detections

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["transform", "setting", "f1", "precision", "recall", "tp", "fp", "fn",
                  "threshold", "seed", "status", "failed_files", "error"]


def _jpeg(image: Image, quality: float, seed: int) -> np.ndarray:
    bgr = cv2.cvtColor(np.asarray(image.data), cv2.COLOR_RGB2BGR)
    ok, enc = cv2.imencode(".jpg", bgr, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise InputError(f"JPEG encode failed at quality {quality}")
    return cv2.cvtColor(cv2.imdecode(enc, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)


def _resize(image: Image, ratio: float, seed: int) -> np.ndarray:
    if ratio == 1.0:
        return np.asarray(image.data).copy()
    h, w = image.height, image.width
    small = cv2.resize(np.asarray(image.data), (max(1, round(w * ratio)), max(1, round(h * ratio))),
                       interpolation=cv2.INTER_AREA)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def _noise(image: Image, std: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noisy = image.float_view + rng.normal(0.0, float(std), size=image.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def _blur(image: Image, kernel: float, seed: int) -> np.ndarray:
    k = int(kernel)
    return cv2.GaussianBlur(np.asarray(image.data), (k, k), sigmaX=0)


TRANSFORMS = {
    "identity": lambda image, setting, seed: np.asarray(image.data).copy(),
    "jpeg": _jpeg,
    "resize": _resize,
    "noise": _noise,
    "blur": _blur,
}


def apply_transform(image: Image, transform: str, setting: float, seed: int = 0) -> Image:
    if transform not in TRANSFORMS:
        raise InputError(f"unknown transform {transform!r}")
    return Image(TRANSFORMS[transform](image, setting, seed), image.image_id)


def _row(transform: str, setting, stats: dict | None, threshold: float, seed: int | None,
         errors: Sequence[str] = ()) -> dict:
    row = {c: np.nan for c in REPORT_COLUMNS}
    if stats is not None:
        row.update({k: stats[k] for k in ("f1", "precision", "recall", "tp", "fp", "fn")})
    row.update(
        transform=transform,
        setting=setting,
        threshold=threshold,
        seed=seed,
        status="failed" if errors else "ok",
        failed_files=len(errors),
        error="; ".join(errors),
    )
    return row


def robustness_suite(
    protected: Sequence[Image],
    clean: Sequence[Image],
    model: DetectorHandle,
    spec: RobustnessSpec,
    ground_truth: Sequence[GroundTruth] | None = None,
    iou_threshold: float = 0.5,
) -> pd.DataFrame:
    """
    Rows: baseline, then every (transform, setting) from spec.settings(). Ground truth
    defaults to the detector's output on the clean corpus. A file whose transform raises
    marks its row failed (with the file named in `error`); the remaining files of that
    setting are still scored.
    """
    if len(protected) != len(clean):
        raise InputError(f"{len(protected)} protected images for {len(clean)} clean ones")
    if ground_truth is None:
        ground_truth = [GroundTruth(tuple(detect(model, c).boxes), c.image_id) for c in clean]
    if len(ground_truth) != len(clean):
        raise InputError("ground truth is not aligned with the corpus")

    baseline = [match_detections(detect(model, im), gt, iou_threshold) for im, gt in zip(protected, ground_truth)]
    rows = [_row("baseline", None, f1_score(baseline), model.threshold, None)]
    for k, (transform, setting) in enumerate(spec.settings()):
        seed = derive_seed(spec.seed, "transform", k)
        matches, errors = [], []
        for j, (im, gt) in enumerate(zip(protected, ground_truth)):
            try:
                out = apply_transform(im, transform, setting, derive_seed(seed, "transform", j))
                matches.append(match_detections(detect(model, out), gt, iou_threshold))
            except (FaceShieldError, cv2.error, ValueError) as e:
                logger.warning("⚠️ %s=%s failed on %s: %s", transform, setting, im.image_id, e)
                errors.append(f"{im.image_id}: {e}")
        stats = f1_score(matches) if matches else None
        rows.append(_row(transform, setting, stats, model.threshold, seed, errors))

    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    logger.info("🧪 Robustness sweep: %d rows, baseline F1 %.3f", len(table), table.loc[0, "f1"])
    return table
