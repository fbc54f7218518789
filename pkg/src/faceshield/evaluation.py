# src/faceshield/evaluation.py
"""
Detection and image-quality metrics.

- iou / match_detections: greedy one-to-one matching in descending score order
- aggregate / f1_score:   corpus counts are summed first, then divided (0/0 -> 0)
- ssim:                   grayscale, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255
- face_set_ssim:          how much a protected face set differs from the clean one, crop by crop
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import cv2
import numpy as np
import pandas as pd

from faceshield.detector import crop_faces
from faceshield.domain import Box, DetectionSet, GroundTruth, Image
from faceshield.errors import InputError

SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 255.0
FACE_CROP_SIZE = 64


@dataclass(frozen=True)
class MatchResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pairs: tuple[tuple[int, int, float], ...] = field(default=())

    @property
    def predictions(self) -> int:
        return self.tp + self.fp

    @property
    def ground_truths(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


def match_detections(pred: DetectionSet, gt: GroundTruth, iou_threshold: float = 0.5) -> MatchResult:
    """
    Predictions are visited by descending score (stable for ties); each takes the unmatched
    ground truth of highest IoU >= threshold. `pairs` holds (pred index, gt index, IoU) in
    the sorted prediction order.
    """
    preds = sorted(enumerate(pred.boxes), key=lambda ib: -getattr(ib[1], "score", 1.0))
    truths = list(gt.boxes)
    taken = [False] * len(truths)
    pairs = []
    for p_idx, p in preds:
        best, best_iou = -1, iou_threshold
        for g_idx, g in enumerate(truths):
            if taken[g_idx]:
                continue
            value = iou(p, g)
            if value >= best_iou and (best < 0 or value > best_iou):
                best, best_iou = g_idx, value
        if best >= 0:
            taken[best] = True
            pairs.append((p_idx, best, best_iou))
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(truths) - tp, tuple(pairs))


def aggregate(matches: Iterable[MatchResult]) -> MatchResult:
    total = MatchResult()
    for m in matches:
        total = total + m
    return total


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def f1_score(matches) -> dict[str, float]:
    """
    precision, recall and F1 from a MatchResult, an iterable of them, or a (tp, fp, fn)
    triple. Any 0/0 yields 0.
    """
    if isinstance(matches, MatchResult):
        total = matches
    elif isinstance(matches, tuple) and len(matches) == 3 and all(isinstance(v, (int, np.integer)) for v in matches):
        total = MatchResult(*(int(v) for v in matches))
    else:
        total = aggregate(matches)
    precision = _ratio(total.tp, total.tp + total.fp)
    recall = _ratio(total.tp, total.tp + total.fn)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": total.tp,
        "fp": total.fp,
        "fn": total.fn,
    }


def corpus_f1(predictions: Sequence[DetectionSet], truths: Sequence[GroundTruth], iou_threshold: float = 0.5) -> dict[str, float]:
    if len(predictions) != len(truths):
        raise InputError(f"{len(predictions)} prediction sets for {len(truths)} ground truths")
    return f1_score(match_detections(p, g, iou_threshold) for p, g in zip(predictions, truths))


def _gray(image: Image) -> np.ndarray:
    return cv2.cvtColor(np.asarray(image.data), cv2.COLOR_RGB2GRAY).astype(np.float64)


def ssim(a: Image, b: Image) -> float:
    if a.shape != b.shape:
        raise InputError(f"ssim needs equal shapes, got {a.shape} and {b.shape}")
    i1, i2 = _gray(a), _gray(b)
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2

    def blur(x: np.ndarray) -> np.ndarray:
        return cv2.GaussianBlur(x, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)

    mu1, mu2 = blur(i1), blur(i2)
    var1 = blur(i1 * i1) - mu1 ** 2
    var2 = blur(i2 * i2) - mu2 ** 2
    cov = blur(i1 * i2) - mu1 * mu2
    index = ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) / ((mu1 ** 2 + mu2 ** 2 + c1) * (var1 + var2 + c2))
    return float(np.clip(index.mean(), -1.0, 1.0))


def face_set_ssim(
    clean: Sequence[Image],
    protected: Sequence[Image],
    det_clean: Sequence[DetectionSet],
    det_protected: Sequence[DetectionSet],
    crop_size: int = FACE_CROP_SIZE,
) -> pd.DataFrame:
    """
    Crop faces from each clean image with the clean detections and from the protected
    image with its own detections, then compare crops pairwise (crop j against crop j;
    a missing partner counts as an all-zero crop).
    """
    if not (len(clean) == len(protected) == len(det_clean) == len(det_protected)):
        raise InputError("face_set_ssim needs aligned clean/protected images and detections")
    rows = []
    for c, p, dc, dp in zip(clean, protected, det_clean, det_protected):
        crops_c = crop_faces(c, dc, crop_size)
        crops_p = crop_faces(p, dp, crop_size)
        n = max(len(crops_c), len(crops_p))
        blank = Image.zeros(crop_size, crop_size)
        for j in range(n):
            a = crops_c[j] if j < len(crops_c) else blank
            b = crops_p[j] if j < len(crops_p) else blank
            rows.append({
                "image_id": c.image_id,
                "crop": j,
                "ssim": ssim(a, b),
                "polluted": len(dp) == 0 or j >= len(crops_p),
            })
    return pd.DataFrame(rows, columns=["image_id", "crop", "ssim", "polluted"])
