# src/faceshield/video.py
"""
Protecting videos by propagating one frame's perturbation to its neighbours.

Modes:
- full:           attack every frame
- fixed:          attack frame 0, reuse its perturbation verbatim everywhere
- forward:        anchors every P_a frames; other frames warp the previous perturbation
                  along the forward flow H(src -> v)
- bidirectional:  as forward, averaged with the warp along the negated backward flow
                  -H(v -> src)

`src` is the previous frame when schedule.chain is true, the latest anchor otherwise.
Per-frame F1 uses detections on the clean frame as ground truth and is reported on
frames v ≡ 0 (mod eval_interval).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from faceshield.attack import AttackReport, run_attack
from faceshield.config import AnchorSchedule, AttackConfig, derive_seed
from faceshield.detector import DetectorHandle, detect
from faceshield.domain import GroundTruth, Image, Perturbation, bounded_image
from faceshield.errors import AttackError, InputError, PropagationError
from faceshield.evaluation import f1_score, match_detections
from faceshield.flow import FlowField, compute_flow, warp_array

logger = logging.getLogger(__name__)

AttackFn = Callable[[DetectorHandle, Image, AttackConfig], tuple[Image, AttackReport]]


@dataclass(frozen=True)
class VideoSequence:
    frames: tuple[Image, ...]
    fps: float = 25.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InputError("a video needs at least one frame")
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise InputError(f"frame {i} has shape {f.shape}, expected {shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> Image:
        return self.frames[index]


def anchor_count(length: int, schedule: AnchorSchedule, mode: str) -> int:
    if mode == "full":
        return length
    if mode == "fixed":
        return 1
    return math.ceil(length / schedule.anchor_period)


def _flow(schedule: AnchorSchedule, a: Image, b: Image, source: int, target: int) -> FlowField:
    return compute_flow(
        a, b,
        method=schedule.flow_method,
        iterations=schedule.flow_iterations,
        regularization=schedule.flow_regularization,
        levels=schedule.flow_levels,
        source=source,
        target=target,
    )


def propagate_once(
    delta: np.ndarray,
    source: Image,
    target: Image,
    schedule: AnchorSchedule,
    bidirectional: bool,
    indices: tuple[int, int] = (0, 1),
) -> np.ndarray:
    """Warp `delta` (defined on `source`) onto `target`; average both directions if asked."""
    s, t = indices
    forward = warp_array(delta, _flow(schedule, source, target, s, t).vectors)
    if not bidirectional:
        return forward
    backward = warp_array(delta, (-_flow(schedule, target, source, t, s)).vectors)
    return 0.5 * (forward + backward)


def propagate(
    video: VideoSequence,
    model: DetectorHandle,
    attack: AttackConfig,
    schedule: AnchorSchedule,
    mode: str | None = None,
    attack_fn: AttackFn = run_attack,
    ground_truth: Sequence[GroundTruth] | None = None,
    iou_threshold: float = 0.5,
) -> tuple[VideoSequence, pd.DataFrame]:
    """
    Protect every frame. Anchors get a full attack (seeded per frame index); the rest get
    propagated perturbations, each projected back into the ε-ball of its own clean frame.
    """
    mode = mode or schedule.mode
    if mode not in ("full", "fixed", "forward", "bidirectional"):
        raise InputError(f"unknown propagation mode {mode!r}")
    eps = float(attack.epsilon)
    frames = video.frames

    protected: list[Image] = []
    applied: list[np.ndarray] = []
    rows: list[dict] = []
    anchor_index = 0
    anchor_delta: np.ndarray | None = None

    for v, frame in enumerate(frames):
        clean = frame.float_view
        if mode == "full":
            is_anchor = True
        elif mode == "fixed":
            is_anchor = v == 0
        else:
            is_anchor = schedule.is_anchor(v)

        if is_anchor:
            try:
                adv, _ = attack_fn(model, frame, replace(attack, seed=derive_seed(attack.seed, "attack", v)))
            except AttackError as e:
                raise PropagationError(f"attack failed on anchor frame {v}: {e}", rows) from e
            anchor_index = v
            anchor_delta = adv.float_view - clean
        elif mode == "fixed":
            adv = bounded_image(clean + anchor_delta, frame, eps)
        else:
            src = v - 1 if schedule.chain else anchor_index
            src_delta = applied[src] if schedule.chain else anchor_delta
            estimate = propagate_once(src_delta, frames[src], frame, schedule, mode == "bidirectional", (src, v))
            adv = bounded_image(clean + estimate, frame, eps)

        delta = adv.float_view - clean
        applied.append(delta)
        protected.append(adv.with_id(frame.image_id))
        rows.append({
            "frame": v,
            "mode": mode,
            "anchor": anchor_index,
            "is_anchor": bool(is_anchor),
            "linf": float(np.abs(delta).max()) if delta.size else 0.0,
            "threshold": model.threshold,
        })

    report = pd.DataFrame(rows)
    report["f1_contrib"] = np.nan
    for col in ("tp", "fp", "fn"):
        report[col] = np.nan
    for v in range(0, len(frames), schedule.eval_interval):
        gt = ground_truth[v] if ground_truth is not None else _clean_truth(model, frames[v])
        m = match_detections(detect(model, protected[v]), gt, iou_threshold)
        report.loc[v, ["tp", "fp", "fn"]] = [m.tp, m.fp, m.fn]
        report.loc[v, "f1_contrib"] = f1_score(m)["f1"]

    logger.info(
        "🎞️ %s: %d frames, %d anchors, F1 %.3f",
        mode, len(frames), int(report["is_anchor"].sum()), video_f1(report),
    )
    return VideoSequence(tuple(protected), video.fps), report


def _clean_truth(model: DetectorHandle, frame: Image) -> GroundTruth:
    dets = detect(model, frame)
    return GroundTruth(tuple(dets.boxes), frame.image_id)


def video_f1(report: pd.DataFrame) -> float:
    """Corpus F1 over the evaluated frames (counts aggregated before dividing)."""
    rows = report.dropna(subset=["tp"])
    tp, fp, fn = (int(rows[c].sum()) for c in ("tp", "fp", "fn"))
    return f1_score((tp, fp, fn))["f1"]


def perturbations(protected: VideoSequence, clean: VideoSequence, epsilon: float) -> list[Perturbation]:
    return [Perturbation.between(p, c, epsilon) for p, c in zip(protected.frames, clean.frames)]
