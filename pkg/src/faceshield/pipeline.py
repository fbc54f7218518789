# src/faceshield/pipeline.py
"""
Run orchestration: every CLI subcommand is one function here taking a resolved RunConfig.

Stages log what they read, what they wrote and how long they took. Library modules stay
silent; this is where the emoji lines come from.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import pandas as pd

from faceshield.attack import attack_many, run_attack
from faceshield.config import AttackConfig, RunConfig, worker_count
from faceshield.detector import DTYPES, DetectorHandle, detect_many
from faceshield.domain import DetectionSet, GroundTruth, Image
from faceshield.errors import ConfigError, InputError
from faceshield.evaluation import corpus_f1, f1_score, face_set_ssim, match_detections
from faceshield.robustness import robustness_suite
from faceshield.storage import (
    load_ground_truth,
    load_predictions,
    read_frames,
    read_image,
    write_frames,
    write_json,
    write_manifest,
    write_png,
)
from faceshield.synthbench import (
    VAL_INDEX_OFFSET,
    generate_scenes,
    load_toy_detector,
    save_toy_detector,
    train_toy_detector,
)
from faceshield.video import VideoSequence, propagate, video_f1
from faceshield.visualize import robustness_panels, video_timeline

logger = logging.getLogger(__name__)
WEIGHTS_NAME = "toy_detector.pt"


def _table_out(table: pd.DataFrame, stem: Path) -> tuple[Path, Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    table.to_csv(csv_path, index=False)
    table.to_json(json_path, orient="records", indent=2)
    logger.info("💾 Wrote %s (rows=%d)", csv_path, len(table))
    return csv_path, json_path


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------

def load_detector(run: RunConfig, weights: str | None = None) -> DetectorHandle:
    weights = weights or run.detector.weights
    if run.detector.adapter != "toy":
        raise ConfigError(f"no adapter named {run.detector.adapter!r} is bundled (only 'toy')")
    if not weights:
        raise ConfigError("a detector weights path is required (--detector or detector.weights)")
    handle = load_toy_detector(weights, threshold=run.detector.threshold, dtype=DTYPES[run.detector.precision])
    logger.info("ℹ️ Loaded %s detector from %s (taps %s, threshold %.2f)",
                handle.name, weights, list(handle.taps), handle.threshold)
    return handle


def train_toy(run: RunConfig, out_dir: Path | str) -> dict:
    out_dir = Path(out_dir)
    t0 = time.time()
    handle = train_toy_detector(run.toy, scene=run.scene, dtype=DTYPES[run.detector.precision])
    weights = save_toy_detector(handle, out_dir / WEIGHTS_NAME, run.scene)
    logger.info("💾 Wrote %s", weights)
    report = dict(handle.report)
    write_json(report, out_dir / "training_report.json")
    write_manifest(run, out_dir / "manifest.json", {"weights": str(weights)})
    logger.info("⏱ train-toy done in %.1fs", time.time() - t0)
    return report


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def protect_image(run: RunConfig, in_path: Path | str, out_path: Path | str, model: DetectorHandle | None = None) -> dict:
    out_path = Path(out_path)
    if out_path.suffix.lower() != ".png":
        raise ConfigError(f"protected outputs must be .png, got {out_path.name}")
    model = model or load_detector(run)
    image = read_image(in_path)
    t0 = time.time()
    adv, report = run_attack(model, image, run.attack)
    write_png(adv, out_path)
    sidecar = report.sidecar(str(in_path))
    write_json(sidecar, out_path.with_suffix(".json"))
    write_manifest(run, out_path.with_name(out_path.stem + "_manifest.json"))
    logger.info("💾 Wrote %s (%s, linf=%.0f, %.2fs)", out_path, report.method, report.perturbation.linf, time.time() - t0)
    return sidecar


def protect_images(model: DetectorHandle, images: Sequence[Image], config: AttackConfig) -> list[Image]:
    return [adv for adv, _ in attack_many(model, images, config, worker_count())]


# ---------------------------------------------------------------------------
# Video
# ---------------------------------------------------------------------------

def protect_video(run: RunConfig, in_dir: Path | str, out_dir: Path | str, model: DetectorHandle | None = None) -> pd.DataFrame:
    model = model or load_detector(run)
    frames, fps = read_frames(in_dir)
    t0 = time.time()
    protected, report = propagate(VideoSequence(tuple(frames), fps), model, run.attack, run.schedule,
                                  iou_threshold=run.eval.iou_threshold)
    out_dir = Path(out_dir)
    write_frames(protected.frames, out_dir, fps)
    columns = ["frame", "mode", "anchor", "is_anchor", "f1_contrib", "linf", "threshold"]
    report[columns].to_csv(out_dir / "report.csv", index=False)
    video_timeline(report, str(out_dir / "timeline.png"))
    write_manifest(run, out_dir / "run_manifest.json", {"video_f1": video_f1(report), "frames": len(frames)})
    logger.info("🎞️ Protected %d frames into %s (%.1fs)", len(frames), out_dir, time.time() - t0)
    return report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _key(path: str) -> str:
    return Path(path).name


def evaluate_files(pred_path: Path | str, gt_path: Path | str, iou_threshold: float = 0.5, threshold: float = 0.0) -> dict:
    """Corpus F1 of a predictions file against a ground-truth file, keyed by image file name."""
    preds = {_key(k): v for k, v in load_predictions(pred_path, threshold).items()}
    truths = {_key(k): v for k, v in load_ground_truth(gt_path).items()}
    keys = sorted(set(preds) | set(truths))
    stats = f1_score(
        match_detections(preds.get(k, DetectionSet((), k)), truths.get(k, GroundTruth((), k)), iou_threshold)
        for k in keys
    )
    stats.update(images=len(keys), iou_threshold=iou_threshold, score_threshold=threshold)
    return stats


def eval_run(run: RunConfig, pred_path: Path | str, gt_path: Path | str, out_dir: Path | str) -> dict:
    stats = evaluate_files(pred_path, gt_path, run.eval.iou_threshold, run.eval.score_threshold)
    out_dir = Path(out_dir)
    report = write_json(stats, out_dir / "eval.json")
    logger.info("💾 Wrote %s (f1=%.4f)", report, stats["f1"])
    write_manifest(run, out_dir / "manifest.json", {"f1": stats["f1"]})
    return stats


def robustness_run(
    run: RunConfig,
    protected_dir: Path | str,
    clean_dir: Path | str,
    gt_path: Path | str | None,
    out_dir: Path | str,
    model: DetectorHandle | None = None,
) -> pd.DataFrame:
    model = model or load_detector(run)
    protected, _ = read_frames(protected_dir)
    clean, _ = read_frames(clean_dir)
    names = [im.image_id for im in clean]
    if [im.image_id for im in protected] != names:
        raise InputError("protected and clean directories must hold the same file names")
    truths = None
    if gt_path:
        loaded = {_key(k): v for k, v in load_ground_truth(gt_path).items()}
        truths = [loaded.get(n, GroundTruth((), n)) for n in names]

    t0 = time.time()
    table = robustness_suite(protected, clean, model, run.robustness, truths, run.eval.iou_threshold)
    clean_stats = corpus_f1(detect_many(model, clean), truths, run.eval.iou_threshold) if truths else None
    out_dir = Path(out_dir)
    _table_out(table, out_dir / "robustness")
    robustness_panels(table, str(out_dir / "robustness.png"), clean_stats["f1"] if clean_stats else None)
    write_manifest(run, out_dir / "manifest.json", {"clean_f1": clean_stats["f1"] if clean_stats else None})
    logger.info("⏱ robustness done in %.1fs", time.time() - t0)
    return table


# ---------------------------------------------------------------------------
# Experiments on generated scenes
# ---------------------------------------------------------------------------

def held_out_scenes(run: RunConfig, count: int | None = None) -> list[tuple[Image, GroundTruth]]:
    count = run.toy.val_count if count is None else int(count)
    return generate_scenes(run.scene, range(VAL_INDEX_OFFSET, VAL_INDEX_OFFSET + count))


def transfer_matrix(
    scenes: Sequence[tuple[Image, GroundTruth]],
    sources: Mapping[str, DetectorHandle],
    targets: Mapping[str, DetectorHandle],
    config: AttackConfig,
    iou_threshold: float = 0.5,
) -> pd.DataFrame:
    """Attack with every source detector, score on every target: one row per (source, target)."""
    images = [im for im, _ in scenes]
    truths = [gt for _, gt in scenes]
    rows = []
    for target_name, target in targets.items():
        rows.append({"source": "clean", "target": target_name,
                     **_scores(target, images, truths, iou_threshold)})
    for source_name, source in sources.items():
        protected = protect_images(source, images, config)
        for target_name, target in targets.items():
            rows.append({"source": source_name, "target": target_name,
                         **_scores(target, protected, truths, iou_threshold)})
        logger.info("🔧 transfer from %s done", source_name)
    return pd.DataFrame(rows)


def _scores(model: DetectorHandle, images: Sequence[Image], truths: Sequence[GroundTruth], iou_threshold: float) -> dict:
    stats = corpus_f1(detect_many(model, images), truths, iou_threshold)
    return {k: stats[k] for k in ("f1", "precision", "recall")} | {"threshold": model.threshold}


def transfer_run(run: RunConfig, scene_count: int, sources: Sequence[str], targets: Sequence[str], out_dir: Path | str) -> pd.DataFrame:
    t0 = time.time()
    load = {w: load_detector(run, w) for w in dict.fromkeys([*sources, *targets])}
    table = transfer_matrix(
        held_out_scenes(run, scene_count),
        {Path(w).stem: load[w] for w in sources},
        {Path(w).stem: load[w] for w in targets},
        run.attack,
        run.eval.iou_threshold,
    )
    _table_out(table, Path(out_dir) / "transfer")
    write_manifest(run, Path(out_dir) / "manifest.json")
    logger.info("⏱ transfer done in %.1fs", time.time() - t0)
    return table


def poison_ratio_sweep(
    scenes: Sequence[tuple[Image, GroundTruth]],
    model: DetectorHandle,
    config: AttackConfig,
    ratios: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    iou_threshold: float = 0.5,
) -> pd.DataFrame:
    """
    Protect the first ceil(r * N) images of a face set and report, per ratio, the detection
    F1 on the mixed set, the share of crops that came out polluted and the mean crop SSIM.
    """
    images = [im for im, _ in scenes]
    truths = [gt for _, gt in scenes]
    protected = protect_images(model, images, config)
    clean_dets = detect_many(model, images)
    rows = []
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"poison ratio must be in [0, 1], got {r}")
        cut = math.ceil(r * len(images))
        mixed = protected[:cut] + images[cut:]
        dets = detect_many(model, mixed)
        crops = face_set_ssim(images, mixed, clean_dets, dets)
        stats = f1_score(match_detections(d, g, iou_threshold) for d, g in zip(dets, truths))
        rows.append({
            "ratio": r,
            "protected": cut,
            "f1": stats["f1"],
            "polluted_fraction": float(crops["polluted"].mean()) if len(crops) else 0.0,
            "mean_crop_ssim": float(crops["ssim"].mean()) if len(crops) else 1.0,
        })
    return pd.DataFrame(rows)


def layer_ablation(
    scenes: Sequence[tuple[Image, GroundTruth]],
    model: DetectorHandle,
    config: AttackConfig,
    subsets: Sequence[Sequence[int]] = ((1,), (2,), (3,), (1, 2, 3)),
    iou_threshold: float = 0.5,
) -> pd.DataFrame:
    """Protected F1 when the importance maps (and objective) use only the given layers."""
    images = [im for im, _ in scenes]
    truths = [gt for _, gt in scenes]
    rows = []
    for subset in subsets:
        guidance = replace(config.guidance, layers=tuple(subset))
        protected = protect_images(model, images, replace(config, guidance=guidance))
        stats = corpus_f1(detect_many(model, protected), truths, iou_threshold)
        rows.append({"layers": ",".join(map(str, subset)), "f1": stats["f1"]})
    return pd.DataFrame(rows)

