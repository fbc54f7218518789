# src/faceshield/synthbench.py
"""
Synthetic face scenes and the trainable toy detector.

Scenes:
- background: smooth colour gradient + Gaussian noise + a few plain clutter blobs
- faces: filled ellipse, two dark eye dots, a mouth arc; never overlapping
- ground truth: the tight box around each ellipse

Toy detector:
- backbone of 3 stride-2 stages, features tapped after every stage (K = 3)
- anchor-free head on the last stage: per cell one objectness logit + 4 distances
  (left, top, right, bottom) from the cell centre to the box edges
- focal objectness loss + L1 distance loss, NMS at decode time
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import nms, sigmoid_focal_loss

from faceshield.config import SceneConfig, ToyDetectorSpec
from faceshield.detector import DetectorHandle, RawBox, detect
from faceshield.domain import Box, GroundTruth, Image
from faceshield.errors import ConfigError, InputError, PlacementError, TrainingError
from faceshield.evaluation import aggregate, f1_score, match_detections

logger = logging.getLogger(__name__)

STRIDE = 8
DIST_SCALE = 16.0
VAL_INDEX_OFFSET = 1_000_000
PLACEMENT_RETRIES = 200


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _background(rng: np.random.Generator, size: int, config: SceneConfig) -> np.ndarray:
    base = rng.uniform(40, 215, size=3)
    direction = rng.normal(size=3)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy - 0.5
    img = base[None, None, :] + config.gradient_strength * ramp[..., None] * np.sign(direction)[None, None, :]
    img = img + rng.normal(0.0, config.noise_std, size=(size, size, 3))
    img = np.clip(img, 0, 255).astype(np.uint8)

    # plain clutter: rectangles and blobs without facial marks
    for _ in range(int(rng.integers(0, 4))):
        color = tuple(int(c) for c in rng.uniform(0, 255, size=3))
        x, y = (int(v) for v in rng.integers(0, size, size=2))
        w, h = (int(v) for v in rng.integers(size // 16, size // 5, size=2))
        if rng.random() < 0.5:
            cv2.rectangle(img, (x, y), (x + w, y + h), color, -1)
        else:
            cv2.circle(img, (x, y), max(2, w // 2), color, -1)
    return img


def _overlaps(box: tuple[int, int, int, int], placed: list[tuple[int, int, int, int]], margin: int = 2) -> bool:
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in placed:
        if x1 < a2 + margin and a1 < x2 + margin and y1 < b2 + margin and b1 < y2 + margin:
            return True
    return False


def _draw_face(img: np.ndarray, rng: np.random.Generator, cx: int, cy: int, ax: int, ay: int) -> None:
    skin = (int(rng.uniform(180, 245)), int(rng.uniform(130, 200)), int(rng.uniform(100, 170)))
    cv2.ellipse(img, (cx, cy), (ax, ay), 0, 0, 360, skin, -1)
    eye_r = max(1, int(round(0.14 * ax)))
    eye_dx = int(round(0.4 * ax))
    eye_y = cy - int(round(0.25 * ay))
    dark = tuple(int(v) for v in rng.uniform(0, 50, size=3))
    cv2.circle(img, (cx - eye_dx, eye_y), eye_r, dark, -1)
    cv2.circle(img, (cx + eye_dx, eye_y), eye_r, dark, -1)
    mouth_axes = (max(2, int(round(0.45 * ax))), max(1, int(round(0.22 * ay))))
    cv2.ellipse(img, (cx, cy + int(round(0.3 * ay))), mouth_axes, 0, 20, 160, dark, max(1, ax // 8))


def generate_scene(config: SceneConfig, index: int) -> tuple[Image, GroundTruth]:
    """Deterministic per (config.seed, index)."""
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFF, int(index)])
    size = int(config.image_size)
    img = _background(rng, size, config)

    lo, hi = config.faces_per_image
    n_faces = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, int, int, int]] = []
    for face in range(n_faces):
        for _attempt in range(PLACEMENT_RETRIES):
            height = rng.uniform(*config.face_scale) * size
            ay = max(3, int(round(height / 2)))
            ax = max(3, int(round(ay * rng.uniform(0.72, 0.9))))
            if 2 * ax + 1 >= size or 2 * ay + 1 >= size:
                continue
            cx = int(rng.integers(ax, size - ax - 1))
            cy = int(rng.integers(ay, size - ay - 1))
            box = (cx - ax, cy - ay, cx + ax + 1, cy + ay + 1)
            if not _overlaps(box, placed):
                break
        else:
            raise PlacementError(
                f"could not place face {face + 1}/{n_faces} after {PLACEMENT_RETRIES} tries "
                f"(image_size={size}, face_scale={config.face_scale})"
            )
        placed.append(box)
        _draw_face(img, rng, cx, cy, ax, ay)

    image_id = f"scene_{config.seed}_{index}"
    gt = GroundTruth(tuple(Box(*map(float, b)) for b in placed), image_id)
    return Image(img, image_id), gt


def generate_scenes(config: SceneConfig, indices: Sequence[int]) -> list[tuple[Image, GroundTruth]]:
    return [generate_scene(config, i) for i in indices]


def generate_translating_video(
    config: SceneConfig,
    frames: int = 60,
    speed: int = 1,
    index: int = 0,
) -> tuple[list[Image], list[GroundTruth]]:
    """
    A scene panning right by `speed` px per frame (border reflected). The first scene at or
    after `index` whose faces stay fully inside the frame for the whole clip is used.
    """
    size = int(config.image_size)
    travel = speed * (frames - 1)
    for candidate in range(index, index + PLACEMENT_RETRIES):
        image, gt = generate_scene(config, candidate)
        if all(b.x2 + travel <= size for b in gt.boxes):
            break
    else:
        raise PlacementError(f"no scene keeps its faces visible over a {travel}px pan (size {size})")

    clip, truths = [], []
    for v in range(frames):
        shift = float(speed * v)
        m = np.float32([[1, 0, shift], [0, 1, 0]])
        moved = cv2.warpAffine(np.asarray(image.data), m, (size, size), flags=cv2.INTER_NEAREST,
                               borderMode=cv2.BORDER_REFLECT_101)
        frame_id = f"{image.image_id}_f{v:03d}"
        clip.append(Image(moved, frame_id))
        truths.append(GroundTruth(
            tuple(Box(b.x1 + shift, b.y1, b.x2 + shift, b.y2) for b in gt.boxes), frame_id
        ))
    return clip, truths


# ---------------------------------------------------------------------------
# Toy network
# ---------------------------------------------------------------------------

def _stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.ReLU(inplace=False),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=False),
    )


class ToyNet(nn.Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.stages = nn.ModuleList([_stage(3, c1), _stage(c1, c2), _stage(c2, c3)])
        self.head = nn.Sequential(
            nn.Conv2d(c3, c3, 3, padding=1),
            nn.ReLU(inplace=False),
            nn.Conv2d(c3, 5, 1),
        )
        with torch.no_grad():
            self.head[-1].bias[0] = -2.0

    def backbone(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats = self.backbone(x)
        return feats, self.head(feats[-1])


def _preprocess(pixels: torch.Tensor) -> torch.Tensor:
    """(B, H, W, 3) in 0-255 -> (B, 3, H', W') centred, zero-padded to a multiple of STRIDE."""
    x = pixels.permute(0, 3, 1, 2) / 255.0 - 0.5
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % STRIDE, (-w) % STRIDE
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    return x


def _cell_centers(gh: int, gw: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    ys = (torch.arange(gh, dtype=dtype) + 0.5) * STRIDE
    xs = (torch.arange(gw, dtype=dtype) + 0.5) * STRIDE
    return torch.meshgrid(ys, xs, indexing="ij")


def _distances(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) * DIST_SCALE


class ToyDetector(DetectorHandle):
    depth = 3
    name = "toy"

    def __init__(
        self,
        net: ToyNet,
        spec: ToyDetectorSpec = ToyDetectorSpec(),
        taps: Sequence[int] = (1, 2, 3),
        threshold: float | None = None,
        dtype: torch.dtype = torch.float64,
        report: dict | None = None,
    ):
        super().__init__(taps, spec.threshold if threshold is None else threshold, None, dtype)
        self.spec = spec
        self.net = net.to(dtype).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.report = dict(report or {})
        self._copies: dict[torch.dtype, ToyDetector] = {}

    def forward(self, pixels: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats, head = self.net(_preprocess(pixels.to(self.dtype)))
        return [feats[t - 1] for t in self.taps], head

    def features(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        feats = self.net.backbone(_preprocess(pixels.to(self.dtype)))
        return [feats[t - 1] for t in self.taps]

    def candidates(self, head: torch.Tensor, height: int, width: int) -> list[torch.Tensor]:
        """Every cell's box and score before thresholding and NMS: (gh*gw, 5) per image."""
        gh, gw = head.shape[-2:]
        cy, cx = _cell_centers(gh, gw, head.dtype)
        scores = torch.sigmoid(head[:, 0])
        d = _distances(head[:, 1:5])
        boxes = torch.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], dim=1)
        out = []
        for b in range(head.shape[0]):
            flat = torch.cat([boxes[b].reshape(4, -1).T, scores[b].reshape(-1, 1)], dim=1)
            out.append(flat)
        return out

    def decode(self, head: torch.Tensor, height: int, width: int) -> list[list[RawBox]]:
        results = []
        for flat in self.candidates(head, height, width):
            keep = flat[:, 4] >= self.threshold
            flat = flat[keep]
            if flat.shape[0] == 0:
                results.append([])
                continue
            flat[:, [0, 2]] = flat[:, [0, 2]].clamp(0, width)
            flat[:, [1, 3]] = flat[:, [1, 3]].clamp(0, height)
            valid = (flat[:, 2] > flat[:, 0]) & (flat[:, 3] > flat[:, 1])
            flat = flat[valid]
            order = nms(flat[:, :4].float(), flat[:, 4].float(), self.spec.nms_iou)
            results.append([tuple(float(v) for v in flat[i].tolist()) for i in order])
        return results

    def with_taps(self, taps: Sequence[int]) -> "ToyDetector":
        return ToyDetector(self.net, self.spec, taps, self.threshold, self.dtype, self.report)

    def with_threshold(self, threshold: float) -> "ToyDetector":
        return ToyDetector(self.net, self.spec, self.taps, threshold, self.dtype, self.report)

    def with_dtype(self, dtype: torch.dtype) -> "ToyDetector":
        if dtype == self.dtype:
            return self
        if dtype not in self._copies:
            self._copies[dtype] = ToyDetector(copy.deepcopy(self.net), self.spec, self.taps, self.threshold, dtype, self.report)
        return self._copies[dtype]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _targets(gts: Sequence[GroundTruth], gh: int, gw: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness (B, gh, gw) and distance targets (B, 4, gh, gw) in pixels."""
    cy, cx = _cell_centers(gh, gw)
    obj = torch.zeros(len(gts), gh, gw)
    dist = torch.zeros(len(gts), 4, gh, gw)
    best_area = torch.full((len(gts), gh, gw), float("inf"))
    for b, gt in enumerate(gts):
        for box in gt.boxes:
            bx, by = box.center
            w, h = box.x2 - box.x1, box.y2 - box.y1
            central = ((cx - bx).abs() <= 0.25 * w) & ((cy - by).abs() <= 0.25 * h)
            ci = min(int(by // STRIDE), gh - 1)
            cj = min(int(bx // STRIDE), gw - 1)
            central[ci, cj] = True
            take = central & (box.area < best_area[b])
            best_area[b][take] = box.area
            obj[b][take] = 1.0
            dist[b, 0][take] = (cx - box.x1)[take]
            dist[b, 1][take] = (cy - box.y1)[take]
            dist[b, 2][take] = (box.x2 - cx)[take]
            dist[b, 3][take] = (box.y2 - cy)[take]
    return obj, dist


def _loss(head: torch.Tensor, obj: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
    pos = obj > 0.5
    n_pos = max(1.0, float(pos.sum()))
    cls = sigmoid_focal_loss(head[:, 0], obj, alpha=0.5, gamma=2.0, reduction="sum") / n_pos
    if pos.any():
        pred = _distances(head[:, 1:5]).permute(0, 2, 3, 1)[pos]
        target = dist.permute(0, 2, 3, 1)[pos]
        reg = F.l1_loss(pred / DIST_SCALE, target / DIST_SCALE)
    else:
        reg = head.sum() * 0.0
    return cls + reg


def _stack(images: Sequence[Image]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.data for im in images]))


def _flip(gt: GroundTruth, width: int) -> GroundTruth:
    return GroundTruth(tuple(Box(width - b.x2, b.y1, width - b.x1, b.y2) for b in gt.boxes), gt.image_id)


def evaluate_detector(model: DetectorHandle, scenes: Sequence[tuple[Image, GroundTruth]], iou_threshold: float = 0.5) -> dict:
    matches = [match_detections(detect(model, image), gt, iou_threshold) for image, gt in scenes]
    return f1_score(aggregate(matches))


def train_toy_detector(
    spec: ToyDetectorSpec = ToyDetectorSpec(),
    train_count: int | None = None,
    val_count: int | None = None,
    scene: SceneConfig | None = None,
    dtype: torch.dtype = torch.float64,
) -> ToyDetector:
    """
    Train the toy detector on generated scenes and report held-out F1 (IoU 0.5).

    Validation scenes come from a disjoint index range of the same generator.
    """
    train_count = spec.train_count if train_count is None else int(train_count)
    val_count = spec.val_count if val_count is None else int(val_count)
    if train_count < 1 or val_count < 1:
        raise ConfigError("train_count and val_count must be >= 1")
    scene = scene or SceneConfig(seed=spec.seed)
    t0 = time.time()

    torch.manual_seed(spec.seed)
    net = ToyNet(spec.channels)
    train = generate_scenes(scene, range(train_count))
    val = generate_scenes(scene, range(VAL_INDEX_OFFSET, VAL_INDEX_OFFSET + val_count))
    logger.info("🔧 Generated %d train / %d val scenes (%.1fs)", train_count, val_count, time.time() - t0)

    images = _stack([im for im, _ in train])
    gts = [gt for _, gt in train]
    size = int(images.shape[2])
    gh = gw = -(-size // STRIDE)
    flipped = [_flip(gt, size) for gt in gts]
    obj, dist = _targets(gts, gh, gw)
    obj_f, dist_f = _targets(flipped, gh, gw)

    opt = torch.optim.Adam(net.parameters(), lr=spec.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, spec.epochs))
    gen = torch.Generator().manual_seed(spec.seed)
    loss_trace: list[float] = []

    net.train()
    for epoch in range(spec.epochs):
        order = torch.randperm(train_count, generator=gen)
        flips = torch.rand(train_count, generator=gen) < 0.5
        total, batches = 0.0, 0
        for start in range(0, train_count, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            x = images[idx].float()
            f = flips[idx]
            x = torch.where(f[:, None, None, None], x.flip(2), x)
            o = torch.where(f[:, None, None], obj_f[idx], obj[idx])
            d = torch.where(f[:, None, None, None], dist_f[idx], dist[idx])
            _, head = net(_preprocess(x))
            loss = _loss(head, o, d)
            if not torch.isfinite(loss):
                loss_trace.append(float("nan"))
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {batches + 1}", epoch + 1, loss_trace)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss)
            batches += 1
        sched.step()
        loss_trace.append(total / max(1, batches))
        logger.info("🔧 epoch %d/%d loss=%.4f", epoch + 1, spec.epochs, loss_trace[-1])

    handle = ToyDetector(net, spec, dtype=dtype)
    metrics = evaluate_detector(handle, val)
    handle.report = {
        "clean_f1": metrics["f1"],
        "precision": metrics["precision"],
        "recall": metrics["recall"],
        "epochs": spec.epochs,
        "seed": spec.seed,
        "train_count": train_count,
        "val_count": val_count,
        "threshold": handle.threshold,
        "loss_trace": loss_trace,
        "seconds": round(time.time() - t0, 2),
    }
    logger.info("✅ Toy detector held-out F1 %.3f (%.1fs)", metrics["f1"], time.time() - t0)
    return handle


def save_toy_detector(handle: ToyDetector, path: Path | str, scene: SceneConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().float().cpu() for k, v in handle.net.state_dict().items()}
    spec = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(handle.spec).items()}
    payload = {"state_dict": state, "spec": spec, "report": handle.report}
    if scene is not None:
        payload["scene"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(scene).items()}
    torch.save(payload, path)
    return path


def load_toy_detector(
    path: Path | str,
    threshold: float | None = None,
    dtype: torch.dtype = torch.float64,
    taps: Sequence[int] = (1, 2, 3),
) -> ToyDetector:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no detector weights at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    raw_spec = {k: tuple(v) if isinstance(v, list) else v for k, v in payload["spec"].items()}
    spec = ToyDetectorSpec(**raw_spec)
    net = ToyNet(spec.channels)
    net.load_state_dict(payload["state_dict"])
    if threshold is not None:
        spec = replace(spec, threshold=threshold)
    return ToyDetector(net, spec, taps, threshold, dtype, payload.get("report"))
