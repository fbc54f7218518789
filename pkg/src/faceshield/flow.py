# src/faceshield/flow.py
"""
Dense optical flow and perturbation warping.

Flow convention: FlowField(a -> b) holds (dx, dy) per pixel of frame a such that
b(q + flow(q)) ≈ a(q).

Providers:
- horn_schunck: coarse-to-fine Horn-Schunck (smoothness-regularized, iterative), built in
- farneback:    OpenCV calcOpticalFlowFarneback
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import cv2
import numpy as np

from faceshield.domain import Image, Perturbation
from faceshield.errors import InputError

# 4-neighbour + diagonal averaging kernel of the Horn-Schunck update
HS_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12],
     [1 / 6, 0.0, 1 / 6],
     [1 / 12, 1 / 6, 1 / 12]],
    dtype=np.float64,
)
MIN_PYRAMID_SIZE = 16
WARPS_PER_LEVEL = 2


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray
    source: int = 0
    target: int = 1

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise InputError(f"flow must be (H, W, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("flow holds non-finite displacements")
        object.__setattr__(self, "vectors", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vectors.shape  # type: ignore[return-value]

    @property
    def dx(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.vectors[..., 1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def __neg__(self) -> "FlowField":
        return FlowField(-self.vectors, self.source, self.target)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))


def to_gray(image: Image) -> np.ndarray:
    """Luma in [0, 1], float64."""
    return cv2.cvtColor(np.asarray(image.data), cv2.COLOR_RGB2GRAY).astype(np.float64) / 255.0


def _sample(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """img(q + flow(q)), bilinear, edge-replicated."""
    h, w = img.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    map_x = xs + flow[..., 0].astype(np.float32)
    map_y = ys + flow[..., 1].astype(np.float32)
    return cv2.remap(img.astype(np.float32), map_x, map_y, cv2.INTER_LINEAR,
                     borderMode=cv2.BORDER_REPLICATE).astype(np.float64)


def _hs_increment(a: np.ndarray, b_warped: np.ndarray, iterations: int, regularization: float) -> np.ndarray:
    """Horn-Schunck solve of Ix u + Iy v + It = 0 with smoothness weight `regularization`."""
    avg = 0.5 * (a + b_warped)
    iy, ix = np.gradient(avg)
    it = b_warped - a
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    denom = regularization ** 2 + ix ** 2 + iy ** 2
    for _ in range(iterations):
        u_bar = cv2.filter2D(u, -1, HS_KERNEL, borderType=cv2.BORDER_REPLICATE)
        v_bar = cv2.filter2D(v, -1, HS_KERNEL, borderType=cv2.BORDER_REPLICATE)
        t = (ix * u_bar + iy * v_bar + it) / denom
        u = u_bar - ix * t
        v = v_bar - iy * t
    return np.stack([u, v], axis=-1)


def horn_schunck(
    gray_a: np.ndarray,
    gray_b: np.ndarray,
    iterations: int = 100,
    regularization: float = 0.1,
    levels: int = 3,
) -> np.ndarray:
    """Coarse-to-fine: estimate at the coarsest level, upsample, warp b, refine."""
    pyr_a, pyr_b = [gray_a], [gray_b]
    while len(pyr_a) < levels and min(pyr_a[-1].shape) // 2 >= MIN_PYRAMID_SIZE:
        pyr_a.append(cv2.pyrDown(pyr_a[-1]))
        pyr_b.append(cv2.pyrDown(pyr_b[-1]))

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for a, b in zip(reversed(pyr_a), reversed(pyr_b)):
        h, w = a.shape
        if flow.shape[:2] != (h, w):
            flow = cv2.resize(flow, (w, h), interpolation=cv2.INTER_LINEAR) * 2.0
        for _ in range(WARPS_PER_LEVEL):
            flow = flow + _hs_increment(a, _sample(b, flow), iterations, regularization)
    return flow


def farneback(gray_a: np.ndarray, gray_b: np.ndarray, **_) -> np.ndarray:
    a = np.clip(gray_a * 255.0, 0, 255).astype(np.uint8)
    b = np.clip(gray_b * 255.0, 0, 255).astype(np.uint8)
    flow = cv2.calcOpticalFlowFarneback(a, b, None, 0.5, 3, 15, 3, 5, 1.2, 0)
    return flow.astype(np.float64)


FLOW_PROVIDERS: dict[str, Callable[..., np.ndarray]] = {
    "horn_schunck": horn_schunck,
    "farneback": farneback,
}


def compute_flow(
    frame_a: Image,
    frame_b: Image,
    method: str = "horn_schunck",
    iterations: int = 100,
    regularization: float = 0.1,
    levels: int = 3,
    source: int = 0,
    target: int = 1,
) -> FlowField:
    if frame_a.shape != frame_b.shape:
        raise InputError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if method not in FLOW_PROVIDERS:
        raise InputError(f"unknown flow provider {method!r}")
    gray_a, gray_b = to_gray(frame_a), to_gray(frame_b)
    if np.array_equal(gray_a, gray_b):
        return FlowField(np.zeros(gray_a.shape + (2,)), source, target)
    vectors = FLOW_PROVIDERS[method](
        gray_a, gray_b, iterations=iterations, regularization=regularization, levels=levels
    )
    return FlowField(vectors, source, target)


def warp_array(values: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """
    Backward-sampling bilinear warp: out(q) = values(q - flow(q)).

    Neighbours outside the frame contribute 0, so each output is a convex combination of
    inputs and zeros. Integer flows reproduce a plain shift with zero fill exactly.
    """
    h, w = values.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs - flow[..., 0]
    sy = ys - flow[..., 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    out = np.zeros_like(values, dtype=np.float64)
    for oy, ox, weight in (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        yi, xi = y0 + oy, x0 + ox
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (weight > 0)
        picked = values[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        wgt = np.where(valid, weight, 0.0)
        out += (wgt[..., None] * picked) if values.ndim == 3 else wgt * picked
    return out


def warp_perturbation(perturbation: Perturbation, flow: FlowField) -> Perturbation:
    if perturbation.data.shape[:2] != flow.shape[:2]:
        raise InputError(f"perturbation {perturbation.data.shape} and flow {flow.shape} differ in size")
    return Perturbation(warp_array(perturbation.data, flow.vectors), perturbation.epsilon)
