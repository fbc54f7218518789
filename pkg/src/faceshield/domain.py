# src/faceshield/domain.py
"""
Shared value types.

Images are HxWx3 uint8 arrays in RGB order. Everything that gets optimized works on
`Image.float_view` (float64, same values) and comes back through `Image.from_float`
or `bounded_image`, which are the only places pixel values are quantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from faceshield.errors import InputError

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"expected an HxWx3 image, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InputError(f"empty image of shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all(np.isfinite(arr)) or arr.min() < PIXEL_MIN or arr.max() > PIXEL_MAX:
                raise InputError("pixel values must lie in [0, 255]")
            if not np.array_equal(arr, np.round(arr)):
                raise InputError("Image holds integer intensities; use Image.from_float for real values")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def float_view(self) -> np.ndarray:
        return self.data.astype(np.float64)

    @classmethod
    def from_float(cls, values: np.ndarray, image_id: str = "") -> "Image":
        """Round to nearest and truncate to [0, 255]."""
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise InputError("cannot build an Image from non-finite values")
        return cls(np.clip(np.rint(values), PIXEL_MIN, PIXEL_MAX).astype(np.uint8), image_id)

    @classmethod
    def zeros(cls, height: int, width: int, image_id: str = "") -> "Image":
        return cls(np.zeros((height, width, 3), dtype=np.uint8), image_id)

    def with_id(self, image_id: str) -> "Image":
        return Image(self.data, image_id)


def bounded_image(candidate: np.ndarray, origin: Image, epsilon: float, image_id: str = "") -> Image:
    """
    Quantize a real-valued candidate to an Image that stays inside the ε-ball of `origin`.

    Rounding happens inside [ceil(x-ε), floor(x+ε)] ∩ [0, 255], so the integer result
    never exceeds ε even when ε is fractional.
    """
    x = origin.float_view
    lo = np.maximum(np.ceil(x - epsilon), PIXEL_MIN)
    hi = np.minimum(np.floor(x + epsilon), PIXEL_MAX)
    q = np.clip(np.rint(np.asarray(candidate, dtype=np.float64)), lo, hi)
    return Image(q.astype(np.uint8), image_id or origin.image_id)


@dataclass(frozen=True)
class Perturbation:
    data: np.ndarray
    epsilon: float

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"perturbation must be HxWx3, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def linf(self) -> float:
        return float(np.abs(self.data).max()) if self.data.size else 0.0

    @classmethod
    def between(cls, adversarial: Image, clean: Image, epsilon: float) -> "Perturbation":
        if adversarial.shape != clean.shape:
            raise InputError(f"shape mismatch {adversarial.shape} vs {clean.shape}")
        return cls(adversarial.float_view - clean.float_view, epsilon)

    @classmethod
    def zeros_like(cls, image: Image, epsilon: float) -> "Perturbation":
        return cls(np.zeros(image.shape, dtype=np.float64), epsilon)

    def apply(self, image: Image) -> Image:
        if image.shape != self.data.shape:
            raise InputError(f"shape mismatch {image.shape} vs {self.data.shape}")
        return bounded_image(image.float_view + self.data, image, self.epsilon)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) for c in coords):
            raise InputError(f"non-finite box {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InputError(f"degenerate box {coords}")
        for name, value in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, float(value))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def within(self, width: int, height: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass(frozen=True)
class DetectionBox(Box):
    score: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not (0.0 <= self.score <= 1.0):
            raise InputError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "score", float(self.score))


def clip_box(
    x1: float, y1: float, x2: float, y2: float, width: int, height: int, score: float
) -> DetectionBox | None:
    """Clip raw coordinates to the image; None when nothing with positive area is left."""
    x1, x2 = float(np.clip(x1, 0, width)), float(np.clip(x2, 0, width))
    y1, y2 = float(np.clip(y1, 0, height)), float(np.clip(y2, 0, height))
    if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
        return None
    return DetectionBox(x1, y1, x2, y2, float(np.clip(score, 0.0, 1.0)))


@dataclass(frozen=True)
class DetectionSet:
    boxes: tuple[DetectionBox, ...] = ()
    image_id: str = ""
    threshold: float = 0.0

    def __post_init__(self):
        kept = [b for b in self.boxes if b.score >= self.threshold]
        kept.sort(key=lambda b: -b.score)
        object.__setattr__(self, "boxes", tuple(kept))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def to_dict(self) -> dict:
        return {
            "path": self.image_id,
            "boxes": [b.as_list() for b in self.boxes],
            "scores": [b.score for b in self.boxes],
        }


@dataclass(frozen=True)
class GroundTruth:
    boxes: tuple[Box, ...] = ()
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def validate(self, width: int, height: int) -> None:
        for b in self.boxes:
            if not b.within(width, height):
                raise InputError(f"ground-truth box {b.as_list()} outside {width}x{height}")

    def to_dict(self) -> dict:
        return {"path": self.image_id, "boxes": [b.as_list() for b in self.boxes]}


@dataclass(frozen=True)
class FeatureSet:
    """K tapped activations of one image, each (channels, height, width)."""

    tensors: tuple[np.ndarray, ...]
    layers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        tensors = tuple(np.asarray(t) for t in self.tensors)
        layers = tuple(self.layers) or tuple(range(1, len(tensors) + 1))
        if len(layers) != len(tensors):
            raise InputError(f"{len(tensors)} tensors for {len(layers)} declared layers")
        for layer, t in zip(layers, tensors):
            if t.ndim != 3:
                raise InputError(f"layer {layer} tensor must be (C, H, W), got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise InputError(f"layer {layer} holds non-finite values")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.tensors)

    def layer(self, index: int) -> np.ndarray:
        """Tensor of 1-based layer `index`."""
        return self.tensors[self.layers.index(index)]

    def restrict(self, subset: Iterable[int]) -> "FeatureSet":
        subset = tuple(subset)
        return FeatureSet(tuple(self.layer(i) for i in subset), subset)

