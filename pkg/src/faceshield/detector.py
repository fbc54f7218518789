# src/faceshield/detector.py
"""
Detector adapter contract and the operations every attack and metric goes through.

An adapter wraps any face detector that can

    - run a forward pass on pixel tensors (B, H, W, 3) in 0-255 units,
    - expose K tapped feature tensors from that same pass,
    - decode its head output into scored pixel boxes.

Preprocessing (scaling, normalization, resizing) happens inside `forward`, so autograd
reports gradients in original pixel coordinates and ε keeps its 0-255 meaning.
"""

from __future__ import annotations

import abc
from typing import Callable, NamedTuple, Sequence

import cv2
import numpy as np
import torch

from faceshield.domain import DetectionSet, FeatureSet, Image, clip_box
from faceshield.errors import ConfigError, InputError, NumericalError

Objective = Callable[[list[torch.Tensor]], torch.Tensor]
PixelTransform = Callable[[torch.Tensor], torch.Tensor]

RawBox = tuple[float, float, float, float, float]

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class DetectorHandle(abc.ABC):
    """
    Read-only after construction; detect/extract_features/gradient are reentrant.

    Subclasses declare `depth` (number of tappable stages) and implement `forward` and
    `decode`. Tap indices are 1-based and validated here, never at call time.
    """

    depth: int = 0
    name: str = "detector"

    def __init__(
        self,
        taps: Sequence[int],
        threshold: float,
        input_size: tuple[int, int] | None = None,
        dtype: torch.dtype = torch.float64,
    ):
        taps = tuple(int(t) for t in taps)
        if not taps:
            raise ConfigError("a detector must declare at least one feature tap")
        bad = [t for t in taps if t < 1 or t > self.depth]
        if bad:
            raise ConfigError(f"{self.name}: tap index {bad} beyond network depth {self.depth}")
        self.taps = taps
        self.threshold = float(threshold)
        self.input_size = input_size
        self.dtype = dtype

    @property
    def k(self) -> int:
        return len(self.taps)

    @abc.abstractmethod
    def forward(self, pixels: torch.Tensor) -> tuple[list[torch.Tensor], object]:
        """Tapped features (each (B, C, h, w), declared order) and the raw head output."""

    @abc.abstractmethod
    def decode(self, head: object, height: int, width: int) -> list[list[RawBox]]:
        """Per-image candidate boxes (x1, y1, x2, y2, score) in pixel coordinates."""

    def features(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        """Tapped features alone. Adapters that can stop before their head override this."""
        return self.forward(pixels)[0]

    def with_dtype(self, dtype: torch.dtype) -> "DetectorHandle":
        """The same detector computing in `dtype`; adapters that cannot switch return self."""
        return self

    def check_image(self, image: Image) -> None:
        if self.input_size is not None and (image.height, image.width) != tuple(self.input_size):
            raise InputError(
                f"{self.name} expects {self.input_size[0]}x{self.input_size[1]} input, "
                f"got {image.height}x{image.width}"
            )

    def describe(self) -> dict:
        return {"adapter": self.name, "taps": list(self.taps), "threshold": self.threshold}


def _as_image(image) -> Image:
    if isinstance(image, Image):
        return image
    return Image(np.asarray(image))


def _pixels(model: DetectorHandle, values: np.ndarray, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=model.dtype, requires_grad=requires_grad)


def detect(model: DetectorHandle, image: Image) -> DetectionSet:
    image = _as_image(image)
    model.check_image(image)
    with torch.no_grad():
        _, head = model.forward(_pixels(model, image.float_view).unsqueeze(0))
        raw = model.decode(head, image.height, image.width)[0]
    boxes = []
    for x1, y1, x2, y2, score in raw:
        box = clip_box(x1, y1, x2, y2, image.width, image.height, score)
        if box is not None:
            boxes.append(box)
    return DetectionSet(tuple(boxes), image.image_id, model.threshold)


def detect_many(model: DetectorHandle, images: Sequence[Image]) -> list[DetectionSet]:
    return [detect(model, im) for im in images]


def extract_features(model: DetectorHandle, image: Image) -> FeatureSet:
    image = _as_image(image)
    model.check_image(image)
    with torch.no_grad():
        feats = model.features(_pixels(model, image.float_view).unsqueeze(0))
    return FeatureSet(tuple(f[0].cpu().numpy().astype(np.float64) for f in feats), model.taps)


def _checked_values(model: DetectorHandle, image: Image | np.ndarray) -> np.ndarray:
    values = image.float_view if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] != 3:
        raise InputError(f"expected an HxWx3 image, got shape {values.shape}")
    model.check_image(Image.zeros(values.shape[0], values.shape[1]))
    return values


def evaluate(model: DetectorHandle, image: Image | np.ndarray, objective: Objective) -> float:
    """Objective value at one point, forward pass only."""
    values = _checked_values(model, image)
    with torch.no_grad():
        value = objective(model.features(_pixels(model, values).unsqueeze(0)))
    value = float(value)
    if not np.isfinite(value):
        raise NumericalError("objective is not finite", payload={"value": value, "adapter": model.name})
    return value


class GradientResult(NamedTuple):
    value: float
    input_grad: np.ndarray
    feature_grads: list[np.ndarray]


def gradient(
    model: DetectorHandle,
    image: Image | np.ndarray,
    objective: Objective,
    transform: PixelTransform | None = None,
) -> GradientResult:
    """
    Objective value, d objective / d pixels (H, W, 3), and d objective / d each tapped tensor.

    `image` may be an Image or a real-valued HxWx3 array (attack iterates are not integer).
    `transform` maps the (H, W, 3) pixel tensor to one image or a batch (B, H, W, 3) before
    the forward pass; the input gradient is chained back through it. Feature gradients keep
    the batch axis when the transform produced more than one image.
    """
    values = _checked_values(model, image)

    x = _pixels(model, values, requires_grad=True)
    inp = transform(x) if transform is not None else x
    if inp.dim() == 3:
        inp = inp.unsqueeze(0)
    feats = model.features(inp)
    value = objective(feats)
    if not torch.is_tensor(value):
        value = torch.as_tensor(value, dtype=model.dtype)
    if not torch.isfinite(value).all():
        raise NumericalError(
            "objective is not finite",
            payload={"value": float(value.detach()), "shape": list(values.shape), "adapter": model.name},
        )

    if value.requires_grad:
        grads = torch.autograd.grad(value, [x, *feats], allow_unused=True)
    else:
        grads = (None,) * (1 + len(feats))
    tensors = [x, *feats]
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, tensors)]

    input_grad = grads[0].detach().cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(input_grad)):
        raise NumericalError("input gradient is not finite", payload={"value": float(value.detach())})
    feature_grads = [g.detach().cpu().numpy().astype(np.float64) for g in grads[1:]]
    if inp.shape[0] == 1:
        feature_grads = [g[0] for g in feature_grads]
    return GradientResult(float(value.detach()), input_grad, feature_grads)


def crop_faces(image: Image, detections: DetectionSet, output_size: int | tuple[int, int]) -> list[Image]:
    """
    One resized crop per detection. No detections yields a single all-zero crop,
    which is what a polluted face set hands to the downstream face-swap model.
    """
    out_h, out_w = (output_size, output_size) if isinstance(output_size, int) else output_size
    if len(detections) == 0:
        return [Image.zeros(out_h, out_w, image.image_id)]
    crops = []
    for box in detections:
        x1 = int(np.clip(np.floor(box.x1), 0, image.width - 1))
        y1 = int(np.clip(np.floor(box.y1), 0, image.height - 1))
        x2 = int(np.clip(np.ceil(box.x2), x1 + 1, image.width))
        y2 = int(np.clip(np.ceil(box.y2), y1 + 1, image.height))
        region = np.ascontiguousarray(image.data[y1:y2, x1:x2])
        if region.shape[:2] == (out_h, out_w):
            resized = region.copy()
        else:
            resized = cv2.resize(region, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
        crops.append(Image(resized, image.image_id))
    return crops
