# src/faceshield/spectral.py
"""
Input transforms used by the diverse-input attack variants.

Both transforms exist twice: a torch form used inside the attack loop (differentiable, so
the gradient is chained back to the untransformed pixels) and a numpy-facing form for
direct use and tests. Randomness always comes from an explicitly seeded torch.Generator.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from faceshield.config import AttackConfig
from faceshield.domain import PIXEL_MAX, PIXEL_MIN, Image


@lru_cache(maxsize=16)
def _dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    return basis


def _basis(n: int, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(_dct_basis(n), dtype=like.dtype, device=like.device)


def dct_2d(x: torch.Tensor) -> torch.Tensor:
    """2D DCT over the spatial axes of (..., H, W, C)."""
    dh, dw = _basis(x.shape[-3], x), _basis(x.shape[-2], x)
    return torch.einsum("kh,...hwc,lw->...klc", dh, x, dw)


def idct_2d(y: torch.Tensor) -> torch.Tensor:
    dh, dw = _basis(y.shape[-3], y), _basis(y.shape[-2], y)
    return torch.einsum("kh,...klc,lw->...hwc", dh, y, dw)


def seeded_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & 0xFFFFFFFFFFFF)


def dim_torch(
    x: torch.Tensor,
    resize_range: tuple[float, float],
    probability: float,
    gen: torch.Generator,
) -> torch.Tensor:
    """With probability q: shrink by a random ratio, zero-pad back to (H, W) at a random offset."""
    draws = torch.rand(4, generator=gen, dtype=torch.float64)
    if float(draws[0]) >= probability:
        return x
    h, w = x.shape[0], x.shape[1]
    lo, hi = resize_range
    ratio = lo + (hi - lo) * float(draws[1])
    nh, nw = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    rescaled = F.interpolate(x.permute(2, 0, 1).unsqueeze(0), size=(nh, nw), mode="bilinear", align_corners=False)
    top = int(float(draws[2]) * (h - nh + 1))
    left = int(float(draws[3]) * (w - nw + 1))
    top, left = min(top, h - nh), min(left, w - nw)
    padded = F.pad(rescaled, (left, w - nw - left, top, h - nh - top), mode="constant", value=0.0)
    return padded[0].permute(1, 2, 0)


def spectrum_torch(x: torch.Tensor, sigma: float, rho: float, gen: torch.Generator) -> torch.Tensor:
    """
    Gaussian noise (std sigma, 0-255 units) in pixel space, forward DCT, multiply by a
    mask drawn from U[1 - rho, 1 + rho], inverse DCT, clip to [0, 255].
    """
    v = x / PIXEL_MAX
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * (sigma / PIXEL_MAX)
    spec = dct_2d(v + noise)
    mask = 1.0 - rho + 2.0 * rho * torch.rand(spec.shape, generator=gen, dtype=x.dtype)
    out = idct_2d(spec * mask) * PIXEL_MAX
    return out.clamp(PIXEL_MIN, PIXEL_MAX)


def _values(image) -> np.ndarray:
    return image.float_view if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def dim_transform(image, params: AttackConfig, seed: int) -> np.ndarray:
    x = torch.as_tensor(_values(image))
    out = dim_torch(x, params.dim_resize_range, params.dim_probability, seeded_generator(seed))
    return out.numpy().copy()


def spectrum_transform(image, sigma: float, seed: int, rho: float = 0.5) -> np.ndarray:
    x = torch.as_tensor(_values(image))
    return spectrum_torch(x, sigma, rho, seeded_generator(seed)).numpy().copy()
