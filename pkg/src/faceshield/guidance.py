# src/faceshield/guidance.py
"""
Importance-guided maps.

For every tapped layer i in φ the map M_i says how much each feature element matters to
the detector. It is the gradient of a cosine pseudo-objective between the clean last-layer
features h_K and the features h'_K of a randomly masked copy of the image, taken w.r.t.
h'_i and averaged over m masks:

    M_i = normalize( 1/m Σ_j  ∂ cos(h_K, h'_K(mask_j ⊙ x)) / ∂ h'_i )

Only the h' branch is masked; h_K always comes from the clean image. Maps are computed
once per image and held fixed while the attack runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from faceshield.config import GuidanceConfig, derive_seed
from faceshield.detector import DetectorHandle, extract_features, gradient
from faceshield.domain import Image
from faceshield.errors import ConfigError, InputError
from faceshield.normalize import ZERO_GUARD, normalize_map

NORM_GUARD = 1e-12


@dataclass(frozen=True)
class ImportanceMap:
    maps: dict[int, np.ndarray]
    samples: int
    mask_probability: float
    seed: int
    raw: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.maps))

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.maps[layer]

    def dump(self, path: Path | str) -> Path:
        """Diagnostic archive: normalized and raw maps per layer plus aggregation metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"layer{i}": m for i, m in self.maps.items()}
        arrays.update({f"raw_layer{i}": m for i, m in self.raw.items()})
        np.savez_compressed(path, samples=self.samples, mask_probability=self.mask_probability,
                            seed=self.seed, **arrays)
        return path


def cosine_similarity(reference: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """
    Per-sample cosine between flattened tensors: reference (C, h, w) or (1, C, h, w)
    against features (B, C, h, w). Returns (B,). A norm below NORM_GUARD gives 0.
    """
    ref = reference.reshape(1, -1)
    feat = features.reshape(features.shape[0], -1)
    ref_norm = ref.norm(dim=1)
    feat_norm = feat.norm(dim=1)
    ok = (ref_norm >= NORM_GUARD) & (feat_norm >= NORM_GUARD)
    denom = torch.where(ok, ref_norm * feat_norm, torch.ones_like(feat_norm))
    cos = (feat * ref).sum(dim=1) / denom
    return torch.where(ok, cos, torch.zeros_like(cos))


def pseudo_objective(h_clean_last, h_adv_last) -> float:
    """Cosine similarity of the flattened clean and attacked last-layer features."""
    ref = torch.as_tensor(np.asarray(h_clean_last, dtype=np.float64))
    adv = torch.as_tensor(np.asarray(h_adv_last, dtype=np.float64))
    if ref.shape != adv.shape:
        raise InputError(f"feature shapes differ: {tuple(ref.shape)} vs {tuple(adv.shape)}")
    value = float(cosine_similarity(ref, adv.reshape(1, -1))[0])
    return float(np.clip(value, -1.0, 1.0))


def _mask_draws(height: int, width: int, p: float, seeds: Sequence[int]) -> np.ndarray:
    """(len(seeds), H, W, 1) keep-masks; each pixel (all channels together) zeroed with probability p."""
    return np.stack(
        [(np.random.default_rng(s).random((height, width)) >= p).astype(np.float64) for s in seeds]
    )[..., None]


def random_mask(image: Image, p: float, seed: int) -> Image:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must be in [0, 1], got {p}")
    keep = _mask_draws(image.height, image.width, p, [seed])[0]
    return Image((image.data * keep).astype(np.uint8), image.image_id)


def sample_seeds(config: GuidanceConfig) -> list[int]:
    return [derive_seed(config.seed, "mask", j) for j in range(int(config.samples))]


def averaged_gradients(model: DetectorHandle, image: Image, config: GuidanceConfig) -> dict[int, np.ndarray]:
    """Mean over the m masked copies of ∂L_pse/∂h'_i for every i in φ, before normalization."""
    missing = [i for i in config.layers if i not in model.taps]
    if missing:
        raise ConfigError(f"guidance layers {missing} are not tapped by {model.name} (taps {model.taps})")

    last = max(model.taps)
    last_position = model.taps.index(last)
    h_ref = torch.as_tensor(extract_features(model, image).layer(last), dtype=model.dtype)
    masks = torch.as_tensor(
        _mask_draws(image.height, image.width, config.mask_probability, sample_seeds(config)), dtype=model.dtype
    )

    def masked_copies(x: torch.Tensor) -> torch.Tensor:
        return x.unsqueeze(0) * masks

    def objective(feats: list[torch.Tensor]) -> torch.Tensor:
        return cosine_similarity(h_ref, feats[last_position]).sum()

    result = gradient(model, image, objective, transform=masked_copies)
    out = {}
    for tap, g in zip(model.taps, result.feature_grads):
        if tap in config.layers:
            g = g if g.ndim == 4 else g[None]
            out[tap] = g.mean(axis=0)
    return out


def importance_maps(model: DetectorHandle, image: Image, config: GuidanceConfig) -> ImportanceMap:
    raw = averaged_gradients(model, image, config)
    maps = {}
    for layer, values in raw.items():
        if float(np.abs(values).max()) < ZERO_GUARD:
            maps[layer] = np.zeros_like(values)
        else:
            maps[layer] = normalize_map(values, config.normalization)
    return ImportanceMap(maps, int(config.samples), float(config.mask_probability), int(config.seed), raw)
