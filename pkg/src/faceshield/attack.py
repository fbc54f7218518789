# src/faceshield/attack.py
"""
The feature-space attack family.

Minimize   J(x') = Σ_{i∈φ} α_i · <M_i, h'_i(x')>   subject to ||x' - x||_∞ <= ε, x' ∈ [0, 255]

with signed-gradient steps that DESCEND J:

    ada-fgsm   one step of size ε on sign(∇J)
    ada-bim    T steps of size α = ε/T on sign(∇J)
    ada-mim    g <- μ g + ∇J / ||∇J||_1 ; step on sign(g)
    ada-nim    as mim, gradient taken at the look-ahead point x' - α μ g
    ada-dim    as mim, gradient taken through a random resize-and-pad of x'
    ada-dim++  as dim, gradient averaged over n spectrum-transformed copies, each also
               evaluated at o random neighbours inside the ε-ball
    random     uniform noise in [-ε, ε] (control, no gradients)

Every iterate is projected onto the ε-ball ∩ [0, 255]; the bound is checked each step.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from faceshield.config import AttackConfig, derive_seed
from faceshield.detector import DTYPES, DetectorHandle, evaluate, gradient
from faceshield.domain import PIXEL_MAX, PIXEL_MIN, FeatureSet, Image, Perturbation, bounded_image
from faceshield.errors import AttackError, InputError, NumericalError
from faceshield.guidance import ImportanceMap, importance_maps
from faceshield.spectral import dim_torch, seeded_generator, spectrum_torch

BOUND_TOLERANCE = 1e-9


@dataclass
class AttackState:
    adversarial: np.ndarray
    accumulated: np.ndarray
    iteration: int = 0
    trace: list[float] = field(default_factory=list)

    @classmethod
    def start(cls, clean: np.ndarray) -> "AttackState":
        return cls(clean.copy(), np.zeros_like(clean))


@dataclass(frozen=True)
class AttackReport:
    method: str
    perturbation: Perturbation
    objective_trace: list[float]
    initial_objective: float | None
    iterations: int
    wall_time: float
    seed: int

    def sidecar(self, clean_path: str | None = None) -> dict:
        return {
            "method": self.method,
            "epsilon": self.perturbation.epsilon,
            "iterations": self.iterations,
            "seed": self.seed,
            "objective_trace": list(self.objective_trace),
            "initial_objective": self.initial_objective,
            "linf": self.perturbation.linf,
            "wall_time": round(self.wall_time, 4),
            "clean_path": clean_path,
        }


# ---------------------------------------------------------------------------
# Objective and projection
# ---------------------------------------------------------------------------

def feature_objective(features, maps, weights) -> float:
    """
    Σ_i α_i · Σ(M_i ⊙ h'_i).

    `features` and `maps` are either aligned sequences of arrays or a FeatureSet and an
    ImportanceMap (aligned by layer index). `weights` is a sequence aligned with the maps
    or a mapping layer -> α.
    """
    if isinstance(maps, ImportanceMap):
        layers = maps.layers
        map_list = [maps[i] for i in layers]
        if isinstance(features, FeatureSet):
            feat_list = [features.layer(i) for i in layers]
        else:
            feat_list = list(features)
        weight_list = [weights[i] for i in layers] if isinstance(weights, Mapping) else list(weights)
    else:
        map_list = list(maps)
        feat_list = list(features.tensors) if isinstance(features, FeatureSet) else list(features)
        weight_list = list(weights.values()) if isinstance(weights, Mapping) else list(weights)

    if not (len(map_list) == len(feat_list) == len(weight_list)):
        raise InputError(f"{len(feat_list)} feature layers, {len(map_list)} maps, {len(weight_list)} weights")
    total = 0.0
    for h, m, a in zip(feat_list, map_list, weight_list):
        h, m = np.asarray(h, dtype=np.float64), np.asarray(m, dtype=np.float64)
        if h.shape != m.shape:
            raise InputError(f"map shape {m.shape} does not match feature shape {h.shape}")
        total += float(a) * float(np.sum(m * h))
    return total


def layer_weights(config: AttackConfig, maps: ImportanceMap) -> dict[int, float]:
    return {i: config.weight_for(i) for i in maps.layers}


def objective_fn(model: DetectorHandle, maps: ImportanceMap, weights: Mapping[int, float]) -> Callable:
    """Torch form of feature_objective over a batch of tapped features (mean over the batch)."""
    tensors = {i: torch.as_tensor(maps[i], dtype=model.dtype) for i in maps.layers}
    positions = {tap: k for k, tap in enumerate(model.taps)}
    missing = [i for i in maps.layers if i not in positions]
    if missing:
        raise InputError(f"maps for layers {missing} but {model.name} taps {model.taps}")

    def objective(feats: list[torch.Tensor]) -> torch.Tensor:
        batch = feats[0].shape[0]
        total = feats[0].new_zeros(())
        for i, m in tensors.items():
            total = total + weights[i] * (feats[positions[i]] * m).sum()
        return total / batch

    return objective


def project_values(candidate: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    lo = np.maximum(origin - epsilon, PIXEL_MIN)
    hi = np.minimum(origin + epsilon, PIXEL_MAX)
    return np.clip(candidate, lo, hi)


def project_linf(candidate, origin: Image, epsilon: float) -> Image:
    candidate = np.asarray(candidate.float_view if isinstance(candidate, Image) else candidate, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise InputError(f"shape mismatch {candidate.shape} vs {origin.shape}")
    return bounded_image(project_values(candidate, origin.float_view, epsilon), origin, epsilon)


def _check_bound(adv: np.ndarray, clean: np.ndarray, epsilon: float, trace: list[float], t: int) -> None:
    dev = float(np.abs(adv - clean).max()) if adv.size else 0.0
    if dev > epsilon + BOUND_TOLERANCE or adv.min() < PIXEL_MIN or adv.max() > PIXEL_MAX:
        raise AttackError(f"bound violated at iteration {t}: linf={dev:.6f} > eps={epsilon}", trace)


# ---------------------------------------------------------------------------
# Gradient estimators per method
# ---------------------------------------------------------------------------

def _diverse_transform(config: AttackConfig, gen: torch.Generator):
    def transform(x: torch.Tensor) -> torch.Tensor:
        return dim_torch(x, config.dim_resize_range, config.dim_probability, gen)

    return transform


def _spectrum_transform(config: AttackConfig, gen: torch.Generator):
    """n spectrum-transformed copies of x and of each of its o neighbours, as one batch."""
    eps = float(config.epsilon)
    stride = int(config.neighbor_samples) + 1
    copies = int(config.spectrum_samples) * stride

    def transform(x: torch.Tensor) -> torch.Tensor:
        batch = x.unsqueeze(0).expand(copies, *x.shape)
        if stride > 1 and eps > 0:
            offsets = (torch.rand(batch.shape, generator=gen, dtype=x.dtype) * 2.0 - 1.0) * eps
            offsets[::stride] = 0.0
            batch = (batch + offsets).clamp(PIXEL_MIN, PIXEL_MAX)
        diverse = torch.stack([dim_torch(b, config.dim_resize_range, config.dim_probability, gen) for b in batch])
        return spectrum_torch(diverse, config.spectrum_sigma, config.spectrum_rho, gen)

    return transform


def _l1_normalized(grad: np.ndarray) -> np.ndarray:
    norm = float(np.abs(grad).sum())
    return grad / norm if norm > 0 else np.zeros_like(grad)


# ---------------------------------------------------------------------------
# Main entry point
# ---------------------------------------------------------------------------

def random_noise(image: Image, epsilon: float, seed: int) -> tuple[Image, AttackReport]:
    t0 = time.time()
    rng = np.random.default_rng(derive_seed(seed, "noise"))
    noise = rng.uniform(-epsilon, epsilon, size=image.shape)
    adv = bounded_image(image.float_view + noise, image, epsilon)
    report = AttackReport("random", Perturbation.between(adv, image, epsilon), [], None, 0, time.time() - t0, seed)
    return adv, report


def run_attack(
    model: DetectorHandle,
    image: Image,
    config: AttackConfig,
    maps: ImportanceMap | None = None,
) -> tuple[Image, AttackReport]:
    """
    Protect one image. Importance maps are computed once from the clean image unless
    supplied (the video pipeline and ablations reuse them).

    Gradients run in config.precision; iterates, projection and the bound check stay float64.
    """
    if config.method == "random":
        return random_noise(image, config.epsilon, config.seed)

    t0 = time.time()
    clean = image.float_view
    eps = float(config.epsilon)
    alpha = config.alpha
    mu = float(config.momentum)
    method = config.method
    model = model.with_dtype(DTYPES[config.precision])

    maps = maps if maps is not None else importance_maps(model, image, config.guidance)
    weights = layer_weights(config, maps)
    objective = objective_fn(model, maps, weights)
    gen = seeded_generator(config.seed)

    if method == "ada-dim":
        transform = _diverse_transform(config, gen)
    elif method == "ada-dim++":
        transform = _spectrum_transform(config, gen)
    else:
        transform = None

    state = AttackState.start(clean)
    try:
        initial = evaluate(model, clean, objective)
    except NumericalError as e:
        raise AttackError(f"objective failed on the clean image: {e}", []) from e

    for t in range(config.effective_iterations):
        if method == "ada-nim":
            point = state.adversarial - alpha * mu * state.accumulated
        else:
            point = state.adversarial

        try:
            grad = gradient(model, point, objective, transform=transform).input_grad
        except NumericalError as e:
            raise AttackError(f"gradient failed at iteration {t}: {e}", state.trace) from e

        if method in ("ada-fgsm", "ada-bim"):
            state.accumulated = grad
        else:
            state.accumulated = mu * state.accumulated + _l1_normalized(grad)

        state.adversarial = project_values(state.adversarial - alpha * np.sign(state.accumulated), clean, eps)
        state.iteration = t + 1
        _check_bound(state.adversarial, clean, eps, state.trace, state.iteration)
        try:
            state.trace.append(evaluate(model, state.adversarial, objective))
        except NumericalError as e:
            raise AttackError(f"objective failed at iteration {t}: {e}", state.trace) from e

    adv = bounded_image(state.adversarial, image, eps)
    report = AttackReport(
        method=method,
        perturbation=Perturbation.between(adv, image, eps),
        objective_trace=list(state.trace),
        initial_objective=initial,
        iterations=state.iteration,
        wall_time=time.time() - t0,
        seed=config.seed,
    )
    return adv, report


def evaluate_objective(model: DetectorHandle, image, maps: ImportanceMap, config: AttackConfig) -> float:
    """J at one point (an Image or real-valued array), in the attack's precision."""
    model = model.with_dtype(DTYPES[config.precision])
    return evaluate(model, image, objective_fn(model, maps, layer_weights(config, maps)))


def attack_many(
    model: DetectorHandle,
    images: Sequence[Image],
    config: AttackConfig,
    workers: int = 1,
) -> list[tuple[Image, AttackReport]]:
    """
    Attack a corpus. Image j uses the attack seed derived for index j, so the result does
    not depend on `workers`; outputs come back in input order.
    """
    configs = [replace(config, seed=derive_seed(config.seed, "attack", j)) for j in range(len(images))]
    if workers <= 1:
        return [run_attack(model, im, c) for im, c in zip(images, configs)]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda args: run_attack(model, *args), zip(images, configs)))
