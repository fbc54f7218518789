# src/faceshield/config.py
"""
Configuration for faceshield runs.

Defaults live in config.yaml next to this file. A run config is built in three layers:

    1) config.yaml (package defaults)
    2) a JSON file passed with --config (same sections, same keys)
    3) explicit CLI flags

Every layer is merged section by section and any key the defaults do not know is a
ConfigError. Typed views are frozen dataclasses; each validates its own ranges.

A run manifest is not a config file: it holds already-derived seeds, so it is read back
with run_config_from_manifest instead of going through the three layers again.
"""

from __future__ import annotations

import copy
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from dotenv import load_dotenv

from faceshield.errors import ConfigError

HERE = Path(__file__).resolve().parent
CONFIG_PATH = HERE / "config.yaml"

METHODS = ("ada-fgsm", "ada-bim", "ada-mim", "ada-nim", "ada-dim", "ada-dim++", "random")
MODES = ("full", "fixed", "forward", "bidirectional")
FLOW_METHODS = ("horn_schunck", "farneback")
MAP_NORMALIZATIONS = ("max_abs", "l2", "none")
PRECISIONS = ("float32", "float64")
SEED_STREAMS = ("attack", "mask", "flow", "transform", "scene", "train", "noise")

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_SECTIONS = ("command", "seed", "attack", "schedule", "robustness", "detector", "toy", "scene", "eval")


def derive_seed(global_seed: int, stream: str, *index: int) -> int:
    """
    Named substream of the global seed.

    crc32 keeps the stream id stable across interpreter runs (hash() is salted).
    """
    if stream not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream {stream!r}")
    entropy = [int(global_seed) & 0xFFFFFFFF, zlib.crc32(stream.encode()), *[int(i) for i in index]]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _reject_unknown(data: Mapping[str, Any], allowed, where: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, data: Mapping[str, Any] | None, where: str, **extra):
    data = dict(data or {})
    names = [f.name for f in fields(cls)]
    _reject_unknown(data, names, where)
    data.update(extra)
    for key, value in list(data.items()):
        if isinstance(value, list):
            data[key] = tuple(value)
    return cls(**data)


@dataclass(frozen=True)
class GuidanceConfig:
    mask_probability: float = 0.9
    samples: int = 30
    layers: tuple[int, ...] = (1, 2, 3)
    normalization: str = "max_abs"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ConfigError(f"guidance.mask_probability must be in [0, 1], got {self.mask_probability}")
        if int(self.samples) < 1:
            raise ConfigError(f"guidance.samples must be >= 1, got {self.samples}")
        if not self.layers:
            raise ConfigError("guidance.layers must be a non-empty subset of the tapped layers")
        if len(set(self.layers)) != len(self.layers) or min(self.layers) < 1:
            raise ConfigError(f"guidance.layers must be distinct 1-based indices, got {self.layers}")
        if self.normalization not in MAP_NORMALIZATIONS:
            raise ConfigError(f"guidance.normalization must be one of {MAP_NORMALIZATIONS}")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "ada-dim++"
    epsilon: float = 8.0
    iterations: int = 10
    step: float | None = None
    momentum: float = 0.5
    layer_weights: tuple[float, ...] = (0.2, 0.3, 0.5)
    dim_resize_range: tuple[float, float] = (0.9, 1.0)
    dim_probability: float = 0.5
    spectrum_samples: int = 10
    spectrum_sigma: float = 16.0
    spectrum_rho: float = 0.5
    neighbor_samples: int = 4
    precision: str = "float32"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epsilon < 0:
            raise ConfigError(f"attack.epsilon must be >= 0, got {self.epsilon}")
        if int(self.iterations) < 1:
            raise ConfigError(f"attack.iterations must be >= 1, got {self.iterations}")
        if self.step is not None and self.step < 0:
            raise ConfigError(f"attack.step must be >= 0, got {self.step}")
        if any(w <= 0 for w in self.layer_weights):
            raise ConfigError(f"attack.layer_weights must be > 0, got {self.layer_weights}")
        lo, hi = self.dim_resize_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"attack.dim_resize_range must satisfy 0 < lo <= hi <= 1, got {self.dim_resize_range}")
        if not 0.0 <= self.dim_probability <= 1.0:
            raise ConfigError("attack.dim_probability must be in [0, 1]")
        if self.spectrum_samples < 1 or self.neighbor_samples < 0:
            raise ConfigError("attack.spectrum_samples must be >= 1 and attack.neighbor_samples >= 0")
        if self.spectrum_sigma < 0 or not 0.0 <= self.spectrum_rho <= 1.0:
            raise ConfigError("attack.spectrum_sigma must be >= 0 and attack.spectrum_rho in [0, 1]")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"attack.precision must be one of {PRECISIONS}, got {self.precision}")
        for layer in self.guidance.layers:
            if layer > len(self.layer_weights):
                raise ConfigError(f"guidance layer {layer} has no entry in attack.layer_weights")

    @property
    def effective_iterations(self) -> int:
        return 1 if self.method in ("ada-fgsm", "random") else int(self.iterations)

    @property
    def alpha(self) -> float:
        if self.method == "ada-fgsm":
            return float(self.epsilon)
        if self.step is not None:
            return float(self.step)
        return float(self.epsilon) / self.effective_iterations

    def weight_for(self, layer: int) -> float:
        return float(self.layer_weights[layer - 1])

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None, guidance: GuidanceConfig | None = None, seed: int = 0):
        return _build(cls, data, "attack", guidance=guidance or GuidanceConfig(), seed=seed)


@dataclass(frozen=True)
class AnchorSchedule:
    anchor_period: int = 15
    eval_interval: int = 5
    mode: str = "bidirectional"
    chain: bool = True
    flow_method: str = "horn_schunck"
    flow_iterations: int = 100
    flow_regularization: float = 0.1
    flow_levels: int = 3

    def __post_init__(self):
        if int(self.anchor_period) < 1:
            raise ConfigError(f"schedule.anchor_period must be >= 1, got {self.anchor_period}")
        if int(self.eval_interval) < 1:
            raise ConfigError(f"schedule.eval_interval must be >= 1, got {self.eval_interval}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown propagation mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.flow_method not in FLOW_METHODS:
            raise ConfigError(f"unknown flow method {self.flow_method!r}")
        if self.flow_iterations < 1 or self.flow_regularization <= 0 or self.flow_levels < 1:
            raise ConfigError("schedule flow parameters must be positive")

    def is_anchor(self, frame: int) -> bool:
        return frame % self.anchor_period == 0


@dataclass(frozen=True)
class RobustnessSpec:
    jpeg_quality: tuple[int, ...] = (30, 50, 70, 90)
    resize_ratio: tuple[float, ...] = (0.5, 0.75, 1.0)
    gaussian_noise: tuple[float, ...] = (5, 10, 15)
    gaussian_blur: tuple[int, ...] = (3, 5)
    seed: int = 0

    def __post_init__(self):
        if any(not 30 <= q <= 100 for q in self.jpeg_quality):
            raise ConfigError(f"robustness.jpeg_quality must lie in [30, 100], got {self.jpeg_quality}")
        if any(not 0.5 <= r <= 1.0 for r in self.resize_ratio):
            raise ConfigError(f"robustness.resize_ratio must lie in [0.5, 1.0], got {self.resize_ratio}")
        if any(s not in (5, 10, 15) for s in self.gaussian_noise):
            raise ConfigError(f"robustness.gaussian_noise must be drawn from {{5, 10, 15}}, got {self.gaussian_noise}")
        if any(k not in (3, 5) for k in self.gaussian_blur):
            raise ConfigError(f"robustness.gaussian_blur must be drawn from {{3, 5}}, got {self.gaussian_blur}")

    def settings(self) -> list[tuple[str, float]]:
        """(transform, setting) pairs in report order."""
        out: list[tuple[str, float]] = []
        out += [("jpeg", q) for q in self.jpeg_quality]
        out += [("resize", r) for r in self.resize_ratio]
        out += [("noise", s) for s in self.gaussian_noise]
        out += [("blur", k) for k in self.gaussian_blur]
        return out


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    faces_per_image: tuple[int, int] = (1, 3)
    face_scale: tuple[float, float] = (0.16, 0.30)
    noise_std: float = 12.0
    gradient_strength: float = 60.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.faces_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"scene.faces_per_image must be a non-empty range >= 1, got {self.faces_per_image}")
        slo, shi = self.face_scale
        if not 0.0 < slo <= shi < 1.0:
            raise ConfigError(f"scene.face_scale must satisfy 0 < lo <= hi < 1, got {self.face_scale}")
        if self.image_size < 16:
            raise ConfigError(f"scene.image_size must be >= 16, got {self.image_size}")
        if self.noise_std < 0 or self.gradient_strength < 0:
            raise ConfigError("scene noise and gradient parameters must be >= 0")


@dataclass(frozen=True)
class ToyDetectorSpec:
    channels: tuple[int, int, int] = (16, 32, 64)
    epochs: int = 12
    learning_rate: float = 0.002
    batch_size: int = 32
    nms_iou: float = 0.3
    threshold: float = 0.5
    train_count: int = 2000
    val_count: int = 200
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ConfigError("the toy backbone has exactly 3 stages")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("toy training hyperparameters out of range")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("toy.nms_iou must be in (0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    weights: str | None = None
    adapter: str = "toy"
    threshold: float = 0.5
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"detector.precision must be float32 or float64, got {self.precision}")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("eval.iou_threshold must be in (0, 1]")
        if self.score_threshold < 0:
            raise ConfigError(f"eval.score_threshold must be >= 0, got {self.score_threshold}")


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    attack: AttackConfig
    schedule: AnchorSchedule
    robustness: RobustnessSpec
    detector: DetectorConfig
    toy: ToyDetectorSpec
    scene: SceneConfig
    eval: EvalConfig
    inputs: dict[str, Any] = field(default_factory=dict)
    outputs: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self), default=list))


def load_defaults(path: Path | str = CONFIG_PATH) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no defaults file at {path}")
    with open(path, "r") as f:
        return yaml.safe_load(f) or {}


def merge_sections(base: dict[str, Any], override: Mapping[str, Any] | None, where: str = "config") -> dict[str, Any]:
    """Merge `override` into a copy of `base`; unknown sections or keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown key in {where}: {key}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where}.{key} must be a mapping")
            _reject_unknown(value, out[key], f"{where}.{key}")
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def read_config_file(path: Path | str) -> dict[str, Any]:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def build_run_config(
    command: str,
    file_overrides: Mapping[str, Any] | None = None,
    flag_overrides: Mapping[str, Any] | None = None,
    inputs: Mapping[str, Any] | None = None,
    outputs: Mapping[str, Any] | None = None,
) -> RunConfig:
    if file_overrides and "schema_version" in file_overrides:
        raise ConfigError("this config file is a run manifest; replay it with `faceshield replay --manifest`")
    raw = merge_sections(load_defaults(), file_overrides, "config file")
    raw = merge_sections(raw, flag_overrides, "flags")
    seed = int(raw["seed"])
    guidance = _build(GuidanceConfig, raw["guidance"], "guidance", seed=derive_seed(seed, "mask"))
    attack = AttackConfig.from_dict(raw["attack"], guidance=guidance, seed=derive_seed(seed, "attack"))
    return RunConfig(
        command=command,
        seed=seed,
        attack=attack,
        schedule=_build(AnchorSchedule, raw["schedule"], "schedule"),
        robustness=_build(RobustnessSpec, raw["robustness"], "robustness", seed=derive_seed(seed, "transform")),
        detector=_build(DetectorConfig, raw["detector"], "detector"),
        toy=_build(ToyDetectorSpec, raw["toy"], "toy", seed=derive_seed(seed, "train")),
        scene=_build(SceneConfig, raw["scene"], "scene", seed=derive_seed(seed, "scene")),
        eval=_build(EvalConfig, raw["eval"], "eval"),
        inputs=dict(inputs or {}),
        outputs=dict(outputs or {}),
    )


def run_config_from_manifest(doc: Mapping[str, Any]) -> RunConfig:
    """
    The RunConfig a manifest recorded. Seeds are taken as written (they were derived when
    the run was built); run results and timestamps next to the config are ignored.
    """
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ConfigError(f"manifest schema_version {version!r} is not {MANIFEST_SCHEMA_VERSION}")
    missing = [k for k in MANIFEST_SECTIONS if k not in doc]
    if missing:
        raise ConfigError(f"manifest lacks section(s): {', '.join(missing)}")

    attack = dict(doc["attack"])
    guidance = _build(GuidanceConfig, attack.pop("guidance", None), "attack.guidance")
    return RunConfig(
        command=str(doc["command"]),
        seed=int(doc["seed"]),
        attack=_build(AttackConfig, attack, "attack", guidance=guidance),
        schedule=_build(AnchorSchedule, doc["schedule"], "schedule"),
        robustness=_build(RobustnessSpec, doc["robustness"], "robustness"),
        detector=_build(DetectorConfig, doc["detector"], "detector"),
        toy=_build(ToyDetectorSpec, doc["toy"], "toy"),
        scene=_build(SceneConfig, doc["scene"], "scene"),
        eval=_build(EvalConfig, doc["eval"], "eval"),
        inputs=dict(doc.get("inputs") or {}),
        outputs=dict(doc.get("outputs") or {}),
    )


def default_attack_config(**overrides) -> AttackConfig:
    """Default AttackConfig with keyword overrides."""
    guidance = overrides.pop("guidance", GuidanceConfig())
    return replace(AttackConfig(guidance=guidance), **overrides)


def worker_count() -> int:
    """FACESHIELD_WORKERS from the environment (or a .env file); defaults to 1."""
    load_dotenv()
    raw = os.getenv("FACESHIELD_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"FACESHIELD_WORKERS must be an integer, got {raw!r}") from e
    return max(1, n)
