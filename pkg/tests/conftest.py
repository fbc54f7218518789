import cv2
import numpy as np
import pytest
import torch

from faceshield.config import AttackConfig, GuidanceConfig, SceneConfig, ToyDetectorSpec
from faceshield.domain import Image
from faceshield.synthbench import VAL_INDEX_OFFSET, ToyDetector, ToyNet, generate_scene, generate_scenes, train_toy_detector


@pytest.fixture
def scene_config() -> SceneConfig:
    return SceneConfig(seed=7)


@pytest.fixture
def scene(scene_config):
    return generate_scene(scene_config, 3)


@pytest.fixture
def textured() -> Image:
    """Smooth random texture, friendly to optical flow."""
    rng = np.random.default_rng(11)
    base = rng.uniform(0, 255, size=(16, 16, 3)).astype(np.float32)
    big = cv2.resize(base, (96, 96), interpolation=cv2.INTER_CUBIC)
    return Image.from_float(big, "texture")


@pytest.fixture
def untrained_toy() -> ToyDetector:
    """Seeded but untrained: deterministic features, small channels for speed."""
    torch.manual_seed(0)
    return ToyDetector(ToyNet((8, 16, 32)), ToyDetectorSpec(channels=(8, 16, 32)))


@pytest.fixture
def fast_attack() -> AttackConfig:
    guidance = GuidanceConfig(samples=2, seed=5)
    return AttackConfig(
        method="ada-bim",
        iterations=3,
        spectrum_samples=1,
        neighbor_samples=1,
        guidance=guidance,
        seed=9,
    )


@pytest.fixture(scope="session")
def trained_toy() -> ToyDetector:
    """Default recipe (2000 train / 200 val scenes). Only slow tests use it."""
    return train_toy_detector(ToyDetectorSpec(seed=0), scene=SceneConfig(seed=0))


@pytest.fixture(scope="session")
def held_out():
    return generate_scenes(SceneConfig(seed=0), range(VAL_INDEX_OFFSET, VAL_INDEX_OFFSET + 200))
