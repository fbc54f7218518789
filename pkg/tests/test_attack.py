import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from faceshield.attack import (
    attack_many,
    evaluate_objective,
    feature_objective,
    project_linf,
    run_attack,
)
from faceshield.config import METHODS, GuidanceConfig, SceneConfig, default_attack_config
from faceshield.detector import detect_many
from faceshield.domain import FeatureSet, Image
from faceshield.evaluation import corpus_f1
from faceshield.guidance import ImportanceMap, importance_maps
from faceshield.pipeline import layer_ablation, protect_images
from faceshield.synthbench import ToyDetector, ToyNet, generate_scene

SMALL_SCENES = SceneConfig(image_size=64, seed=0)


def test_feature_objective_arithmetic():
    m = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    h = np.array([[[2.0, 3.0], [4.0, 5.0]]])
    assert feature_objective([h], [m], [1.0]) == 7.0
    assert feature_objective([h], [np.zeros_like(m)], [1.0]) == 0.0

    ones = [np.ones((1, 1, 1))] * 3
    assert feature_objective(ones, ones, (0.2, 0.3, 0.5)) == pytest.approx(1.0)


def test_feature_objective_with_typed_inputs():
    feats = FeatureSet((np.ones((1, 2, 2)), np.full((1, 1, 1), 3.0)))
    maps = ImportanceMap({2: np.ones((1, 1, 1))}, samples=1, mask_probability=0.9, seed=0)
    assert feature_objective(feats, maps, {2: 0.5}) == 1.5


@pytest.mark.parametrize(
    "origin, candidate, expected",
    [(100, 100, 100), (100, 120, 108), (250, 260, 255), (5, -10, 0)],
)
def test_projection_examples(origin, candidate, expected):
    clean = Image(np.full((1, 1, 3), origin, dtype=np.uint8))
    out = project_linf(np.full((1, 1, 3), float(candidate)), clean, 8)
    assert out.data[0, 0, 0] == expected


@pytest.mark.parametrize("method", METHODS)
def test_every_method_respects_the_bound(untrained_toy, scene, fast_attack, method):
    image, _ = scene
    config = replace(fast_attack, method=method)
    adv, report = run_attack(untrained_toy, image, config)
    assert adv.shape == image.shape
    assert np.abs(adv.float_view - image.float_view).max() <= config.epsilon
    assert report.method == method
    assert report.perturbation.linf <= config.epsilon
    if method != "random":
        assert len(report.objective_trace) == config.effective_iterations


FUZZ_ARGS = dict(
    method=st.sampled_from(METHODS),
    eps=st.floats(0.0, 16.0, allow_nan=False),
    iterations=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)


def _fuzz_once(model, method, eps, iterations, seed):
    image, _ = generate_scene(SMALL_SCENES, seed % 50)
    config = default_attack_config(
        method=method,
        epsilon=eps,
        iterations=iterations,
        spectrum_samples=1,
        neighbor_samples=1,
        guidance=GuidanceConfig(samples=1, seed=seed),
        seed=seed,
    )
    adv, report = run_attack(model, image, config)
    dev = np.abs(adv.float_view - image.float_view)
    assert dev.max() <= eps + 1e-9
    assert report.perturbation.linf <= eps + 1e-9
    assert adv.data.dtype == np.uint8


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(**FUZZ_ARGS)
def test_bound_fuzz(untrained_toy, method, eps, iterations, seed):
    _fuzz_once(untrained_toy, method, eps, iterations, seed)


@pytest.mark.slow
@settings(max_examples=500, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(**FUZZ_ARGS)
def test_bound_fuzz_full(untrained_toy, method, eps, iterations, seed):
    _fuzz_once(untrained_toy, method, eps, iterations, seed)


def test_zero_epsilon_returns_the_input(untrained_toy, scene, fast_attack):
    image, _ = scene
    adv, _ = run_attack(untrained_toy, image, replace(fast_attack, epsilon=0.0))
    np.testing.assert_array_equal(adv.data, image.data)


def test_single_bim_step_matches_an_autograd_step(untrained_toy, scene, fast_attack):
    image, _ = scene
    config = replace(fast_attack, iterations=1, precision="float64")
    maps = importance_maps(untrained_toy, image, config.guidance)
    adv, _ = run_attack(untrained_toy, image, config, maps=maps)

    x = torch.tensor(image.float_view[None], requires_grad=True)
    feats, _ = untrained_toy.net(x.permute(0, 3, 1, 2) / 255.0 - 0.5)
    objective = sum(config.weight_for(i) * (feats[i - 1] * torch.as_tensor(maps[i])).sum() for i in maps.layers)
    (grad,) = torch.autograd.grad(objective, x)
    grad = grad[0].numpy()

    clean = image.float_view
    eps = config.epsilon
    expected = np.clip(clean - eps * np.sign(grad), np.maximum(clean - eps, 0), np.minimum(clean + eps, 255))
    decided = np.abs(grad) > 1e-9 * np.abs(grad).max()
    assert decided.mean() > 0.5
    np.testing.assert_array_equal(adv.float_view[decided], expected[decided])


def test_precision_switch_leaves_the_detector_alone(untrained_toy, scene, fast_attack):
    image, _ = scene
    a, _ = run_attack(untrained_toy, image, replace(fast_attack, precision="float32"))
    b, _ = run_attack(untrained_toy, image, replace(fast_attack, precision="float64"))
    assert untrained_toy.dtype == torch.float64
    for adv in (a, b):
        assert np.abs(adv.float_view - image.float_view).max() <= fast_attack.epsilon
    assert np.mean(a.data == b.data) > 0.9


def test_attack_is_reproducible(untrained_toy, scene, fast_attack):
    image, _ = scene
    config = replace(fast_attack, method="ada-dim++")
    a, _ = run_attack(untrained_toy, image, config)
    b, _ = run_attack(untrained_toy, image, config)
    np.testing.assert_array_equal(a.data, b.data)


def test_objective_descends(untrained_toy, scene, fast_attack):
    image, _ = scene
    config = replace(fast_attack, method="ada-mim", iterations=5)
    maps = importance_maps(untrained_toy, image, config.guidance)
    adv, report = run_attack(untrained_toy, image, config, maps=maps)
    assert report.initial_objective == pytest.approx(evaluate_objective(untrained_toy, image, maps, config), rel=1e-4)
    assert evaluate_objective(untrained_toy, adv, maps, config) < report.initial_objective


def test_random_noise_is_seeded(untrained_toy, scene):
    image, _ = scene
    config = default_attack_config(method="random", seed=4)
    a, report = run_attack(untrained_toy, image, config)
    b, _ = run_attack(untrained_toy, image, config)
    np.testing.assert_array_equal(a.data, b.data)
    assert report.objective_trace == [] and report.iterations == 0


def test_attack_many_does_not_depend_on_workers(untrained_toy, scene_config, fast_attack):
    images = [generate_scene(scene_config, i)[0] for i in range(3)]
    one = attack_many(untrained_toy, images, fast_attack, workers=1)
    three = attack_many(untrained_toy, images, fast_attack, workers=3)
    for (a, _), (b, _) in zip(one, three):
        np.testing.assert_array_equal(a.data, b.data)


def test_sidecar_records_the_run(untrained_toy, scene, fast_attack):
    image, _ = scene
    _, report = run_attack(untrained_toy, image, fast_attack)
    sidecar = report.sidecar("clean.png")
    assert sidecar["epsilon"] == 8 and sidecar["iterations"] == 3
    assert sidecar["clean_path"] == "clean.png"
    assert len(sidecar["objective_trace"]) == 3


# ---------------------------------------------------------------------------
# Against the trained toy detector
# ---------------------------------------------------------------------------

def _f1(model, images, truths):
    return corpus_f1(detect_many(model, images), truths)["f1"]


@pytest.mark.slow
@pytest.mark.parametrize("method", ["ada-bim", "ada-dim++"])
def test_attacks_collapse_detection(trained_toy, held_out, method):
    images = [im for im, _ in held_out]
    truths = [gt for _, gt in held_out]
    assert _f1(trained_toy, images, truths) >= 0.90
    protected = protect_images(trained_toy, images, default_attack_config(method=method))
    assert _f1(trained_toy, protected, truths) <= 0.20


@pytest.mark.slow
def test_random_noise_barely_matters(trained_toy, held_out):
    images = [im for im, _ in held_out]
    truths = [gt for _, gt in held_out]
    noisy = protect_images(trained_toy, images, default_attack_config(method="random"))
    assert abs(_f1(trained_toy, noisy, truths) - _f1(trained_toy, images, truths)) <= 0.05


@pytest.mark.slow
def test_all_layers_beat_any_single_layer(trained_toy, held_out):
    table = layer_ablation(held_out[:50], trained_toy, default_attack_config(method="ada-bim"))
    scores = dict(zip(table["layers"], table["f1"]))
    assert scores["1,2,3"] <= min(scores["1"], scores["2"], scores["3"]) + 0.02


@pytest.mark.slow
def test_objective_falls_on_most_images(trained_toy, held_out):
    config = default_attack_config(method="ada-bim")
    falls = 0
    for image, _ in held_out[:40]:
        _, report = run_attack(trained_toy, image, config)
        falls += report.objective_trace[-1] <= report.initial_objective
    assert falls >= 38


@pytest.mark.slow
@pytest.mark.parametrize("method", ["ada-bim", "ada-dim++"])
def test_default_attack_fits_the_cpu_budget(method):
    torch.manual_seed(0)
    model = ToyDetector(ToyNet((16, 32, 64)))
    image, _ = generate_scene(SceneConfig(seed=0), 0)
    config = default_attack_config(method=method)
    run_attack(model, image, config)  # warm-up
    t0 = time.perf_counter()
    run_attack(model, image, config)
    assert time.perf_counter() - t0 <= 2.0
