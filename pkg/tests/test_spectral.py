import numpy as np
import torch

from faceshield.config import default_attack_config
from faceshield.spectral import dct_2d, dim_transform, idct_2d, spectrum_transform


def test_dct_pair_is_orthonormal():
    x = torch.as_tensor(np.random.default_rng(0).uniform(0, 1, (12, 9, 3)))
    spec = dct_2d(x)
    np.testing.assert_allclose(idct_2d(spec).numpy(), x.numpy(), atol=1e-10)
    np.testing.assert_allclose((spec ** 2).sum().item(), (x ** 2).sum().item(), rtol=1e-10)


def test_dim_bypass_at_probability_zero(scene):
    image, _ = scene
    out = dim_transform(image, default_attack_config(dim_probability=0.0), seed=3)
    np.testing.assert_array_equal(out, image.float_view)


def test_dim_keeps_size_and_pads_with_zeros(scene):
    image, _ = scene
    params = default_attack_config(dim_probability=1.0, dim_resize_range=(0.5, 0.5))
    out = dim_transform(image, params, seed=3)
    assert out.shape == image.shape
    rows_with_content = int((np.abs(out).sum(axis=(1, 2)) > 0).sum())
    assert rows_with_content <= 64


def test_dim_is_seeded(scene):
    image, _ = scene
    params = default_attack_config(dim_probability=1.0)
    np.testing.assert_array_equal(dim_transform(image, params, 5), dim_transform(image, params, 5))


def test_spectrum_identity_without_noise_or_mask(scene):
    image, _ = scene
    out = spectrum_transform(image, sigma=0.0, seed=1, rho=0.0)
    assert np.abs(out - image.float_view).max() <= 1e-3


def test_spectrum_stays_in_range_and_is_seeded(scene):
    image, _ = scene
    a = spectrum_transform(image, sigma=16.0, seed=2)
    b = spectrum_transform(image, sigma=16.0, seed=2)
    c = spectrum_transform(image, sigma=16.0, seed=3)
    assert a.min() >= 0.0 and a.max() <= 255.0
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
