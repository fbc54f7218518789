import cv2
import numpy as np
import pytest

from faceshield.domain import Image, Perturbation
from faceshield.errors import InputError
from faceshield.flow import FlowField, compute_flow, warp_array, warp_perturbation


def _shift_right(image: Image, dx: int) -> Image:
    m = np.float32([[1, 0, dx], [0, 1, 0]])
    moved = cv2.warpAffine(np.asarray(image.data), m, (image.width, image.height),
                           flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REFLECT_101)
    return Image(moved)


def test_identical_frames_have_no_motion(textured):
    flow = compute_flow(textured, textured)
    assert flow.shape == (96, 96, 2)
    assert flow.magnitude().max() <= 1e-3


@pytest.mark.parametrize("method", ["horn_schunck", "farneback"])
def test_translation_is_recovered(textured, method):
    flow = compute_flow(textured, _shift_right(textured, 3), method=method)
    interior = flow.vectors[16:-16, 16:-16]
    assert 2.5 <= np.median(interior[..., 0]) <= 3.5
    assert -0.5 <= np.median(interior[..., 1]) <= 0.5


def test_shape_mismatch_is_an_input_error(textured):
    with pytest.raises(InputError):
        compute_flow(textured, Image.zeros(32, 32))
    with pytest.raises(InputError):
        compute_flow(textured, textured, method="no-such")


def test_flow_field_validation():
    with pytest.raises(InputError):
        FlowField(np.zeros((4, 4, 3)))
    with pytest.raises(InputError):
        FlowField(np.full((2, 2, 2), np.inf))
    flow = FlowField(np.ones((2, 2, 2)), 3, 4)
    np.testing.assert_array_equal((-flow).vectors, -np.ones((2, 2, 2)))


def test_zero_flow_is_identity():
    delta = np.random.default_rng(0).uniform(-8, 8, (10, 12, 3))
    np.testing.assert_array_equal(warp_array(delta, np.zeros((10, 12, 2))), delta)


def test_integer_flow_is_roll_and_zero():
    delta = np.random.default_rng(1).uniform(-8, 8, (10, 12, 3))
    flow = np.zeros((10, 12, 2))
    flow[..., 0] = 2
    expected = np.zeros_like(delta)
    expected[:, 2:] = delta[:, :-2]
    np.testing.assert_array_equal(warp_array(delta, flow), expected)


def test_warp_keeps_the_bound():
    rng = np.random.default_rng(2)
    delta = Perturbation(rng.uniform(-8, 8, (16, 16, 3)), 8)
    flow = FlowField(rng.uniform(-3, 3, (16, 16, 2)))
    assert warp_perturbation(delta, flow).linf <= 8 + 1e-12
    with pytest.raises(InputError):
        warp_perturbation(delta, FlowField(np.zeros((8, 8, 2))))


def test_round_trip_on_smooth_perturbation():
    rng = np.random.default_rng(3)
    delta = cv2.resize(rng.uniform(-8, 8, (4, 4, 3)), (64, 64), interpolation=cv2.INTER_CUBIC)
    flow = np.zeros((64, 64, 2))
    flow[..., 0] = 1.5
    flow[..., 1] = -0.75
    back = warp_array(warp_array(delta, flow), -flow)
    inner = (slice(8, -8), slice(8, -8))
    rms = np.sqrt(np.mean(delta ** 2))
    assert np.mean(np.abs(back[inner] - delta[inner])) <= 0.05 * rms
