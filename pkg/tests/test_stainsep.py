import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfpath.datagen import SlideParams, generate_slide
from selfpath.errors import DataError, DecompositionError, ParameterError
from selfpath.stainsep import (DEFAULT_STAIN, EOSIN_OD, HEMATOXYLIN_OD, StainMatrix, deconvolve,
                               hematoxylin_target, od_to_rgb, rgb_to_od)

unit_images = arrays(np.float64, (4, 5, 3), elements=st.floats(0.0, 1.0))


def test_white_pixel_has_zero_density():
    assert np.array_equal(rgb_to_od(np.ones((1, 1, 3))), np.zeros((1, 1, 3)))


def test_od_of_grey_26():
    od = rgb_to_od(np.full((1, 1, 3), 26 / 255))
    assert np.allclose(od, -math.log10(26 / 255), atol=1e-12)
    assert od[0, 0, 0] == pytest.approx(0.9916, abs=1e-4)


def test_black_is_clamped_before_log():
    od = rgb_to_od(np.zeros((2, 2, 3)))
    assert np.allclose(od, math.log10(255), atol=1e-12)
    assert od[0, 0, 0] == pytest.approx(2.4065, abs=1e-4)


def test_rows_have_unit_norm_and_residual_is_orthogonal():
    m = DEFAULT_STAIN.matrix
    assert np.allclose(np.linalg.norm(m, axis=1), 1.0)
    assert abs(m[2] @ m[0]) < 1e-12 and abs(m[2] @ m[1]) < 1e-12
    h = np.asarray(HEMATOXYLIN_OD) / np.linalg.norm(HEMATOXYLIN_OD)
    e = np.asarray(EOSIN_OD) / np.linalg.norm(EOSIN_OD)
    assert np.allclose(m[0], h) and np.allclose(m[1], e)
    assert DEFAULT_STAIN.condition_number < 10


def test_pure_hematoxylin_density():
    od = DEFAULT_STAIN.hematoxylin.reshape(1, 1, 3)
    c = deconvolve(od).concentrations
    assert np.allclose(c[0, 0], [1.0, 0.0, 0.0], atol=1e-6)


def test_zero_density_gives_zero_concentration():
    assert np.array_equal(deconvolve(np.zeros((3, 3, 3))).concentrations, np.zeros((3, 3, 3)))


def test_round_trip_random_od(rng):
    od = rng.uniform(0, 2.5, (64, 64, 3))
    c = deconvolve(od, clip=False).concentrations
    assert np.max(np.abs(c @ DEFAULT_STAIN.matrix - od)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(0.0, 3.0)))
def test_round_trip_where_nonnegative(conc):
    od = conc @ DEFAULT_STAIN.matrix
    m = deconvolve(od)
    assert np.max(np.abs(m.concentrations @ DEFAULT_STAIN.matrix - od)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(unit_images, st.floats(0.01, 2.0))
def test_darkening_along_hematoxylin_never_lowers_it(img, amount):
    od = rgb_to_od(img)
    darker = od + amount * DEFAULT_STAIN.hematoxylin
    assert np.all(deconvolve(darker).hematoxylin >= deconvolve(od).hematoxylin - 1e-12)


@settings(max_examples=100, deadline=None)
@given(unit_images)
def test_target_range(img):
    t = hematoxylin_target(img)
    assert t.shape == img.shape[:2]
    assert t.min() >= 0.0 and t.max() <= 1.0


def test_white_image_target_is_zero():
    assert not hematoxylin_target(np.ones((16, 16, 3))).any()


def test_constant_hematoxylin_image_target_is_zero():
    img = np.broadcast_to(10.0 ** -DEFAULT_STAIN.hematoxylin, (8, 8, 3))
    assert not hematoxylin_target(img).any()


def test_nuclei_are_brighter_in_target():
    slide = generate_slide(SlideParams(width=256, height=256), seed=3)
    target = hematoxylin_target(slide.image)
    mask = slide.nucleus_mask()
    assert mask.any() and (~mask).any()
    assert target[mask].mean() > target[~mask].mean() + 0.1


def test_od_rgb_inverse(rng):
    img = rng.uniform(0.05, 1.0, (8, 8, 3))
    assert np.allclose(od_to_rgb(rgb_to_od(img)), img, atol=1e-12)


def test_singular_matrix_rejected():
    with pytest.raises(DecompositionError):
        StainMatrix(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]])).inverse()


def test_bad_shape_rejected():
    with pytest.raises(ParameterError):
        StainMatrix(np.eye(2))


def test_matrix_file_round_trip(tmp_path):
    path = tmp_path / "stain.txt"
    DEFAULT_STAIN.save(path)
    assert np.allclose(StainMatrix.load(path).matrix, DEFAULT_STAIN.matrix, atol=1e-12)
    with pytest.raises(DataError):
        StainMatrix.load(tmp_path / "missing.txt")
