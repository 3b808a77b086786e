import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aacl.augment import (
    ALL_OPS,
    SAMPLE_RANGES,
    AugOp,
    AugRecipe,
    apply_op,
    fixed_strong_augment,
    sample_recipe,
    usaug,
)


def u8_image(seed, shape=(8, 8, 3)):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=shape) / 255.0


def brute_force_equalize(image):
    """Pixel-by-pixel histogram equalization on 256 bins, one channel at a time."""
    h, w, _ = image.shape
    out = np.zeros_like(image)
    for ch in range(3):
        values = [int(round(image[y, x, ch] * 255)) for y in range(h) for x in range(w)]
        darkest = min(values)
        n_darkest = values.count(darkest)
        for i, v in enumerate(values):
            if n_darkest == len(values):
                new = v
            else:
                at_or_below = sum(1 for u in values if u <= v)
                new = Fraction(255 * (at_or_below - n_darkest), len(values) - n_darkest)
                new = math.floor(new + Fraction(1, 2))
            out[i // w, i % w, ch] = new / 255
    return out


def test_exactly_ten_ops():
    assert len(ALL_OPS) == 10
    assert {op.value for op in AugOp} == {
        "contrast", "equalize", "blur", "brightness", "saturation",
        "sharpness", "posterize", "solarize", "hue", "grayscale"}


def test_brightness_identity():
    img = u8_image(0)
    np.testing.assert_array_equal(apply_op(img, AugOp.BRIGHTNESS, 1.0), img)


def test_solarize_inverts_at_or_above_threshold():
    img = np.full((4, 4, 3), 0.8)
    out = apply_op(img, AugOp.SOLARIZE, 0.5)
    np.testing.assert_array_equal(out, 1.0 - 0.8)
    assert out[0, 0, 0] == pytest.approx(0.2)
    low = np.full((2, 2, 3), 0.3)
    np.testing.assert_array_equal(apply_op(low, AugOp.SOLARIZE, 0.5), low)


def test_posterize_eight_bits_is_identity_on_byte_data():
    img = u8_image(1)
    np.testing.assert_array_equal(apply_op(img, AugOp.POSTERIZE, 8), img)


def test_posterize_four_bits_masks_low_nibble():
    img = np.full((2, 2, 3), 0xAB / 255)
    np.testing.assert_array_equal(apply_op(img, AugOp.POSTERIZE, 4), 0xA0 / 255)


def test_grayscale_full_strength_matches_luma():
    img = u8_image(2)
    out = apply_op(img, AugOp.GRAYSCALE, 1.0)
    for y in range(8):
        for x in range(8):
            r, g, b = img[y, x]
            expected = 0.299 * r + 0.587 * g + 0.114 * b
            np.testing.assert_allclose(out[y, x], [expected] * 3, atol=1e-15)


@pytest.mark.parametrize("op, param", [
    (AugOp.CONTRAST, 1.0), (AugOp.BRIGHTNESS, 1.0), (AugOp.SATURATION, 1.0),
    (AugOp.SHARPNESS, 0.0), (AugOp.POSTERIZE, 8), (AugOp.HUE, 0.0),
    (AugOp.GRAYSCALE, 0.0),
])
def test_identity_parameters_are_exact(op, param):
    img = u8_image(3, (16, 12, 3))
    np.testing.assert_array_equal(apply_op(img, op, param), img)


@pytest.mark.parametrize("seed", range(20))
def test_equalize_matches_brute_force(seed):
    img = u8_image(seed)
    if seed % 4 == 0:
        img[..., 1] = 0.5  # constant channel: zero step
    if seed % 4 == 1:
        img = np.rint(img * 4) / 4  # only a handful of levels
    np.testing.assert_array_equal(apply_op(img, AugOp.EQUALIZE), brute_force_equalize(img))


def test_equalize_changes_small_images():
    img = u8_image(5) * 0.5
    out = apply_op(img, AugOp.EQUALIZE)
    assert not np.array_equal(out, img)
    # the brightest level of every channel maps to white, the darkest to black
    for ch in range(3):
        assert out[..., ch].max() == 1.0 and out[..., ch].min() == 0.0


def test_hue_rotation_keeps_gray_pixels():
    img = np.full((3, 3, 3), 0.4)
    np.testing.assert_allclose(apply_op(img, AugOp.HUE, 17.0), img, atol=1e-15)


def test_blur_keeps_constant_image():
    img = np.full((5, 7, 3), 0.25)
    np.testing.assert_allclose(apply_op(img, AugOp.BLUR, 1.2), img, atol=1e-15)


def test_contrast_uses_channel_mean():
    img = u8_image(4)
    out = apply_op(img, AugOp.CONTRAST, 0.5)
    mean = img.mean(axis=(0, 1))
    np.testing.assert_allclose(out, np.clip(mean + 0.5 * (img - mean), 0, 1), atol=1e-15)


@pytest.mark.parametrize("op, param", [
    (AugOp.BRIGHTNESS, -0.1), (AugOp.BRIGHTNESS, 2.5), (AugOp.POSTERIZE, 0),
    (AugOp.POSTERIZE, 4.5), (AugOp.SOLARIZE, 1.2), (AugOp.HUE, 200.0),
    (AugOp.BLUR, 0.0), (AugOp.EQUALIZE, 1.0), (AugOp.CONTRAST, None),
    (AugOp.GRAYSCALE, float("nan")),
])
def test_out_of_range_params_rejected(op, param):
    with pytest.raises(ValueError):
        apply_op(u8_image(0), op, param)


def test_sample_recipe_full_permutation():
    recipe = sample_recipe(10, 5)
    assert sorted(op.value for op, _ in recipe.steps) == sorted(op.value for op in AugOp)


def test_sample_recipe_single_step_and_determinism():
    assert len(sample_recipe(1, 0)) == 1
    assert sample_recipe(6, 1234) == sample_recipe(6, 1234)
    assert sample_recipe(6, 1234) != sample_recipe(6, 1235)


@pytest.mark.parametrize("k", [0, 11, -1])
def test_sample_recipe_rejects_bad_k(k):
    with pytest.raises(ValueError):
        sample_recipe(k, 0)


def test_sampled_params_inside_sampling_ranges():
    for seed in range(300):
        for op, param in sample_recipe(10, seed).steps:
            rng = SAMPLE_RANGES[op]
            if rng is None:
                assert param is None
            else:
                assert rng[0] <= param <= rng[1]


@pytest.mark.parametrize("k", [1, 3, 8])
def test_uniform_strength_frequencies(k):
    counts = Counter()
    n = 10_000
    rng = np.random.default_rng(99)
    for _ in range(n):
        recipe = sample_recipe(k, rng)
        assert len(recipe) == k
        kinds = [op for op, _ in recipe.steps]
        assert len(set(kinds)) == k
        counts.update(kinds)
    for op in AugOp:
        assert abs(counts[op] / n - k / 10) <= 0.02


def test_usaug_identity_recipes():
    img = u8_image(6)
    np.testing.assert_array_equal(usaug(img, AugRecipe(())), img)
    recipe = AugRecipe(((AugOp.BRIGHTNESS, 1.0), (AugOp.CONTRAST, 1.0)))
    np.testing.assert_array_equal(usaug(img, recipe), img)


def test_usaug_solarize_constant_image():
    img = np.full((6, 6, 3), 0.8)
    out = usaug(img, AugRecipe(((AugOp.SOLARIZE, 0.5),)))
    np.testing.assert_array_equal(out, np.full((6, 6, 3), 1.0 - 0.8))


def test_usaug_applies_steps_in_order():
    img = np.full((2, 2, 3), 0.8)
    a = usaug(img, AugRecipe(((AugOp.SOLARIZE, 0.5), (AugOp.BRIGHTNESS, 1.5))))
    b = usaug(img, AugRecipe(((AugOp.BRIGHTNESS, 1.5), (AugOp.SOLARIZE, 0.5))))
    np.testing.assert_allclose(a, 0.3, atol=1e-12)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)


def test_replay_is_bit_exact():
    img = u8_image(7, (16, 16, 3))
    recipe = sample_recipe(8, 42)
    np.testing.assert_array_equal(usaug(img, recipe), usaug(img, sample_recipe(8, 42)))


def test_range_and_shape_over_random_draws():
    rng = np.random.default_rng(0)
    for i in range(1000):
        shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)), 3)
        img = rng.random(shape)
        out = usaug(img, sample_recipe(int(rng.integers(1, 11)), rng))
        assert out.shape == shape
        assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from([AugOp.CONTRAST, AugOp.BRIGHTNESS, AugOp.SATURATION, AugOp.SHARPNESS]),
    st.floats(0.0, 2.0),
    st.integers(0, 2**32 - 1),
)
def test_extreme_factors_stay_clamped(op, factor, seed):
    img = np.random.default_rng(seed).random((5, 5, 3))
    img[0, 0] = (0.0, 0.0, 1.0)
    img[0, 1] = (1.0, 1.0, 0.0)
    out = apply_op(img, op, factor)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_fixed_strong_augment_deterministic_and_bounded():
    img = u8_image(8, (12, 12, 3))
    a = fixed_strong_augment(img, 3)
    np.testing.assert_array_equal(a, fixed_strong_augment(img, 3))
    assert a.shape == img.shape and 0 <= a.min() and a.max() <= 1
