import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retina_ssl.augment import (
    FinetuneAugmentConfig, PretrainAugmentConfig, adjust_brightness, adjust_contrast, adjust_hue,
    adjust_saturation, color_jitter, finetune_augment, flip_sample, geometric_transform, hsv_to_rgb,
    pretrain_view, rgb_to_hsv, to_grayscale,
)
from retina_ssl.data.dataset import Sample
from retina_ssl.tensor import RngStream

NO_AUG = dict(jitter_prob=0.0, grayscale_prob=0.0, hflip_prob=0.0, vflip_prob=0.0)


def _img(seed, h=160, w=150):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


def _disc_sample(size=200, radius=40):
    yy, xx = np.mgrid[:size, :size]
    disc = ((yy - (size - 1) / 2) ** 2 + (xx - (size - 1) / 2) ** 2 <= radius ** 2).astype(np.uint8)
    image = np.repeat(disc[..., None].astype(np.float32), 3, axis=2)
    return Sample(image=image, targets={"vessels": disc.copy()}, fov=np.ones_like(disc), id="disc")


def _dice(a, b):
    a, b = a.astype(bool), b.astype(bool)
    return 2 * (a & b).sum() / (a.sum() + b.sum())


# -- pre-training views -----------------------------------------------------

def test_identity_path_returns_top_left_crop():
    img = _img(0)
    view = pretrain_view(img, PretrainAugmentConfig(**NO_AUG), RngStream(1), origin=(0, 0))
    np.testing.assert_array_equal(view, img[:128, :128])


def test_uint8_input_is_scaled():
    img = (np.arange(128 * 128 * 3) % 256).astype(np.uint8).reshape(128, 128, 3)
    view = pretrain_view(img, PretrainAugmentConfig(**NO_AUG), RngStream(1))
    np.testing.assert_allclose(view, img / 255.0, atol=1e-7)


def test_grayscale_uses_standard_luma():
    img = _img(2)
    view = pretrain_view(img, PretrainAugmentConfig(**{**NO_AUG, "grayscale_prob": 1.0}), RngStream(3), origin=(5, 7))
    crop = img[5:133, 7:135].astype(np.float64)
    expected = 0.299 * crop[..., 0] + 0.587 * crop[..., 1] + 0.114 * crop[..., 2]
    for ch in range(3):
        np.testing.assert_allclose(view[..., ch], expected, atol=1e-6)


def test_distinct_rng_counters_give_distinct_crops():
    img = _img(4, 512, 512)
    cfg = PretrainAugmentConfig()
    views = [pretrain_view(img, cfg, RngStream(9, (i,))) for i in range(4)]
    assert all(not np.array_equal(views[0], v) for v in views[1:])


def test_view_is_deterministic():
    img = _img(5, 300, 300)
    a = pretrain_view(img, PretrainAugmentConfig(), RngStream(3, (1, 2)))
    b = pretrain_view(img, PretrainAugmentConfig(), RngStream(3, (1, 2)))
    assert a.tobytes() == b.tobytes()


def test_small_image_rejected():
    with pytest.raises(ValueError):
        pretrain_view(_img(0, 100, 200), PretrainAugmentConfig(), RngStream(0))


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainAugmentConfig(jitter_prob=1.5)
    with pytest.raises(ValueError):
        PretrainAugmentConfig(brightness=-0.1)
    with pytest.raises(ValueError):
        FinetuneAugmentConfig(scale_min=1.3, scale_max=1.2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_views_stay_in_unit_range(img_seed, rng_seed):
    img = _img(img_seed, 140, 140) * 1.4 - 0.2  # out-of-range input on purpose
    view = pretrain_view(np.clip(img, 0, 1), PretrainAugmentConfig(brightness=2.0, contrast=2.0), RngStream(rng_seed))
    assert view.min() >= 0.0 and view.max() <= 1.0


# -- colour jitter ----------------------------------------------------------

def test_zero_magnitudes_are_identity():
    img = _img(6, 20, 20)
    np.testing.assert_allclose(color_jitter(img, (0, 0, 0, 0), RngStream(1)), img, atol=1e-6)


def test_brightness_clamps():
    out = color_jitter(np.full((2, 2, 3), 0.6, np.float32), (0, 0, 0, 0), RngStream(0))
    assert np.allclose(out, 0.6)
    assert np.all(np.clip(adjust_brightness(np.full((1, 1, 3), 0.6, np.float32), 2.0), 0, 1) == 1.0)


def test_zero_saturation_gives_gray():
    out = adjust_saturation(_img(7, 8, 8), 0.0)
    np.testing.assert_allclose(out[..., 0], out[..., 1], atol=1e-6)
    np.testing.assert_allclose(out[..., 1], out[..., 2], atol=1e-6)


def test_zero_contrast_gives_mean_luma():
    img = _img(8, 8, 8)
    mean_luma = (img.astype(np.float64) @ [0.299, 0.587, 0.114]).mean()
    np.testing.assert_allclose(adjust_contrast(img, 0.0), mean_luma, atol=1e-6)


def test_hsv_matches_colorsys():
    img = _img(9, 6, 7)
    hsv = rgb_to_hsv(img)
    for i in range(6):
        for j in range(7):
            np.testing.assert_allclose(hsv[i, j], colorsys.rgb_to_hsv(*img[i, j].astype(float)), atol=1e-6)
    np.testing.assert_allclose(hsv_to_rgb(hsv), img, atol=1e-6)


def test_hue_shift_full_turn_is_identity():
    img = _img(10, 5, 5)
    np.testing.assert_allclose(adjust_hue(img, 1.0), img, atol=1e-5)
    np.testing.assert_allclose(adjust_hue(img, 0.0), img, atol=1e-6)


def test_grayscale_channels_equal():
    g = to_grayscale(_img(11, 4, 4))
    assert np.array_equal(g[..., 0], g[..., 2])


# -- fine-tune augmentation -------------------------------------------------

def test_zero_rotation_is_identity():
    s = _disc_sample()
    out = geometric_transform(s, "rotation", 0.0)
    np.testing.assert_allclose(out.image, s.image, atol=1e-6)
    np.testing.assert_array_equal(out.targets["vessels"], s.targets["vessels"])


def test_flip_is_involution_and_moves_masks_together():
    img = _img(12, 10, 12)
    mask = (img[..., 0] > 0.5).astype(np.uint8)
    s = Sample(image=img, targets={"vessels": mask}, fov=np.ones_like(mask))
    f = flip_sample(s, True, False)
    np.testing.assert_array_equal(f.image[..., 0] > 0.5, f.targets["vessels"].astype(bool))
    back = flip_sample(flip_sample(s, True, True), True, True)
    np.testing.assert_array_equal(back.image, img)
    np.testing.assert_array_equal(back.targets["vessels"], mask)


def test_scale_area_ratio():
    s = _disc_sample()
    before = s.targets["vessels"].sum()
    after = geometric_transform(s, "scale", 1.2).targets["vessels"].sum()
    assert after / before == pytest.approx(1.44, rel=0.03)


def test_unknown_transform_rejected():
    with pytest.raises(ValueError):
        geometric_transform(_disc_sample(), "shear", 1.0)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["rotation", "scale", "translation"]), st.floats(-1, 1))
def test_masks_track_image(kind, u):
    value = {"rotation": 45 * u, "scale": 1.075 + 0.125 * u, "translation": 0.05 * u}[kind]
    out = geometric_transform(_disc_sample(), kind, value)
    assert _dice(out.image[..., 0] > 0.5, out.targets["vessels"]) > 0.97


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_finetune_output_range_and_binary_masks(seed):
    s = Sample(image=_img(seed % 1000, 32, 32), targets={"vessels": np.ones((32, 32), np.uint8)},
               fov=np.ones((32, 32), np.uint8))
    out = finetune_augment(s, FinetuneAugmentConfig(), RngStream(seed))
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert set(np.unique(out.targets["vessels"])) <= {0, 1}


def test_finetune_deterministic():
    s = _disc_sample(64, 20)
    a = finetune_augment(s, FinetuneAugmentConfig(), RngStream(5, (3, 7)))
    b = finetune_augment(s, FinetuneAugmentConfig(), RngStream(5, (3, 7)))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.targets["vessels"].tobytes() == b.targets["vessels"].tobytes()
