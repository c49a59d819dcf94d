"""Random views for contrastive pre-training and augmentation for fine-tuning.

All randomness comes from an :class:`RngStream`, so a view is fully
determined by the stream it was drawn from.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data.dataset import Sample
from .tensor import RngStream

LUMA = np.array([0.299, 0.587, 0.114], np.float32)
GEOMETRIC_KINDS = ("rotation", "scale", "translation")


def _check_prob(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass(frozen=True)
class PretrainAugmentConfig:
    resize_crop_size: int = 512
    view_crop_size: int = 128
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        for name in ("jitter_prob", "grayscale_prob", "hflip_prob", "vflip_prob"):
            _check_prob(name, getattr(self, name))
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue magnitude must be <= 0.5")

    @property
    def magnitudes(self) -> tuple:
        return (self.brightness, self.contrast, self.saturation, self.hue)


@dataclass(frozen=True)
class FinetuneAugmentConfig:
    rotation_range: float = 45.0  # degrees, symmetric
    scale_min: float = 0.95
    scale_max: float = 1.2
    translate_range: float = 0.05  # fraction of width, horizontal only
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.1
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        _check_prob("hflip_prob", self.hflip_prob)
        _check_prob("vflip_prob", self.vflip_prob)
        if self.scale_min <= 0 or self.scale_min > self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        for name in ("rotation_range", "translate_range", "brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def magnitudes(self) -> tuple:
        return (self.brightness, self.contrast, self.saturation, self.hue)


def as_float_image(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.asarray(image, np.float32)


def luma(image: np.ndarray) -> np.ndarray:
    return image @ LUMA


def adjust_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(image * np.float32(factor), 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    mean = np.float32(luma(image).mean())
    return np.clip(mean + np.float32(factor) * (image - mean), 0.0, 1.0)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = luma(image)[..., None]
    return np.clip(gray + np.float32(factor) * (image - gray), 0.0, 1.0)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    maxc = image.max(axis=-1)
    minc = image.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    rgb = np.stack([np.choose(i, choices_r), np.choose(i, choices_g), np.choose(i, choices_b)], axis=-1)
    return rgb.astype(np.float32)


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` (fraction of a full turn)."""
    if shift == 0:
        return image
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + np.float32(shift)) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    return np.repeat(luma(image)[..., None], 3, axis=-1)


def color_jitter(image: np.ndarray, magnitudes, rng: RngStream) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter in a random order.

    ``magnitudes`` is ``(b, c, s, h)``; factors are drawn from ``[1-b, 1+b]``
    (and likewise for c and s, floored at 0), the hue shift from ``[-h, h]``.
    All four draws happen regardless of the magnitudes.
    """
    b, c, s, h = magnitudes
    order = rng.permutation(4)
    fb = rng.uniform(max(0.0, 1 - b), 1 + b)
    fc = rng.uniform(max(0.0, 1 - c), 1 + c)
    fs = rng.uniform(max(0.0, 1 - s), 1 + s)
    fh = rng.uniform(-h, h)
    out = np.clip(as_float_image(image), 0.0, 1.0)
    ops = (
        lambda x: adjust_brightness(x, fb),
        lambda x: adjust_contrast(x, fc),
        lambda x: adjust_saturation(x, fs),
        lambda x: adjust_hue(x, fh),
    )
    for k in order:
        out = ops[k](out)
    return out


def pretrain_view(image: np.ndarray, cfg: PretrainAugmentConfig, rng: RngStream,
                  origin: tuple[int, int] | None = None) -> np.ndarray:
    """One random view: crop, jitter, grayscale, flips. Returns crop x crop x 3 float32.

    ``origin`` pins the crop's top-left corner (row, col) instead of drawing it.
    """
    size = cfg.view_crop_size
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} crop")
    if origin is None:
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
    else:
        y0, x0 = origin
    view = as_float_image(image[y0:y0 + size, x0:x0 + size])
    jitter_rng = rng.child(1)
    if rng.random() < cfg.jitter_prob:
        view = color_jitter(view, cfg.magnitudes, jitter_rng)
    if rng.random() < cfg.grayscale_prob:
        view = to_grayscale(view)
    if rng.random() < cfg.hflip_prob:
        view = view[:, ::-1]
    if rng.random() < cfg.vflip_prob:
        view = view[::-1]
    return np.ascontiguousarray(np.clip(view, 0.0, 1.0), dtype=np.float32)


def affine_matrix(kind: str, value: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Output-to-input (matrix, offset) in (row, col) coordinates about the image centre.

    ``rotation`` takes degrees, ``scale`` a zoom factor (>1 magnifies),
    ``translation`` a horizontal shift as a fraction of the width.
    """
    h, w = shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    if kind == "rotation":
        t = np.deg2rad(value)
        m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    elif kind == "scale":
        m = np.eye(2) / value
    elif kind == "translation":
        return np.eye(2), np.array([0.0, -value * w])
    else:
        raise ValueError(f"unknown geometric transform {kind!r}")
    return m, centre - m @ centre


def geometric_transform(sample: Sample, kind: str, value: float) -> Sample:
    """Warp image (bilinear) and every mask (nearest) with the same transform; fill 0."""
    m, offset = affine_matrix(kind, value, sample.shape)

    def warp(arr, order):
        return ndimage.affine_transform(arr, m, offset=offset, order=order, mode="constant", cval=0.0)

    image = np.stack([warp(sample.image[..., ch], 1) for ch in range(sample.image.shape[2])], axis=-1)
    targets = {k: warp(v, 0) for k, v in sample.targets.items()}
    fov = None if sample.fov is None else warp(sample.fov, 0)
    return Sample(image=np.clip(image, 0.0, 1.0).astype(np.float32), targets=targets, fov=fov, id=sample.id)


def flip_sample(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    def f(a):
        if a is None:
            return None
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1]
        return np.ascontiguousarray(a)

    return Sample(image=f(sample.image), targets={k: f(v) for k, v in sample.targets.items()},
                  fov=f(sample.fov), id=sample.id)


def sample_geometric(cfg: FinetuneAugmentConfig, rng: RngStream) -> tuple[str, float]:
    kind = GEOMETRIC_KINDS[int(rng.integers(0, 3))]
    if kind == "rotation":
        value = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    elif kind == "scale":
        value = rng.uniform(cfg.scale_min, cfg.scale_max)
    else:
        value = rng.uniform(-cfg.translate_range, cfg.translate_range)
    return kind, float(value)


def finetune_augment(sample: Sample, cfg: FinetuneAugmentConfig, rng: RngStream) -> Sample:
    """One geometric transform (uniform choice), colour jitter on the image, joint flips."""
    kind, value = sample_geometric(cfg, rng)
    out = geometric_transform(sample, kind, value)
    out.image = color_jitter(out.image, cfg.magnitudes, rng.child(1))
    return flip_sample(out, rng.random() < cfg.hflip_prob, rng.random() < cfg.vflip_prob)
