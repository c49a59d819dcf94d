"""Correlation of encoder feature maps with target masks, and activation-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.dataset import Sample
from .data.imageio import resize_bilinear, write_gray
from .unet import UNetModel


def pearson(x, y) -> float:
    """Pearson r in float64; 0 when either input has zero variance."""
    x = np.asarray(x, np.float64).ravel()
    y = np.asarray(y, np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.dot(xc, xc)
    syy = np.dot(yc, yc)
    if sxx == 0 or syy == 0:
        return 0.0
    return float(np.clip(np.dot(xc, yc) / np.sqrt(sxx * syy), -1.0, 1.0))


def downsample_area(mask: np.ndarray, factor: int = 8) -> np.ndarray:
    """Mean over non-overlapping factor x factor blocks."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} is not divisible by {factor}")
    m = np.asarray(mask, np.float64)
    return m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def correlate_columns(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Pearson r between every column of ``features`` (M x U) and of ``targets`` (M x T)."""
    f = features - features.mean(axis=0)
    t = targets - targets.mean(axis=0)
    fn = np.sqrt((f * f).sum(axis=0))
    tn = np.sqrt((t * t).sum(axis=0))
    num = f.T @ t
    denom = np.outer(fn, tn)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


@dataclass
class CorrelationMatrix:
    values: np.ndarray  # units x targets
    targets: list
    absent_targets: list = field(default_factory=list)
    constant_units: list = field(default_factory=list)

    @property
    def units(self) -> int:
        return self.values.shape[0]

    def column(self, target: str) -> np.ndarray:
        return self.values[:, self.targets.index(target)]

    def max_abs(self, target: str) -> float:
        return float(np.max(np.abs(self.column(target))))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["unit", "target", "r"])
            for u in range(self.units):
                for j, t in enumerate(self.targets):
                    w.writerow([u, t, repr(float(self.values[u, j]))])
        return path


def encoder_maps(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Eval-mode final encoder features, units x H/8 x W/8."""
    x = np.ascontiguousarray(np.asarray(image, np.float32).transpose(2, 0, 1)[None])
    return model.encoder_features(x, train=False).data[0]


def feature_target_correlation(model: UNetModel, samples: Sequence[Sample], targets: Sequence[str],
                               pooling: str = "pooled", features=None) -> CorrelationMatrix:
    """Pearson r of every encoder unit with every area-downsampled target mask.

    ``pooled`` concatenates all images' grid cells before correlating;
    ``per-image`` averages per-image coefficients instead. ``features``
    optionally supplies precomputed per-sample feature maps.
    """
    if pooling not in ("pooled", "per-image"):
        raise ValueError(f"unknown pooling {pooling!r}")
    factor = model.config.divisor
    feats, masks = [], []
    for i, s in enumerate(samples):
        fm = encoder_maps(model, s.image) if features is None else np.asarray(features[i])
        u = fm.shape[0]
        feats.append(fm.reshape(u, -1).T.astype(np.float64))
        cols = []
        for t in targets:
            m = s.targets.get(t)
            m = np.zeros(s.shape, np.float64) if m is None else m
            cols.append(downsample_area(m, factor).ravel())
        masks.append(np.stack(cols, axis=1))
    all_f = np.concatenate(feats)
    all_m = np.concatenate(masks)
    if pooling == "pooled":
        values = correlate_columns(all_f, all_m)
    else:
        values = np.mean([correlate_columns(f, m) for f, m in zip(feats, masks)], axis=0)
    absent = [t for j, t in enumerate(targets) if not np.any(all_m[:, j])]
    constant = [int(u) for u in np.nonzero(all_f.std(axis=0) == 0)[0]]
    return CorrelationMatrix(values, list(targets), absent, constant)


def normalize_map(fm: np.ndarray) -> np.ndarray:
    lo, hi = float(fm.min()), float(fm.max())
    if hi <= lo:
        return np.zeros_like(fm, dtype=np.float32)
    return ((fm - lo) / (hi - lo)).astype(np.float32)


def activation_map(model: UNetModel, image: np.ndarray, unit: int) -> np.ndarray:
    """One unit's feature map, min-max scaled to [0, 1] and upsampled to the image size."""
    fm = encoder_maps(model, image)
    if not 0 <= unit < fm.shape[0]:
        raise IndexError(f"unit {unit} out of range 0..{fm.shape[0] - 1}")
    h, w = image.shape[:2]
    return np.clip(resize_bilinear(normalize_map(fm[unit]), w, h), 0.0, 1.0)


def export_activation_maps(model: UNetModel, image: np.ndarray, units: Sequence[int], out_dir,
                           stem: str = "unit") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for u in units:
        p = out_dir / f"{stem}{u:03d}.png"
        write_gray(p, activation_map(model, image, u))
        paths.append(p)
    return paths
