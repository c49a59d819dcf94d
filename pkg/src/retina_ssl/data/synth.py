"""Synthetic fundus-like images with exact vessel and lesion masks.

Each image has a circular field of view lit by a radial gradient, a bright
optic disc, 5-15 tapered vessel trees drawn as chains of quadratic Bezier
segments, and up to 8 bright exudate-like ellipses. Colour, brightness and
vessel contrast vary per image.
"""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..tensor import RngStream
from .dataset import ManifestEntry, Sample, write_manifest
from .imageio import write_gray, write_rgb


@dataclass
class SynthConfig:
    size: int = 512
    fov_radius: float = 0.46  # fraction of size
    min_vessels: int = 5
    max_vessels: int = 15
    min_width: float = 1.0
    max_width: float = 6.0
    segments: int = 4
    segment_length: float = 0.2  # fraction of size
    min_lesions: int = 0
    max_lesions: int = 8
    noise: float = 0.01
    width_spread: float = 0.25  # vessel widths stay within this fraction of the image's calibre
    max_texture: float = 0.08  # amplitude of the background grain
    min_coverage: float = 0.025  # vessel fraction of the FOV
    max_coverage: float = 0.14

    @classmethod
    def from_text(cls, text: str) -> "SynthConfig":
        """Parse ``key=value`` lines; unknown keys are rejected."""
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown synth config key {key!r}")
            values[key] = type(getattr(defaults, key))(val.strip())
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def _stamp_curve(mask: np.ndarray, pts: np.ndarray, radii: np.ndarray) -> None:
    """Set every pixel within radius of some sample point on the curve."""
    h, w = mask.shape
    rmax = int(np.ceil(radii.max()))
    oy, ox = np.mgrid[-rmax:rmax + 1, -rmax:rmax + 1]
    oy, ox = oy.ravel(), ox.ravel()
    centre = np.rint(pts).astype(np.int64)
    py = centre[:, 1:2] + oy
    px = centre[:, 0:1] + ox
    d2 = (py - pts[:, 1:2]) ** 2 + (px - pts[:, 0:1]) ** 2
    hit = (d2 <= radii[:, None] ** 2) & (py >= 0) & (py < h) & (px >= 0) & (px < w)
    mask[py[hit], px[hit]] = 1


def _bezier(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


@dataclass
class _Style:
    calibre: float  # typical trunk width in pixels
    tortuosity: float  # scales heading changes and segment bends


def _vessel_path(rng: RngStream, cfg: SynthConfig, style: _Style, start: np.ndarray, heading: float,
                 width: float, segments: int, scale: float) -> tuple[np.ndarray, np.ndarray]:
    seg_len = cfg.segment_length * cfg.size * scale
    pts, p = [], start.astype(np.float64)
    for _ in range(segments):
        heading += rng.uniform(-0.7, 0.7) * style.tortuosity
        length = seg_len * rng.uniform(0.6, 1.3)
        end = p + length * np.array([np.cos(heading), np.sin(heading)])
        bend = rng.uniform(-0.35, 0.35) * style.tortuosity * length
        mid = (p + end) / 2 + bend * np.array([-np.sin(heading), np.cos(heading)])
        pts.append(_bezier(p, mid, end, max(8, int(2 * length))))
        p = end
    pts = np.concatenate(pts)
    radii = np.maximum(width * np.linspace(1.0, 0.45, len(pts)) / 2.0, 0.5)
    return pts, radii


def _vessel_tree(rng: RngStream, cfg: SynthConfig, style: _Style, start: np.ndarray,
                 centre: np.ndarray) -> list:
    """Main vessel heading away from the disc plus 2-4 thinner side branches."""
    width = float(np.clip(style.calibre * rng.uniform(1 - cfg.width_spread, 1 + cfg.width_spread),
                          cfg.min_width, cfg.max_width))
    away = start - centre
    heading = np.arctan2(away[1], away[0]) if np.any(away) else rng.uniform(0, 2 * np.pi)
    heading += rng.uniform(-1.2, 1.2)
    trunk = _vessel_path(rng, cfg, style, start, heading, width, cfg.segments, 1.0)
    paths = [trunk]
    for _ in range(int(rng.integers(2, 5))):
        k = int(rng.integers(len(trunk[0]) // 5, len(trunk[0])))
        side = heading + rng.choice(2) * 2 * 0.8 - 0.8 + rng.uniform(-0.3, 0.3)
        bw = max(cfg.min_width, trunk[1][k] * 2 * rng.uniform(0.5, 0.9))
        paths.append(_vessel_path(rng, cfg, style, trunk[0][k], side, bw, max(1, cfg.segments - 1), 0.7))
    return paths


def synth_sample(cfg: SynthConfig, rng: RngStream, sample_id: str = "") -> Sample:
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2.0
    radius = cfg.fov_radius * size
    r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2)
    fov = (r <= radius).astype(np.uint8)

    hue = rng.uniform(0.0, 0.08)
    sat = rng.uniform(0.6, 0.9)
    val = rng.uniform(0.55, 0.9)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val), np.float32)
    illum = np.clip(1.0 - rng.uniform(0.3, 0.6) * (r / radius) ** 2, 0.0, 1.0)
    # illumination centre drifts a little so images are not all symmetric
    shift = rng.uniform(-0.1, 0.1, size=2) * size
    illum *= np.clip(1.0 - 0.15 * ((xx - c - shift[0]) / radius), 0.7, 1.2)
    image = base[None, None, :] * illum[..., None]

    angle = rng.uniform(0, 2 * np.pi)
    disc_r = rng.uniform(0.05, 0.08) * size
    disc_c = np.array([c, c]) + rng.uniform(0.35, 0.55) * radius * np.array([np.cos(angle), np.sin(angle)])
    disc = np.exp(-(((xx - disc_c[0]) ** 2 + (yy - disc_c[1]) ** 2) / (2 * disc_r ** 2)))
    image += 0.35 * disc[..., None] * np.array([1.0, 0.9, 0.6], np.float32)

    grain = ndimage.gaussian_filter(rng.normal((size, size), 1.0), rng.uniform(1.0, 6.0))
    grain *= rng.uniform(0.0, cfg.max_texture) / max(float(grain.std()), 1e-6)
    image *= 1.0 + grain[..., None]

    style = _Style(calibre=rng.uniform(cfg.min_width, cfg.max_width), tortuosity=rng.uniform(0.3, 1.3))

    # redraw sparse or crowded layouts so coverage stays in a realistic band
    fov_area = fov.sum()
    for _ in range(20):
        vessels = np.zeros((size, size), np.uint8)
        for _ in range(int(rng.integers(cfg.min_vessels, cfg.max_vessels + 1))):
            if rng.random() < 0.6:
                start = disc_c + rng.uniform(-0.5, 0.5, size=2) * disc_r
            else:
                a, rr = rng.uniform(0, 2 * np.pi), rng.uniform(0.1, 0.8) * radius
                start = np.array([c, c]) + rr * np.array([np.cos(a), np.sin(a)])
            for pts, radii in _vessel_tree(rng, cfg, style, start, disc_c):
                _stamp_curve(vessels, pts, radii)
        vessels &= fov
        if cfg.min_coverage <= vessels.sum() / fov_area <= cfg.max_coverage:
            break
    contrast = rng.uniform(0.4, 0.7)
    soft = ndimage.gaussian_filter(vessels.astype(np.float32), 0.6)
    vessel_tint = np.array([0.55, 0.35, 0.4], np.float32)
    image *= 1.0 - contrast * soft[..., None] * (1.0 - vessel_tint)

    lesions = np.zeros((size, size), np.uint8)
    for _ in range(int(rng.integers(cfg.min_lesions, cfg.max_lesions + 1))):
        a, rr = rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 0.85) * radius
        cy, cx = c + rr * np.sin(a), c + rr * np.cos(a)
        ay, ax = rng.uniform(0.004, 0.02, size=2) * size
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        lesions |= ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)
    lesions &= fov
    soft = ndimage.gaussian_filter(lesions.astype(np.float32), 0.8)
    image += rng.uniform(0.25, 0.45) * soft[..., None] * np.array([1.0, 0.95, 0.35], np.float32)

    image += rng.normal(image.shape, cfg.noise)
    image = np.clip(image, 0.0, 1.0) * fov[..., None]
    return Sample(image=image.astype(np.float32), targets={"vessels": vessels, "lesions": lesions},
                  fov=fov, id=sample_id)


def synth_generate(n: int, cfg: SynthConfig | None = None, rng: RngStream | None = None,
                   prefix: str = "synth") -> list[Sample]:
    """``n`` samples; sample ``i`` depends only on ``(rng.seed, rng.path, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SynthConfig()
    rng = rng or RngStream(0)
    return [synth_sample(cfg, rng.child(i), f"{prefix}_{i:05d}") for i in range(n)]


def write_synth_dataset(root, samples, with_targets: bool = True) -> Path:
    """Write PNGs and a manifest under ``root``; returns the manifest path."""
    root = Path(root)
    for sub in ("images", "fov", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img = f"images/{s.id}.png"
        write_rgb(root / img, s.image)
        fov = None
        if s.fov is not None:
            fov = f"fov/{s.id}.png"
            write_gray(root / fov, s.fov)
        targets = {}
        if with_targets:
            for name, m in s.targets.items():
                rel = f"masks/{s.id}_{name}.png"
                write_gray(root / rel, m)
                targets[name] = rel
        entries.append(ManifestEntry(s.id, img, fov, targets))
    return write_manifest(root / "dataset.manifest", entries)
