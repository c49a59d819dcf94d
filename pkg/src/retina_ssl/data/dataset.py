"""Samples, dataset manifests, and train/validation splits.

A manifest is a UTF-8 text file, one sample per line, tab-separated::

    image<TAB>fov<TAB>target:vessels=masks/01.png<TAB>target:EX=...

``fov`` may be ``-`` when the dataset has no field-of-view masks. Paths are
relative to the manifest's directory. Lines starting with ``#`` are comments,
except ``# resize-width=N`` which declares the resolution policy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..tensor import RngStream
from .imageio import read_mask, read_rgb, resize_bilinear, resize_nearest, size_for_width


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    targets: dict = field(default_factory=dict)  # name -> H x W uint8 in {0, 1}
    fov: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for name, m in list(self.targets.items()) + [("fov", self.fov)]:
            if m is not None and m.shape != (h, w):
                raise ManifestError(
                    f"sample {self.id!r}: mask {name!r} has shape {m.shape}, image has {(h, w)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def fov_or_ones(self) -> np.ndarray:
        if self.fov is None:
            return np.ones(self.shape, np.uint8)
        return self.fov

    def resized(self, width: int, height: int) -> "Sample":
        return Sample(
            image=resize_bilinear(self.image, width, height),
            targets={k: resize_nearest(v, width, height) for k, v in self.targets.items()},
            fov=None if self.fov is None else resize_nearest(self.fov, width, height),
            id=self.id,
        )


@dataclass
class ManifestEntry:
    id: str
    image: str
    fov: Optional[str]
    targets: dict


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    resize_width: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def target_names(self) -> list[str]:
        names = []
        for e in self.entries:
            for k in e.targets:
                if k not in names:
                    names.append(k)
        return names

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.root, [e for e in self.entries if e.id in keep], self.resize_width)


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries, resize_width = [], None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("resize-width="):
                resize_width = int(body.split("=", 1)[1])
            continue
        cols = line.split("\t")
        image = cols[0].strip()
        fov = cols[1].strip() if len(cols) > 1 else "-"
        targets = {}
        for col in cols[2:]:
            col = col.strip()
            if not col:
                continue
            if col.startswith("target:"):
                col = col[len("target:"):]
            if "=" not in col:
                raise ManifestError(f"{path}:{lineno}: expected name=path, got {col!r}")
            name, rel = col.split("=", 1)
            targets[name] = rel
        entries.append(ManifestEntry(Path(image).stem, image, None if fov in ("", "-") else fov, targets))
    entries.sort(key=lambda e: e.id)
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate sample ids")
    manifest = DatasetManifest(path.parent, entries, resize_width)
    for e in entries:
        for rel in [e.image, e.fov, *e.targets.values()]:
            if rel is not None and not manifest.path(rel).exists():
                raise ManifestError(f"{path}: referenced file does not exist: {rel}")
    return manifest


def write_manifest(path, entries: Sequence[ManifestEntry], resize_width: int | None = None) -> Path:
    path = Path(path)
    lines = []
    if resize_width:
        lines.append(f"# resize-width={resize_width}")
    for e in entries:
        cols = [e.image, e.fov or "-"] + [f"target:{k}={v}" for k, v in e.targets.items()]
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, targets: Sequence[str] | None = None) -> Sample:
    image = read_rgb(manifest.path(entry.image))
    fov = read_mask(manifest.path(entry.fov)) if entry.fov else None
    names = entry.targets if targets is None else [t for t in targets if t in entry.targets]
    masks = {name: read_mask(manifest.path(entry.targets[name])) for name in names}
    return Sample(image=image, targets=masks, fov=fov, id=entry.id)


def load_dataset(manifest: DatasetManifest, targets: Sequence[str] | None = None) -> list[Sample]:
    """Load every entry at its native resolution (sorted by id)."""
    return [load_sample(manifest, e, targets) for e in manifest.entries]


def apply_resolution(sample: Sample, width: int | None, multiple: int = 1) -> Sample:
    """Resize to ``width`` (aspect preserved), then round both sides to ``multiple``."""
    h, w = sample.shape
    if width:
        w_new, h_new = size_for_width(h, w, width)
    else:
        w_new, h_new = w, h
    if multiple > 1:
        w_new = max(multiple, int(round(w_new / multiple)) * multiple)
        h_new = max(multiple, int(round(h_new / multiple)) * multiple)
    if (h_new, w_new) == (h, w):
        return sample
    return sample.resized(w_new, h_new)


def split(items: Sequence, val_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle; the first floor(N * val_fraction) go to validation.

    Both halves keep the input order, so the result only depends on the seed
    and the (sorted) input.
    """
    n = len(items)
    n_val = int(math.floor(n * val_fraction + 1e-9))
    perm = RngStream(seed, (0x5B1D,)).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [items[i] for i in range(n) if i not in val_idx]
    val = [items[i] for i in range(n) if i in val_idx]
    return train, val


def few_shot_subset(items: Sequence, n: int | None, seed: int) -> list:
    """Seeded subset of ``n`` training items (all of them when ``n`` is None)."""
    if n is None or n >= len(items):
        return list(items)
    perm = RngStream(seed, (0xF5,)).permutation(len(items))[:n]
    return [items[i] for i in sorted(perm.tolist())]
