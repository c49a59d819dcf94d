from .checkpoint import CheckpointError, load_checkpoint, load_metadata, save_checkpoint
from .dataset import (
    DatasetManifest, ManifestEntry, ManifestError, Sample, apply_resolution, few_shot_subset,
    load_dataset, load_sample, parse_manifest, split, write_manifest,
)
from .imageio import read_mask, read_rgb, resize_bilinear, resize_nearest, write_gray, write_rgb
from .synth import SynthConfig, synth_generate, synth_sample, write_synth_dataset

__all__ = [
    "CheckpointError", "DatasetManifest", "ManifestEntry", "ManifestError", "Sample", "SynthConfig",
    "apply_resolution", "few_shot_subset", "load_checkpoint", "load_dataset", "load_metadata",
    "load_sample", "parse_manifest", "read_mask", "read_rgb", "resize_bilinear", "resize_nearest",
    "save_checkpoint", "split", "synth_generate", "synth_sample", "write_gray", "write_manifest",
    "write_rgb", "write_synth_dataset",
]
