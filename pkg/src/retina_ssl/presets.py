"""Named hyperparameter sets as flat key=value dictionaries.

Keys use the same names as the CLI options, so a preset can be dumped to a
config file and edited.
"""
from __future__ import annotations

PRETRAIN = {
    "epochs": 600,
    "batch-size": 64,
    "queue-length": 4096,
    "tau": 0.07,
    "alpha": 0.999,
    "weight-decay": 1e-4,
    "lr-max": 1e-2,
    "lr-min": 1e-8,
    "lr-period": 50,
    "resize-crop-size": 512,
    "view-crop-size": 128,
}

_FINETUNE_COMMON = {
    "epochs": 1500,
    "batch-size": 4,
    "weight-decay": 0.0,
    "checkpoint-every": 10,
    "schedule": "cosine-restarts",
    "lr-max": 1e-2,
    "lr-min": 1e-8,
    "lr-period": 50,
    "conv-skip": False,
    "val-fraction": 0.2,
}

FINETUNE = {
    "drive": dict(_FINETUNE_COMMON, **{"resize-width": 0, "target": "vessels"}),
    "hrf": dict(_FINETUNE_COMMON, **{"resize-width": 1024, "target": "vessels"}),
    "chase": dict(_FINETUNE_COMMON, **{"resize-width": 0, "target": "vessels"}),
    # lesions: one network per target, constant LR, convolutional skips
    "idrid": dict(_FINETUNE_COMMON, **{"resize-width": 1024, "target": "EX", "schedule": "constant",
                                       "lr-max": 1e-3, "conv-skip": True}),
}

CROSS_TRAIN = dict(_FINETUNE_COMMON, **{
    "resize-width": 512,
    "weight-decay": 1e-4,
    "decoder-widths": "16,8,4",
    "target": "vessels",
})

# width the model runs at for each transfer target; 0 keeps the native size
TRANSFER_WIDTHS = {
    "hrf": 1024,
    "drhagis": 1024,
    "av-wide": 1024,
    "les-av": 512,
    "chase": 512,
    "stare": 512,
}

# reduced settings that run on a laptop CPU against the synthetic corpus
DESK = {
    "unlabeled-images": 512,
    "unlabeled-size": 512,
    "labeled-images": 32,
    "labeled-size": 256,
    "test-images": 16,
    "pretrain-epochs": 50,
    "pretrain-batch-size": 16,
    "queue-length": 256,
    "alpha": 0.99,
    "tau": 0.07,
    "finetune-epochs": 100,
    "finetune-batch-size": 1,
    "train-images": 1,
    "runs": 4,
}

PRESETS = {"pretrain": PRETRAIN, "cross-train": CROSS_TRAIN, "desk": DESK,
           **{f"finetune-{k}": v for k, v in FINETUNE.items()}}
