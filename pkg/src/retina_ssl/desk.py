"""Small-scale versions of the few-shot and feature-probe experiments on synthetic data."""
from __future__ import annotations

import csv
import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import PretrainAugmentConfig
from .data.checkpoint import load_checkpoint, save_checkpoint
from .data.dataset import few_shot_subset, split
from .data.synth import SynthConfig, synth_generate
from .evaluation import evaluate
from .moco import PretrainConfig, pretrain, write_loss_history
from .probe import feature_target_correlation
from .presets import DESK
from .tensor import RngStream
from .train import ScheduleConfig, TrainRunConfig, epochs_to_best, finetune, load_into, select_checkpoint
from .unet import UNetConfig, build_unet


@dataclass(frozen=True)
class DeskConfig:
    unlabeled_images: int = DESK["unlabeled-images"]
    unlabeled_size: int = DESK["unlabeled-size"]
    labeled_images: int = DESK["labeled-images"]
    labeled_size: int = DESK["labeled-size"]
    test_images: int = DESK["test-images"]
    pretrain_epochs: int = DESK["pretrain-epochs"]
    pretrain_batch_size: int = DESK["pretrain-batch-size"]
    queue_length: int = DESK["queue-length"]
    alpha: float = DESK["alpha"]
    tau: float = DESK["tau"]
    view_crop_size: int = 128
    finetune_epochs: int = DESK["finetune-epochs"]
    finetune_batch_size: int = DESK["finetune-batch-size"]
    train_images: int = DESK["train-images"]
    runs: int = DESK["runs"]
    target: str = "vessels"
    seed: int = 0

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs, batch_size=self.pretrain_batch_size,
            queue_length=self.queue_length, tau=self.tau, alpha=self.alpha,
            augment=PretrainAugmentConfig(resize_crop_size=self.unlabeled_size,
                                          view_crop_size=self.view_crop_size),
            seed=self.seed,
        )

    def pretrain_key(self) -> str:
        keys = ("unlabeled_images", "unlabeled_size", "pretrain_epochs", "pretrain_batch_size",
                "queue_length", "alpha", "tau", "view_crop_size", "seed")
        fields = {k: getattr(self, k) for k in keys}
        fields["synth"] = SynthConfig(size=self.unlabeled_size).to_text()
        blob = json.dumps(fields, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def unlabeled_corpus(cfg: DeskConfig) -> list[np.ndarray]:
    samples = synth_generate(cfg.unlabeled_images, SynthConfig(size=cfg.unlabeled_size),
                             RngStream(cfg.seed, (0xD0,)), prefix="unlabeled")
    return [np.rint(s.image * 255).astype(np.uint8) for s in samples]


def labeled_corpus(cfg: DeskConfig) -> list:
    return synth_generate(cfg.labeled_images, SynthConfig(size=cfg.labeled_size),
                          RngStream(cfg.seed, (0xD1,)), prefix="labeled")


def desk_pretrain(cfg: DeskConfig, cache_dir=None, progress=None) -> tuple["OrderedDict", list]:
    """Encoder state and per-step loss history; reuses ``cache_dir`` results when present."""
    ckpt = hist = None
    if cache_dir is not None:
        d = Path(cache_dir) / f"desk-pretrain-{cfg.pretrain_key()}"
        ckpt, hist = d / "encoder.ntc", d / "pretrain_loss.csv"
        if ckpt.exists() and hist.exists():
            with hist.open() as f:
                rows = [(int(r["epoch"]), int(r["step"]), float(r["loss"]), float(r["lr"]))
                        for r in csv.DictReader(f)]
            return load_checkpoint(ckpt), rows
    result = pretrain(unlabeled_corpus(cfg), cfg.pretrain_config(), progress=progress)
    state = result.state.theta_e.state_dict("encoder.")
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, state, {"desk": asdict(cfg)})
        write_loss_history(hist, result.history)
    return state, result.history


def run_split(labeled: list, cfg: DeskConfig, run: int) -> tuple[list, list, list]:
    """(train subset, validation, test) for one run; the test set is fixed across runs."""
    test = labeled[:cfg.test_images]
    pool = labeled[cfg.test_images:]
    train, val = split(pool, 0.2, seed=cfg.seed * 1000 + run)
    return few_shot_subset(train, cfg.train_images, seed=cfg.seed * 1000 + run), val, test


def finetune_arm(labeled: list, cfg: DeskConfig, run: int, encoder_state=None) -> dict:
    """Fine-tune one arm of one run and evaluate it with the full protocol."""
    train, val, test = run_split(labeled, cfg, run)
    model = build_unet(UNetConfig(), RngStream(cfg.seed, (0xF7, run)))
    if encoder_state is not None:
        load_into(model, encoder_state, prefix="encoder.")
    tcfg = TrainRunConfig(target=cfg.target, epochs=cfg.finetune_epochs, batch_size=cfg.finetune_batch_size,
                          schedule=ScheduleConfig(), seed=cfg.seed * 1000 + run)
    result = finetune(model, train, val, tcfg)
    best, epoch = select_checkpoint(result.checkpoints)
    load_into(model, best.state)
    report = evaluate(model, test, train, cfg.target)
    return {
        "run": run,
        "arm": "pretrained" if encoder_state is not None else "baseline",
        "train_ids": ",".join(s.id for s in train),
        "best_epoch": epoch,
        "epochs_to_best": epochs_to_best(result.history),
        "val_dice": best.val_dice,
        "threshold": report.threshold,
        "test_dice": report.dice,
        "final_train_loss": result.history[-1].train_loss,
    }


def few_shot_experiment(cfg: DeskConfig, encoder_state, labeled: Optional[list] = None) -> list[dict]:
    labeled = labeled_corpus(cfg) if labeled is None else labeled
    rows = []
    for run in range(cfg.runs):
        rows.append(finetune_arm(labeled, cfg, run, None))
        rows.append(finetune_arm(labeled, cfg, run, encoder_state))
    return rows


def probe_experiment(cfg: DeskConfig, encoder_state, labeled: Optional[list] = None,
                     targets=("vessels", "lesions")) -> tuple:
    """Correlation matrices for the pre-trained and a freshly initialised encoder."""
    labeled = labeled_corpus(cfg) if labeled is None else labeled
    pre = build_unet(UNetConfig(), RngStream(cfg.seed, (0xB0,)))
    load_into(pre, encoder_state, prefix="encoder.")
    rand = build_unet(UNetConfig(), RngStream(cfg.seed, (0xB0,)))
    return (feature_target_correlation(pre, labeled, list(targets)),
            feature_target_correlation(rand, labeled, list(targets)))


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path
