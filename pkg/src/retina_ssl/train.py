"""Adam, cosine LR with restarts, and the supervised fine-tuning loop."""
from __future__ import annotations

import csv
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .augment import FinetuneAugmentConfig, finetune_augment
from .data.checkpoint import load_checkpoint, load_metadata, save_checkpoint
from .data.dataset import Sample
from .tensor import ModelParams, RngStream, Tensor, binary_cross_entropy
from .unet import UNetModel


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.m:
            out["adam.m." + name] = self.m[name]
            out["adam.v." + name] = self.v[name]
        out["adam.step"] = np.array([self.step], np.float32)
        return out

    @classmethod
    def from_state_dict(cls, state: Mapping[str, np.ndarray]) -> "AdamState":
        new = cls()
        for k, arr in state.items():
            if k.startswith("adam.m."):
                new.m[k[len("adam.m."):]] = np.array(arr, np.float32)
            elif k.startswith("adam.v."):
                new.v[k[len("adam.v."):]] = np.array(arr, np.float32)
        if "adam.step" in state:
            new.step = int(np.asarray(state["adam.step"]).ravel()[0])
        return new


def adam_step(params: ModelParams, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is an L2 term added to the gradient. Parameters without a
    gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + np.float32(weight_decay) * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= np.float32(lr) * update.astype(np.float32)


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine-restarts"
    eta_max: float = 1e-2
    eta_min: float = 1e-8
    period: int = 50

    def __post_init__(self):
        if self.kind not in ("cosine-restarts", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must be <= eta_max")
        if self.period < 1:
            raise ValueError("period must be >= 1")


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate for a 0-based epoch; restarts every ``period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.kind == "constant":
        return cfg.eta_max
    phase = epoch % cfg.period
    if phase == 0:
        return cfg.eta_max
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + math.cos(math.pi * phase / cfg.period))


def segmentation_loss(pred: Tensor, target: np.ndarray, fov: Optional[np.ndarray] = None) -> Tensor:
    """Pixel-wise BCE averaged over in-FOV pixels."""
    if np.shape(target) != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {np.shape(target)}")
    if fov is not None and not np.any(fov):
        raise ValueError("field-of-view mask is empty")
    return binary_cross_entropy(pred, target, fov)


def dice_from_counts(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else float("nan")


@dataclass
class TrainRunConfig:
    target: str = "vessels"
    epochs: int = 1500
    batch_size: int = 4
    weight_decay: float = 0.0
    checkpoint_every: int = 10
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: FinetuneAugmentConfig = field(default_factory=FinetuneAugmentConfig)
    seed: int = 0
    monitor_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("epochs, batch_size and checkpoint_every must be >= 1")

    def is_checkpoint_epoch(self, epoch: int) -> bool:
        """``epoch`` counts completed epochs (1-based); the final one always checkpoints."""
        return epoch % self.checkpoint_every == 0 or epoch == self.epochs


@dataclass
class CheckpointRecord:
    epoch: int
    val_dice: float
    state: "OrderedDict[str, np.ndarray]"
    path: Optional[Path] = None


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float = float("nan")


@dataclass
class RunCounters:
    """Which sample ids were augmented, back-propagated, or only evaluated."""

    augmented: Counter = field(default_factory=Counter)
    gradient: Counter = field(default_factory=Counter)
    evaluated: Counter = field(default_factory=Counter)


@dataclass
class FinetuneResult:
    history: list
    checkpoints: list
    counters: RunCounters
    adam: AdamState


def stack_batch(samples: Sequence[Sample], target: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    y = np.stack([s.targets[target] for s in samples])[:, None].astype(np.float32)
    fov = np.stack([s.fov_or_ones() for s in samples])[:, None].astype(np.float32)
    return x, y, fov


def monitor_dice(model: UNetModel, samples: Sequence[Sample], target: str, threshold: float = 0.5,
                 counters: RunCounters | None = None) -> float:
    """Pooled Dice at a fixed threshold, eval mode, no TTA."""
    tp = fp = fn = 0
    for s in samples:
        if counters is not None:
            counters.evaluated[s.id] += 1
        p = model.predict(s.image.transpose(2, 0, 1)[None])[0, 0]
        fov = s.fov_or_ones().astype(bool)
        pred = (p >= threshold) & fov
        gt = s.targets[target].astype(bool) & fov
        tp += int(np.sum(pred & gt))
        fp += int(np.sum(pred & ~gt))
        fn += int(np.sum(~pred & gt))
    return dice_from_counts(tp, fp, fn)


def train_state(model: UNetModel, adam: AdamState) -> "OrderedDict[str, np.ndarray]":
    state = model.params.state_dict()
    state.update(adam.state_dict())
    return state


def write_history(path, history: Sequence[HistoryRow]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train-loss", "val-dice"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.lr)), repr(float(r.train_loss)), repr(float(r.val_dice))])
    return path


def read_history(path) -> list:
    with Path(path).open(newline="") as f:
        return [HistoryRow(int(r["epoch"]), float(r["lr"]), float(r["train-loss"]), float(r["val-dice"]))
                for r in csv.DictReader(f)]


def finetune(model: UNetModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
             cfg: TrainRunConfig, out_dir=None, resume=None, keep_states: bool = True,
             stop_after: int | None = None) -> FinetuneResult:
    """Train ``model`` in place.

    Every epoch shuffles the training set, augments each sample, and takes one
    Adam step per batch at the epoch's scheduled rate. Checkpoints (params,
    BN buffers and Adam moments) are taken every ``checkpoint_every`` epochs
    together with the validation Dice. With ``out_dir`` set, checkpoints and
    ``history.csv`` are written there. ``resume`` continues from a checkpoint
    file written by an earlier run; ``stop_after`` ends the run early after
    that many total epochs (used to test resumption).
    """
    if not train_set:
        raise ValueError("training set is empty")
    train_set = list(train_set)
    val_set = list(val_set)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    adam = AdamState()
    history: list = []
    start = 0
    if resume is not None:
        state = load_checkpoint(resume)
        model.params.load_state_dict(OrderedDict((k, v) for k, v in state.items() if not k.startswith("adam.")))
        adam = AdamState.from_state_dict(state)
        meta = load_metadata(resume)
        start = int(meta["epoch"])
        hist_path = Path(str(resume) + ".history.csv")
        if hist_path.exists():
            history = read_history(hist_path)[:start]
    counters = RunCounters()
    checkpoints: list = []
    root = RngStream(cfg.seed, (0x7A11,))
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, last):
        lr = cosine_lr(epoch, cfg.schedule)
        erng = root.child(epoch)
        order = erng.permutation(len(train_set))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            batch = []
            for i in idx:
                s = train_set[int(i)]
                counters.augmented[s.id] += 1
                counters.gradient[s.id] += 1
                batch.append(finetune_augment(s, cfg.augment, erng.child(1, int(i))))
            x, y, fov = stack_batch(batch, cfg.target)
            model.params.zero_grad()
            loss = segmentation_loss(model.forward(Tensor(x), train=True), y, fov)
            loss.backward()
            adam_step(model.params, adam, lr, cfg.weight_decay)
            losses.append(loss.item())
        row = HistoryRow(epoch + 1, lr, float(np.mean(losses)))
        history.append(row)
        if cfg.is_checkpoint_epoch(epoch + 1) or epoch + 1 == last:
            if val_set:
                row.val_dice = monitor_dice(model, val_set, cfg.target, cfg.monitor_threshold, counters)
            state = train_state(model, adam)
            path = None
            if out_dir is not None:
                path = save_checkpoint(out_dir / f"epoch{epoch + 1:05d}.ntc", state,
                                       {"epoch": epoch + 1, "val_dice": row.val_dice, "seed": cfg.seed})
                write_history(str(path) + ".history.csv", history)
            checkpoints.append(CheckpointRecord(epoch + 1, row.val_dice, state if keep_states else None, path))
    if out_dir is not None:
        write_history(out_dir / "history.csv", history)
    return FinetuneResult(history, checkpoints, counters, adam)


def _best_index(scores: Sequence[float]) -> int:
    best, best_i = -math.inf, None
    for i, s in enumerate(scores):
        if not math.isnan(s) and s > best:
            best, best_i = s, i
    return len(scores) - 1 if best_i is None else best_i


def select_checkpoint(checkpoints: Sequence[CheckpointRecord], model: UNetModel | None = None,
                      val_set: Sequence[Sample] | None = None, target: str = "vessels",
                      threshold: float = 0.5) -> tuple[CheckpointRecord, int]:
    """Highest validation Dice, ties to the earliest epoch.

    Stored ``val_dice`` values are used unless ``model`` and ``val_set`` are
    given, in which case each checkpoint is loaded into ``model`` and scored.
    Without any validation score the last checkpoint wins.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if model is not None and val_set:
        scores = []
        for c in checkpoints:
            state = c.state if c.state is not None else load_checkpoint(c.path)
            model.params.load_state_dict(
                OrderedDict((k, v) for k, v in state.items() if not k.startswith("adam.")))
            scores.append(monitor_dice(model, val_set, target, threshold))
    else:
        scores = [c.val_dice for c in checkpoints]
    i = _best_index(scores)
    return checkpoints[i], checkpoints[i].epoch


def epochs_to_best(history: Sequence[HistoryRow]) -> int:
    """Epoch of the checkpoint ``select_checkpoint`` would pick."""
    if not history:
        raise ValueError("history is empty")
    rows = [r for r in history if not math.isnan(r.val_dice)]
    if not rows:
        return history[-1].epoch
    return rows[_best_index([r.val_dice for r in rows])].epoch


def load_into(model: UNetModel, state: Mapping[str, np.ndarray], prefix: str = "") -> list[str]:
    """Load model weights from a train/pretrain state, ignoring optimizer entries."""
    weights = OrderedDict((k, v) for k, v in state.items() if not k.startswith("adam."))
    return model.params.load_state_dict(weights, prefix=prefix, strict=not prefix)
