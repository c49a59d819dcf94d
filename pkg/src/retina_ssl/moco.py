"""Momentum-contrast pre-training of the U-Net encoder.

The query encoder (parameters ``theta_e``) and the momentum encoder
(``theta_m``) each carry their own copy of the projection head. Keys produced
by the momentum encoder are kept in a FIFO ring buffer and serve as negatives
for later batches.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import PretrainAugmentConfig, pretrain_view
from .data.checkpoint import save_checkpoint
from .tensor import (
    ModelParams, RngStream, ShapeError, Tensor, global_avg_pool, he_init, l2_normalize, linear,
    relu, zeros_param,
)
from .tensor.core import make_result
from .train import AdamState, ScheduleConfig, adam_step, cosine_lr
from .unet import UNetConfig, build_encoder, encode

HEAD_PREFIX = "proj."


def build_projection_head(in_dim: int, rng: RngStream, dim: int = 128) -> ModelParams:
    params = ModelParams()
    params.add(HEAD_PREFIX + "fc1.w", he_init((in_dim, dim), in_dim, rng.child(1)))
    params.add(HEAD_PREFIX + "fc1.b", zeros_param((dim,)))
    params.add(HEAD_PREFIX + "fc2.w", he_init((dim, dim), dim, rng.child(2)))
    params.add(HEAD_PREFIX + "fc2.b", zeros_param((dim,)))
    return params


def project(features: Tensor, params: ModelParams) -> Tensor:
    """GAP -> fc1 -> ReLU -> fc2 -> L2 normalisation."""
    w1 = params[HEAD_PREFIX + "fc1.w"]
    if features.ndim != 4 or features.shape[1] != w1.shape[0]:
        raise ShapeError(f"projection head expects N x {w1.shape[0]} x h x w features, got {features.shape}")
    v = global_avg_pool(features)
    v = relu(linear(v, w1, params[HEAD_PREFIX + "fc1.b"]))
    v = linear(v, params[HEAD_PREFIX + "fc2.w"], params[HEAD_PREFIX + "fc2.b"])
    return l2_normalize(v)


def info_nce(q: Tensor, k_pos: np.ndarray, queue: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE loss; the positive logit sits at index 0 of each row.

    Only ``q`` receives gradient. Logits are formed in float64.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    qd = q.data.astype(np.float64)
    k = np.asarray(k_pos, np.float64)
    negs = np.asarray(queue, np.float64).reshape(-1, qd.shape[1])
    if k.shape != qd.shape:
        raise ShapeError(f"info_nce: keys {k.shape} do not match queries {qd.shape}")
    n = qd.shape[0]
    logits = np.concatenate([np.sum(qd * k, axis=1, keepdims=True), qd @ negs.T], axis=1) / tau
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    total = e.sum(axis=1, keepdims=True)
    loss = np.mean(np.log(total[:, 0]) + zmax[:, 0] - logits[:, 0])

    def backward(g):
        d = e / total
        d[:, 0] -= 1.0
        d *= float(g) / (n * tau)
        dq = d[:, :1] * k + d[:, 1:] @ negs
        return (dq.astype(q.data.dtype),)

    return make_result(np.asarray(loss, np.float64), (q,), "info_nce", backward)


class KeyQueue:
    """Ring buffer of ``length`` unit-norm keys; the oldest entry is overwritten first."""

    def __init__(self, length: int, dim: int = 128):
        if length < 1:
            raise ValueError("queue length must be >= 1")
        self.length = length
        self.data = np.zeros((length, dim), np.float32)
        self.ptr = 0
        self.filled = 0

    def enqueue(self, keys: np.ndarray) -> "KeyQueue":
        keys = np.asarray(keys, np.float32)
        n = keys.shape[0]
        if n > self.length:
            raise ValueError(f"cannot enqueue {n} keys into a queue of length {self.length}")
        idx = (self.ptr + np.arange(n)) % self.length
        self.data[idx] = keys
        self.ptr = (self.ptr + n) % self.length
        self.filled = min(self.length, self.filled + n)
        return self

    def valid(self) -> np.ndarray:
        """Stored keys (storage order)."""
        return self.data[:self.filled]

    def contents(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.filled < self.length:
            return self.data[:self.filled].copy()
        return np.roll(self.data, -self.ptr, axis=0)

    def __len__(self) -> int:
        return self.filled


def enqueue(queue: KeyQueue, keys: np.ndarray) -> KeyQueue:
    return queue.enqueue(keys)


def momentum_update(theta_m: ModelParams, theta_e: ModelParams, alpha: float) -> ModelParams:
    """theta_m <- alpha * theta_m + (1 - alpha) * theta_e; BN running stats are copied."""
    if list(theta_m) != list(theta_e):
        raise KeyError("momentum and query parameter sets have different names")
    for name, pm in theta_m.items():
        pe = theta_e[name]
        if pm.shape != pe.shape:
            raise ShapeError(f"{name}: momentum shape {pm.shape} != query shape {pe.shape}")
    a = np.float32(alpha)
    b = np.float32(1.0 - alpha)
    for name, pm in theta_m.items():
        pm.data[...] = a * pm.data + b * theta_e[name].data
    for prefix, sm in theta_m.bn.items():
        se = theta_e.bn[prefix]
        sm.running_mean[...] = se.running_mean
        sm.running_var[...] = se.running_var
    return theta_m


@dataclass
class PretrainConfig:
    epochs: int = 600
    batch_size: int = 64
    queue_length: int = 4096
    tau: float = 0.07
    alpha: float = 0.999
    weight_decay: float = 1e-4
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: PretrainAugmentConfig = field(default_factory=PretrainAugmentConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    head_dim: int = 128
    include_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class MoCoState:
    theta_e: ModelParams
    theta_m: ModelParams
    queue: KeyQueue
    tau: float
    alpha: float
    unet: UNetConfig
    adam: AdamState = field(default_factory=AdamState)
    weight_decay: float = 1e-4

    @property
    def l_K(self) -> int:
        return self.queue.length

    @property
    def ptr(self) -> int:
        return self.queue.ptr


def init_state(cfg: PretrainConfig) -> MoCoState:
    rng = RngStream(cfg.seed, (0x3C0,))
    theta_e = build_encoder(cfg.unet, rng.child(1))
    theta_e.merge(build_projection_head(cfg.unet.feature_channels, rng.child(2), cfg.head_dim))
    theta_m = theta_e.clone(requires_grad=False)
    return MoCoState(theta_e, theta_m, KeyQueue(cfg.queue_length, cfg.head_dim), cfg.tau, cfg.alpha,
                     cfg.unet, weight_decay=cfg.weight_decay)


def embed(params: ModelParams, unet: UNetConfig, views: np.ndarray, train: bool = True) -> Tensor:
    feats, _ = encode(params, unet, Tensor(views), train)
    return project(feats, params)


def make_views(images: Sequence[np.ndarray], aug: PretrainAugmentConfig, rng: RngStream,
               which: int) -> np.ndarray:
    """N x 3 x crop x crop batch; view ``which`` of image i uses ``rng.child(i, which)``."""
    views = [pretrain_view(img, aug, rng.child(i, which)) for i, img in enumerate(images)]
    return np.stack(views).transpose(0, 3, 1, 2).copy()


def momentum_keys(state: MoCoState, views: np.ndarray) -> np.ndarray:
    return embed(state.theta_m, state.unet, views, train=True).data


def pretrain_step(state: MoCoState, images: Sequence[np.ndarray], rng: RngStream, lr: float,
                  aug: PretrainAugmentConfig | None = None) -> float:
    """One MoCo update on a batch of images; returns the loss."""
    if len(images) < 2:
        raise ValueError("pretrain_step needs a batch of at least 2 images")
    aug = aug or PretrainAugmentConfig()
    view_q = make_views(images, aug, rng, 0)
    view_k = make_views(images, aug, rng, 1)
    k = momentum_keys(state, view_k)
    state.theta_e.zero_grad()
    q = embed(state.theta_e, state.unet, view_q, train=True)
    loss = info_nce(q, k, state.queue.valid(), state.tau)
    loss.backward()
    adam_step(state.theta_e, state.adam, lr, state.weight_decay)
    momentum_update(state.theta_m, state.theta_e, state.alpha)
    state.queue.enqueue(k)
    return float(loss.item())


def prefill_queue(state: MoCoState, images: Sequence[np.ndarray], batch_size: int,
                  aug: PretrainAugmentConfig, rng: RngStream) -> None:
    """Fill the queue with momentum-encoder keys before any optimiser step."""
    order = rng.permutation(len(images))
    b = 0
    while state.queue.filled < state.queue.length:
        start = (b * batch_size) % len(images)
        idx = [order[(start + j) % len(images)] for j in range(batch_size)]
        n = min(batch_size, state.queue.length - state.queue.filled)
        views = make_views([images[i] for i in idx[:n]], aug, rng.child(b), 1)
        state.queue.enqueue(momentum_keys(state, views))
        b += 1


@dataclass
class PretrainResult:
    state: MoCoState
    history: list  # (epoch, step, loss, lr)
    checkpoint: Optional[Path] = None


def encoder_state(state: MoCoState, include_head: bool = False):
    sd = state.theta_e.state_dict("encoder.")
    if include_head:
        sd.update(state.theta_e.state_dict(HEAD_PREFIX))
    return sd


def write_loss_history(path, history) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "loss", "lr"])
        for epoch, step, loss, lr in history:
            w.writerow([epoch, step, repr(float(loss)), repr(float(lr))])
    return path


def pretrain(images: Sequence[np.ndarray], cfg: PretrainConfig, out_dir=None,
             progress: Callable[[int, int, float], None] | None = None) -> PretrainResult:
    """Pre-train on ``images`` (H x W x 3, uint8 or float in [0, 1], at least crop-sized).

    Each epoch walks a seeded shuffle in full batches (a trailing partial
    batch is dropped); the learning rate follows the per-epoch schedule.
    """
    if len(images) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} images, got {len(images)}")
    state = init_state(cfg)
    root = RngStream(cfg.seed, (0x3C1,))
    prefill_queue(state, images, cfg.batch_size, cfg.augment, root.child(0xF111))
    history = []
    step = 0
    steps_per_epoch = len(images) // cfg.batch_size
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.schedule)
        erng = root.child(epoch)
        order = erng.permutation(len(images))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss = pretrain_step(state, [images[i] for i in idx], erng.child(1, b), lr, cfg.augment)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            history.append((epoch, step, loss, lr))
            step += 1
        if progress is not None:
            progress(epoch, step, float(np.mean([h[2] for h in history[-steps_per_epoch:]])))
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_history(out_dir / "pretrain_loss.csv", history)
        ckpt = save_checkpoint(out_dir / "encoder.ntc", encoder_state(state, cfg.include_head), {
            "kind": "encoder", "epochs": cfg.epochs, "seed": cfg.seed,
            "includes_projection_head": cfg.include_head,
        })
    return PretrainResult(state, history, ckpt)


def epoch_means(history) -> list[float]:
    by_epoch: dict = {}
    for epoch, _, loss, _ in history:
        by_epoch.setdefault(epoch, []).append(loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
