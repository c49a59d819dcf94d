"""U-Net with residual encoder levels, built on the tensor primitives.

Level layout (encoder and decoder alike)::

    x -> conv3 -> relu -> bn -> conv3 -> relu -> bn --(+)--> out
    x -> conv1 -> bn -------------------------------'

Encoder levels are separated by 2x2 max pooling. Each decoder level is fed the
concatenation ``[skip, upsampled]`` where ``upsampled`` comes from a 2x2
stride-2 transposed convolution of the level below. A 1x1 convolution with a
sigmoid produces the probability map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    ModelParams, RngStream, ShapeError, Tensor, batchnorm, concat, conv2d,
    conv_transpose2d, he_init, maxpool2, relu, sigmoid, zeros_param,
)


@dataclass(frozen=True)
class UNetConfig:
    encoder_levels: int = 4
    base_filters: int = 16
    conv_skip_connections: bool = False
    decoder_widths: Optional[tuple] = None
    input_channels: int = 3

    def __post_init__(self):
        if self.encoder_levels < 2:
            raise ValueError("encoder_levels must be >= 2")
        if self.decoder_widths is not None:
            object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
            if len(self.decoder_widths) != self.encoder_levels - 1:
                raise ValueError(
                    f"decoder_widths needs {self.encoder_levels - 1} entries, got {len(self.decoder_widths)}")

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(self.encoder_levels)]

    @property
    def resolved_decoder_widths(self) -> list[int]:
        if self.decoder_widths is not None:
            return list(self.decoder_widths)
        return self.encoder_widths[-2::-1]

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder_levels - 1)


def _add_conv(params: ModelParams, name: str, cin: int, cout: int, k: int, rng: RngStream) -> None:
    params.add(name + ".w", he_init((cout, cin, k, k), cin * k * k, rng.child(len(params))))
    params.add(name + ".b", zeros_param((cout,)))


def _add_level(params: ModelParams, prefix: str, cin: int, cout: int, rng: RngStream) -> None:
    _add_conv(params, prefix + ".conv1", cin, cout, 3, rng)
    params.add_bn(prefix + ".bn1", cout)
    _add_conv(params, prefix + ".conv2", cout, cout, 3, rng)
    params.add_bn(prefix + ".bn2", cout)
    _add_conv(params, prefix + ".res", cin, cout, 1, rng)
    params.add_bn(prefix + ".res_bn", cout)


def build_encoder(config: UNetConfig, rng: RngStream) -> ModelParams:
    params = ModelParams()
    cin = config.input_channels
    for level, width in enumerate(config.encoder_widths):
        _add_level(params, f"encoder.{level}", cin, width, rng)
        cin = width
    return params


def build_decoder(config: UNetConfig, rng: RngStream) -> ModelParams:
    params = ModelParams()
    enc = config.encoder_widths
    cin = enc[-1]
    for d, width in enumerate(config.resolved_decoder_widths):
        skip_width = enc[-2 - d]
        prefix = f"decoder.{d}"
        params.add(prefix + ".up.w", he_init((cin, width, 2, 2), cin, rng.child(1000 + len(params))))
        params.add(prefix + ".up.b", zeros_param((width,)))
        if config.conv_skip_connections:
            _add_conv(params, prefix + ".skip", skip_width, skip_width, 3, rng.child(2000))
            params.add_bn(prefix + ".skip_bn", skip_width)
        _add_level(params, prefix, skip_width + width, width, rng.child(3000 + d))
        cin = width
    params.add("head.w", he_init((1, cin, 1, 1), cin, rng.child(4000)))
    params.add("head.b", zeros_param((1,)))
    return params


def _conv_block(params: ModelParams, conv: str, bn: str, x: Tensor, train: bool) -> Tensor:
    h = relu(conv2d(x, params[conv + ".w"], params[conv + ".b"]))
    return batchnorm(h, params.bn[bn], train)


def _level(params: ModelParams, prefix: str, x: Tensor, train: bool) -> Tensor:
    h = _conv_block(params, prefix + ".conv1", prefix + ".bn1", x, train)
    h = _conv_block(params, prefix + ".conv2", prefix + ".bn2", h, train)
    r = conv2d(x, params[prefix + ".res.w"], params[prefix + ".res.b"])
    r = batchnorm(r, params.bn[prefix + ".res_bn"], train)
    return h + r


def check_input(x, config: UNetConfig) -> None:
    shape = x.shape
    if len(shape) != 4:
        raise ShapeError(f"expected an N x C x H x W batch, got shape {shape}")
    if shape[1] != config.input_channels:
        raise ShapeError(f"axis 1 has {shape[1]} channels, model expects {config.input_channels}")
    d = config.divisor
    for axis, n in ((2, shape[2]), (3, shape[3])):
        if n % d:
            raise ShapeError(
                f"axis {axis} has size {n}, not divisible by {d}; pad or resize the input "
                f"to a multiple of {d}")


def encode(params: ModelParams, config: UNetConfig, x, train: bool) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns the deepest feature map and the skip activations."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    check_input(x, config)
    skips = []
    last = config.encoder_levels - 1
    for level in range(config.encoder_levels):
        x = _level(params, f"encoder.{level}", x, train)
        if level < last:
            skips.append(x)
            x = maxpool2(x)
    return x, skips


def decode(params: ModelParams, config: UNetConfig, x: Tensor, skips: Sequence[Tensor],
           train: bool) -> Tensor:
    for d in range(config.encoder_levels - 1):
        prefix = f"decoder.{d}"
        up = conv_transpose2d(x, params[prefix + ".up.w"], params[prefix + ".up.b"])
        skip = skips[-1 - d]
        if config.conv_skip_connections:
            skip = _conv_block(params, prefix + ".skip", prefix + ".skip_bn", skip, train)
        x = _level(params, prefix, concat([skip, up], axis=1), train)
    return sigmoid(conv2d(x, params["head.w"], params["head.b"]))


class UNetModel:
    """U-Net parameters plus config. ``forward`` returns N x 1 x H x W probabilities."""

    def __init__(self, config: UNetConfig, params: ModelParams):
        self.config = config
        self.params = params

    def forward(self, x, train: bool = False) -> Tensor:
        feats, skips = encode(self.params, self.config, x, train)
        return decode(self.params, self.config, feats, skips, train)

    __call__ = forward

    def encoder_features(self, x, train: bool = False) -> Tensor:
        return encode(self.params, self.config, x, train)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities as a plain array."""
        return self.forward(Tensor(np.asarray(x, np.float32)), train=False).data

    def parameter_count(self) -> int:
        return self.params.count()

    def encoder_params(self) -> ModelParams:
        return self.params.subset("encoder.")

    def clone(self) -> "UNetModel":
        return UNetModel(self.config, self.params.clone())


def build_unet(config: UNetConfig, rng: RngStream) -> UNetModel:
    params = build_encoder(config, rng.child(1))
    params.merge(build_decoder(config, rng.child(2)))
    return UNetModel(config, params)
