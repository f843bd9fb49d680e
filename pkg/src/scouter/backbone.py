"""Small conv-BN-ReLU feature extractor and the fully connected baseline head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Params, init_linear, linear, uniform_param
from .tensor import Tensor, batch_norm, conv2d, default_dtype, mean, relu

Buffers = Dict[str, np.ndarray]


@dataclass
class BackboneConfig:
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    strides: List[int] = field(default_factory=lambda: [2, 2, 1])
    kernel_size: int = 3
    bn_momentum: float = 0.1
    blocks_per_stage: int = 2

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.stage_channels = [int(v) for v in self.stage_channels]
        self.strides = [int(v) for v in self.strides]
        self.validate()

    @property
    def c(self) -> int:
        return self.stage_channels[-1]

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def stage_sizes(self) -> List[Tuple[int, int]]:
        _, h, w = self.input_shape
        sizes = []
        for s in self.strides:
            h = (h + 2 * self.padding - self.kernel_size) // s + 1
            w = (w + 2 * self.padding - self.kernel_size) // s + 1
            sizes.append((h, w))
        return sizes

    def layers(self) -> List[Tuple[int, int]]:
        """``(out_channels, stride)`` per conv layer; only a stage's first block strides."""
        return [(c, s if j == 0 else 1) for c, s in zip(self.stage_channels, self.strides)
                for j in range(self.blocks_per_stage)]

    @property
    def output_hw(self) -> Tuple[int, int]:
        return self.stage_sizes()[-1]

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if len(self.strides) != len(self.stage_channels) or min(self.strides) < 1:
            raise ConfigError("strides must give one positive stride per stage")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        h, w = self.input_shape[1:]
        for s in self.strides:
            if self.kernel_size > h + 2 * self.padding or self.kernel_size > w + 2 * self.padding:
                raise ConfigError("kernel larger than padded stage input")
            h = (h + 2 * self.padding - self.kernel_size) // s + 1
            w = (w + 2 * self.padding - self.kernel_size) // s + 1
        if h * w < 4 or h < 1 or w < 1:
            raise ConfigError(f"final feature map {h}x{w} has fewer than 4 positions")


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> Tuple[Params, Buffers]:
    params: Params = {}
    buffers: Buffers = {}
    c_in = config.input_shape[0]
    k = config.kernel_size
    for i, (c_out, _) in enumerate(config.layers()):
        fan_in = c_in * k * k
        # He-uniform keeps activations in range through the ReLU stack
        params[f"backbone.{i}.conv"] = uniform_param(rng, (c_out, c_in, k, k), np.sqrt(6.0 / fan_in))
        params[f"backbone.{i}.bn.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
        params[f"backbone.{i}.bn.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
        buffers[f"backbone.{i}.bn.mean"] = np.zeros(c_out, dtype=default_dtype())
        buffers[f"backbone.{i}.bn.var"] = np.ones(c_out, dtype=default_dtype())
        c_in = c_out
    return params, buffers


def backbone_forward(
    images: Tensor, config: BackboneConfig, params: Params, buffers: Buffers, training: bool
) -> Tensor:
    """Feature map ``F`` (b x c x h x w, non-negative) for a batch of standardized images."""
    if images.ndim != 4 or tuple(images.shape[1:]) != config.input_shape:
        raise DimensionError(f"images of shape {images.shape} do not match configured input {config.input_shape}")
    x = images
    for i, (_, stride) in enumerate(config.layers()):
        x = conv2d(x, params[f"backbone.{i}.conv"], stride=stride, padding=config.padding)
        x = batch_norm(
            x,
            params[f"backbone.{i}.bn.gamma"],
            params[f"backbone.{i}.bn.beta"],
            buffers[f"backbone.{i}.bn.mean"],
            buffers[f"backbone.{i}.bn.var"],
            training=training,
            momentum=config.bn_momentum,
        )
        x = relu(x)
    return x


def init_fc_head(c: int, n: int, rng: np.random.Generator) -> Params:
    w, b = init_linear(rng, c, n)
    return {"fc.weight": w, "fc.bias": b}


def fc_head_forward(features: Tensor, params: Params) -> Tensor:
    """Global-average-pool ``F`` then apply ``g_l(v) = w_l . v + b_l`` for every class."""
    if features.ndim != 4:
        raise DimensionError(f"fc head expects b x c x h x w features, got {features.shape}")
    pooled = mean(features, axes=(2, 3))
    if pooled.shape[1] != params["fc.weight"].shape[0]:
        raise DimensionError(f"fc head expects {params['fc.weight'].shape[0]} channels, got {pooled.shape[1]}")
    return linear(pooled, params["fc.weight"], params["fc.bias"])
