"""Shared-weight convolutional encoder, segmentation head and parameter init.

Each stage is ``conv3x3(stride) -> relu -> conv3x3 -> relu``; the same stage
weights are applied to every modality. The head is a 1x1 convolution followed
by bilinear upsampling to the label resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ModelParams
from .tensor import Tensor, bilinear_upsample, conv2d, relu

StageFeatures = dict  # modality name -> Tensor [B, C, H, W], all of one shape


@dataclass(frozen=True)
class EncoderConfig:
    num_classes: int
    num_stages: int = 4
    channels_per_stage: tuple[int, ...] = (8, 16, 24, 32)
    stage_stride: int = 2
    input_channels: int = 3
    reduction: int = 4
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        if len(self.channels_per_stage) != self.num_stages:
            raise ConfigError(
                f"channels_per_stage has {len(self.channels_per_stage)} entries, num_stages={self.num_stages}"
            )
        if self.num_stages < 1 or self.stage_stride < 1 or self.num_classes < 1 or self.input_channels < 1:
            raise ConfigError("num_stages, stage_stride, num_classes and input_channels must be positive")
        if any(c < 1 for c in self.channels_per_stage):
            raise ConfigError("every stage needs at least one channel")

    def check_input(self, height: int, width: int) -> None:
        div = self.stage_stride**self.num_stages
        if height % div or width % div:
            raise ShapeError(f"input {height}x{width} not divisible by stride^stages = {div}")

    def stage_in_channels(self, i: int) -> int:
        return self.input_channels if i == 0 else self.channels_per_stage[i - 1]

    def bottleneck(self, c: int) -> int:
        return max(1, c // self.reduction)


def _he(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))


def init_params(config: EncoderConfig, seed: int = 0, dtype=None) -> ModelParams:
    """He-normal weights, zero biases, for encoder, ASM, MDM and head."""
    rng = np.random.default_rng(seed)
    p = ModelParams()
    s = config.init_scale
    for i, c_out in enumerate(config.channels_per_stage):
        c_in = config.stage_in_channels(i)
        p.add(f"enc.{i}.conv1.weight", _he(rng, (c_out, c_in, 3, 3), s), dtype)
        p.add(f"enc.{i}.conv1.bias", np.zeros(c_out), dtype)
        p.add(f"enc.{i}.conv2.weight", _he(rng, (c_out, c_out, 3, 3), s), dtype)
        p.add(f"enc.{i}.conv2.bias", np.zeros(c_out), dtype)
    for i, c in enumerate(config.channels_per_stage):
        r = config.bottleneck(c)
        m = r
        p.add(f"asm.{i}.psi1.weight", _he(rng, (r, c, 1, 1), s), dtype)
        p.add(f"asm.{i}.psi1.bias", np.zeros(r), dtype)
        p.add(f"asm.{i}.psi2.weight", _he(rng, (m, r, 1, 1), s), dtype)
        p.add(f"asm.{i}.psi2.bias", np.zeros(m), dtype)
        p.add(f"asm.{i}.score.weight", _he(rng, (1, m, 1, 1), s), dtype)
        p.add(f"asm.{i}.score.bias", np.zeros(1), dtype)
    for i, c in enumerate(config.channels_per_stage):
        r = config.bottleneck(c)
        p.add(f"mdm.{i}.chan1.weight", _he(rng, (r, c, 1, 1), s), dtype)
        p.add(f"mdm.{i}.chan1.bias", np.zeros(r), dtype)
        p.add(f"mdm.{i}.chan2.weight", _he(rng, (c, r, 1, 1), s), dtype)
        p.add(f"mdm.{i}.chan2.bias", np.zeros(c), dtype)
        p.add(f"mdm.{i}.spatial.weight", _he(rng, (1, 2, 3, 3), s), dtype)
        p.add(f"mdm.{i}.spatial.bias", np.zeros(1), dtype)
    c_last = config.channels_per_stage[-1]
    p.add("head.weight", _he(rng, (config.num_classes, c_last, 1, 1), s), dtype)
    p.add("head.bias", np.zeros(config.num_classes), dtype)
    return p


def check_params(params: ModelParams, config: EncoderConfig) -> None:
    """Raise ShapeError unless ``params`` has exactly the layout ``config`` implies."""
    expected = init_params(config, seed=0)
    if params.names() != expected.names():
        missing = sorted(set(expected.names()) - set(params.names()))
        extra = sorted(set(params.names()) - set(expected.names()))
        raise ShapeError(f"parameter names differ from config (missing={missing[:3]}, extra={extra[:3]})")
    for name in expected:
        if params[name].shape != expected[name].shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, config implies {expected[name].shape}")


def check_stage_features(features: Mapping[str, Tensor]) -> tuple[int, int, int, int]:
    if not features:
        raise ShapeError("no modality features")
    shapes = {name: t.shape for name, t in features.items()}
    first = next(iter(shapes.values()))
    for name, shp in shapes.items():
        if len(shp) != 4 or shp != first:
            raise ShapeError(f"modality {name!r} has shape {shp}, expected {first}")
    return first


def encode_one(x: Tensor, stage_index: int, params: ModelParams, config: EncoderConfig) -> Tensor:
    pre = f"enc.{stage_index}"
    h = relu(conv2d(x, params[f"{pre}.conv1.weight"], params[f"{pre}.conv1.bias"], stride=config.stage_stride, padding=1))
    return relu(conv2d(h, params[f"{pre}.conv2.weight"], params[f"{pre}.conv2.bias"], stride=1, padding=1))


def encode_stage(
    stage_index: int, features: Mapping[str, Tensor], params: ModelParams, config: EncoderConfig
) -> StageFeatures:
    """Run one encoder stage on every modality with the same weights."""
    if not 0 <= stage_index < config.num_stages:
        raise ShapeError(f"stage_index {stage_index} outside [0, {config.num_stages})")
    B, C, H, W = check_stage_features(features)
    if C != config.stage_in_channels(stage_index):
        raise ShapeError(f"stage {stage_index} expects {config.stage_in_channels(stage_index)} channels, got {C}")
    if H % config.stage_stride or W % config.stage_stride:
        raise ShapeError(f"{H}x{W} not divisible by stride {config.stage_stride}")
    return {name: encode_one(x, stage_index, params, config) for name, x in features.items()}


def segmentation_head(fused: Tensor, params: ModelParams, target_hw: tuple[int, int]) -> Tensor:
    """1x1 conv to class logits, then bilinear upsampling to ``target_hw``."""
    _, _, h, w = fused.shape
    th, tw = target_hw
    if h == 0 or w == 0 or th % h or tw % w or th // h != tw // w:
        raise ShapeError(f"target {target_hw} is not one integer multiple of feature extent {(h, w)}")
    logits = conv2d(fused, params["head.weight"], params["head.bias"])
    return bilinear_upsample(logits, th // h)
