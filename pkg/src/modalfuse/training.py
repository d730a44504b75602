"""Poly learning-rate schedule, AdamW and the supervised source-domain loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SegDataset, augment, stack_batch
from .encoder import EncoderConfig, init_params
from .errors import ConfigError, NumericError
from .losses import pixel_cross_entropy
from .params import ModelParams
from .pipeline import FusionStrategy, forward
from .tensor import GradTape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 6e-5
    poly_power: float = 0.9
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    epochs: int = 200
    batch_size: int = 2
    eps: float = 1e-8
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    flip: bool = True
    crop: tuple[int, int] | None = None

    def __post_init__(self):
        if self.base_lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("base_lr and weight_decay must be >= 0, eps > 0")
        if self.poly_power <= 0 or self.warmup_factor <= 0:
            raise ConfigError("poly_power and warmup_factor must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return int(round(total_steps * config.warmup_epochs / config.epochs))


def poly_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Constant ``base_lr * warmup_factor`` during warm-up, then poly decay to 0."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, config)
    if step < w:
        return config.base_lr * config.warmup_factor
    span = total_steps - w
    if span <= 0:
        return config.base_lr
    return config.base_lr * (1.0 - (step - w) / span) ** config.poly_power


class AdamW:
    """Adam with decoupled weight decay, state keyed by parameter name."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        if lr == 0.0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, t in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * t.data
            t.data = (t.data - lr * update).astype(t.dtype)


def grads_by_name(params: ModelParams, grads: dict) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in params.items() if t in grads}


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list = field(default_factory=list)
    steps: int = 0


def train_supervised(
    dataset: SegDataset,
    config: TrainConfig,
    strategy: FusionStrategy,
    encoder: EncoderConfig,
    params: ModelParams | None = None,
    modalities=None,
    on_epoch: Callable[[int, float, ModelParams], None] | None = None,
) -> TrainResult:
    """Train on labelled source data with mean pixel cross-entropy.

    Deterministic for a fixed ``config.seed``. Raises NumericError carrying the
    failing step index if the loss becomes non-finite.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    mods = dataset.subset_names(modalities) if modalities is not None else dataset.modalities
    params = params if params is not None else init_params(encoder, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    opt = AdamW(params, config)
    steps_per_epoch = -(-len(dataset) // config.batch_size)
    total = steps_per_epoch * config.epochs
    result = TrainResult(params)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch = [augment(dataset[int(i)], rng, config.flip, config.crop) for i in chunk]
            bundle, labels = stack_batch(batch, mods)
            tape = GradTape()
            try:
                with tape:
                    logits, _ = forward(bundle, params, strategy, encoder, rng=drop_rng)
                    loss = pixel_cross_entropy(logits, labels)
            except NumericError as exc:
                raise NumericError(f"non-finite value at step {step}: {exc}", step=step) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"loss is not finite at step {step}", step=step)
            if loss.requires_grad:
                opt.step(grads_by_name(params, backward(tape, loss)), poly_lr(step, total, config))
            losses.append(value)
            step += 1
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        log.debug("epoch %d loss %.5f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, params)
    result.steps = step
    if not params.all_finite():
        raise NumericError("parameters became non-finite", step=step)
    return result
