"""Teacher-student adaptation on unlabelled target data.

The teacher is frozen. Every ``refresh_interval`` epochs it labels the target
set by subset voting; the student then minimises cross-entropy to those labels
plus KL(teacher || student), both over labelled pixels only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SegDataset, hflip, stack_batch
from .encoder import EncoderConfig
from .errors import ConfigError, CoverageError, NumericError
from .losses import total_loss
from .params import ModelParams
from .pipeline import FusionStrategy, all_subsets, evaluate, forward, run_predictions
from .pseudo_label import PseudoLabelConfig, pseudo_label_dataset
from .tensor import GradTape, backward, softmax_channel
from .training import AdamW, TrainConfig, grads_by_name, poly_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    pseudo: PseudoLabelConfig = PseudoLabelConfig()
    train: TrainConfig = TrainConfig()
    refresh_interval: int = 1
    random_subsets: bool = False

    def __post_init__(self):
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss_adapt: float
    loss_kl: float
    coverage: float
    target_miou: float | None = None


@dataclass
class AdaptResult:
    student: ModelParams
    history: list = field(default_factory=list)

    @property
    def miou_curve(self) -> list:
        return [r.target_miou for r in self.history]


def teacher_targets(
    teacher: ModelParams,
    dataset: SegDataset,
    config: AdaptConfig,
    strategy: FusionStrategy,
    encoder: EncoderConfig,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Voted pseudo-labels, full-modality teacher probabilities, coverage."""
    bs = config.train.batch_size
    labels, cov = pseudo_label_dataset(teacher, dataset, config.pseudo, strategy, encoder, bs, config.train.seed)
    _, probs = run_predictions(teacher, dataset, strategy, encoder, None, bs, config.train.seed, return_probs=True)
    return labels, probs, cov


def adapt(
    teacher: ModelParams,
    student_init: ModelParams,
    target: SegDataset,
    config: AdaptConfig,
    strategy: FusionStrategy,
    encoder: EncoderConfig,
    eval_dataset: SegDataset | None = None,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> AdaptResult:
    """Adapt a copy of ``student_init``; ``teacher`` is never modified.

    Target labels are never read for training; ``eval_dataset`` (if given) is
    only used to record a per-epoch target mIoU.
    """
    if len(target) == 0:
        raise ConfigError("target dataset is empty")
    tc = config.train
    frozen = teacher.frozen()
    student = student_init.copy()
    opt = AdamW(student, tc)
    rng = np.random.default_rng(tc.seed)
    drop_rng = np.random.default_rng([tc.seed, 1])
    subsets = all_subsets(target.modalities)
    steps_per_epoch = -(-len(target) // tc.batch_size)
    total = steps_per_epoch * tc.epochs
    result = AdaptResult(student)
    labels = probs = None
    cov = 0.0
    step = 0
    for epoch in range(tc.epochs):
        if epoch % config.refresh_interval == 0 or labels is None:
            labels, probs, cov = teacher_targets(frozen, target, config, strategy, encoder)
        if cov == 0.0:
            raise CoverageError(f"epoch {epoch}: no pixel reached T={config.pseudo.threshold} agreeing votes")
        order = rng.permutation(len(target))
        la, lk = [], []
        for start in range(0, len(order), tc.batch_size):
            chunk = [int(i) for i in order[start : start + tc.batch_size]]
            samples, pl, tp = [], [], []
            for i in chunk:
                s, y, p = target[i], labels[i], probs[i]
                if tc.flip and rng.random() < 0.5:
                    s, y, p = hflip(s), y[:, ::-1], p[:, :, ::-1]
                samples.append(s)
                pl.append(y)
                tp.append(p)
            pl, tp = np.stack(pl), np.stack(tp)
            if not (pl != config.pseudo.ignore_label).any():
                step += 1
                continue
            bundle, _ = stack_batch(samples, target.modalities)
            if config.random_subsets:
                bundle = bundle.subset(subsets[int(rng.integers(len(subsets)))])
            tape = GradTape()
            with tape:
                logits, _ = forward(bundle, student, strategy, encoder, rng=drop_rng)
                out = total_loss(tp, softmax_channel(logits), pl)
            value = out.l_total.item()
            if not np.isfinite(value):
                raise NumericError(f"adaptation loss not finite at step {step}", step=step)
            opt.step(grads_by_name(student, backward(tape, out.l_total)), poly_lr(step, total, tc))
            la.append(out.l_adapt.item())
            lk.append(out.l_kl.item())
            step += 1
        record = EpochRecord(epoch, float(np.mean(la)) if la else 0.0, float(np.mean(lk)) if lk else 0.0, cov)
        if eval_dataset is not None:
            record.target_miou = evaluate(student, eval_dataset, strategy, encoder, batch_size=tc.batch_size, seed=tc.seed).miou
        result.history.append(record)
        log.debug("adapt epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record, student)
    return result
