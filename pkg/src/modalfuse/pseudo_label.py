"""Pseudo-labels by majority vote over teacher predictions from modality subsets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import IGNORE_LABEL, ModalityBundle, SegDataset, iter_batches
from .encoder import EncoderConfig
from .errors import ConfigError
from .params import ModelParams
from .pipeline import FusionStrategy, all_subsets, forward, predict
from .tensor import no_grad


@dataclass(frozen=True)
class PseudoLabelConfig:
    combinations: tuple[tuple[str, ...], ...] | None = None  # None: every non-empty subset
    threshold: int = 2
    ignore_label: int = IGNORE_LABEL
    min_size: int = 1  # with combinations=None, skip subsets smaller than this

    def __post_init__(self):
        if self.threshold < 1:
            raise ConfigError("threshold T must be >= 1")
        if self.min_size < 1:
            raise ConfigError("min_size must be >= 1")
        if self.combinations is not None:
            object.__setattr__(self, "combinations", tuple(tuple(c) for c in self.combinations))

    def resolve(self, modalities: Sequence[str]) -> list[tuple[str, ...]]:
        if self.combinations is None:
            combos = [c for c in enumerate_combinations(modalities) if len(c) >= self.min_size]
            if not combos:
                raise ConfigError(f"no subset of {len(modalities)} modalities has >= {self.min_size} members")
        else:
            combos = enumerate_combinations(modalities, self.combinations)
        if self.threshold > len(combos):
            raise ConfigError(f"threshold T={self.threshold} exceeds {len(combos)} combinations")
        return combos


def enumerate_combinations(modalities: Sequence[str], policy="all_nonempty") -> list[tuple[str, ...]]:
    """``"all_nonempty"`` gives 2^M - 1 subsets in binary-counting order; a list is validated and normalised."""
    mods = list(modalities)
    if not mods:
        raise ConfigError("modality list is empty")
    if isinstance(policy, str):
        if policy != "all_nonempty":
            raise ConfigError(f"unknown combination policy {policy!r}")
        return all_subsets(mods)
    combos = []
    for combo in policy:
        combo = tuple(combo)
        if not combo:
            raise ConfigError("empty modality combination")
        unknown = [m for m in combo if m not in mods]
        if unknown:
            raise ConfigError(f"combination references unknown modality {unknown[0]!r}")
        combos.append(tuple(m for m in mods if m in combo))
    return combos


def vote_pixel(candidates: Sequence[int], threshold: int, ignore_label: int = IGNORE_LABEL) -> int:
    """Unique most frequent class if it occurs at least ``threshold`` times, else ``ignore_label``."""
    if not len(candidates):
        raise ConfigError("no candidate predictions")
    values, counts = np.unique(np.asarray(candidates), return_counts=True)
    top = counts.max()
    if top < threshold or (counts == top).sum() > 1:
        return ignore_label
    return int(values[counts.argmax()])


def vote_maps(predictions: np.ndarray, threshold: int, num_classes: int, ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Vectorised ``vote_pixel`` over a stack of label maps [N_combo, ...]."""
    preds = np.asarray(predictions)
    if preds.shape[0] == 0:
        raise ConfigError("no combination predictions to vote over")
    counts = np.stack([(preds == c).sum(axis=0) for c in range(num_classes)])
    top = counts.max(axis=0)
    unique = (counts == top).sum(axis=0) == 1
    winner = counts.argmax(axis=0)
    return np.where(unique & (top >= threshold), winner, ignore_label).astype(np.uint8)


def coverage(labels: np.ndarray, ignore_label: int = IGNORE_LABEL) -> float:
    labels = np.asarray(labels)
    return float((labels != ignore_label).mean()) if labels.size else 0.0


def combination_predictions(
    teacher: ModelParams,
    bundle: ModalityBundle,
    combos: Sequence[Sequence[str]],
    strategy: FusionStrategy,
    encoder: EncoderConfig,
    seed: int = 0,
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    with no_grad():
        return np.stack([predict(forward(bundle.subset(c), teacher, strategy, encoder, rng=rng)[0]) for c in combos])


def generate_pseudo_labels(
    teacher: ModelParams,
    bundle: ModalityBundle,
    config: PseudoLabelConfig,
    strategy: FusionStrategy,
    encoder: EncoderConfig,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Voted label maps [B, H, W] for one bundle, plus the labelled fraction."""
    combos = config.resolve(bundle.names)
    if not combos:
        raise ConfigError("empty combination list")
    preds = combination_predictions(teacher, bundle, combos, strategy, encoder, seed)
    labels = vote_maps(preds, config.threshold, encoder.num_classes, config.ignore_label)
    return labels, coverage(labels, config.ignore_label)


def pseudo_label_dataset(
    teacher: ModelParams,
    dataset: SegDataset,
    config: PseudoLabelConfig,
    strategy: FusionStrategy,
    encoder: EncoderConfig,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    out = []
    for bundle, _, _ in iter_batches(dataset, batch_size):
        labels, _ = generate_pseudo_labels(teacher, bundle, config, strategy, encoder, seed)
        out.append(labels)
    labels = np.concatenate(out)
    return labels, coverage(labels, config.ignore_label)
