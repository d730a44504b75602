"""Modality scoring: one scalar importance score per modality and sample.

score = sigmoid(w . psi(GAP(F)) + b), where psi is a 1x1-conv bottleneck
(C -> C/r, relu, -> m). Scores are averaged over the batch and the modality
with the lowest mean is the drop candidate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import check_stage_features
from .errors import ShapeError
from .params import ModelParams
from .tensor import Tensor, conv2d, global_avg_pool, relu, sigmoid


_LOW = np.nextafter(0.0, 1.0)
_HIGH = np.nextafter(1.0, 0.0)


@dataclass
class AsmParams:
    psi1_weight: Tensor
    psi1_bias: Tensor
    psi2_weight: Tensor
    psi2_bias: Tensor
    w: Tensor  # [1, m, 1, 1]
    b: Tensor  # [1]

    @classmethod
    def from_model(cls, params: ModelParams, stage: int) -> "AsmParams":
        pre = f"asm.{stage}"
        return cls(
            params[f"{pre}.psi1.weight"],
            params[f"{pre}.psi1.bias"],
            params[f"{pre}.psi2.weight"],
            params[f"{pre}.psi2.bias"],
            params[f"{pre}.score.weight"],
            params[f"{pre}.score.bias"],
        )

    @property
    def channels(self) -> int:
        return self.psi1_weight.shape[1]

    @property
    def m(self) -> int:
        return self.w.shape[1]


@dataclass
class ScoreReport:
    names: list[str]
    per_sample_scores: np.ndarray  # [B, N]
    batch_means: np.ndarray  # [N]
    drop_index: int

    @property
    def drop_name(self) -> str:
        return self.names[self.drop_index]


def score_tensor(x: Tensor, params: AsmParams) -> Tensor:
    """Differentiable per-sample score of one modality, shape [B, 1, 1, 1]."""
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f"ASM expects {params.channels} channels, got feature shape {x.shape}")
    pooled = global_avg_pool(x)
    hidden = relu(conv2d(pooled, params.psi1_weight, params.psi1_bias))
    proj = conv2d(hidden, params.psi2_weight, params.psi2_bias)
    return sigmoid(conv2d(proj, params.w, params.b))


def score_modalities(features: Mapping[str, Tensor], params: AsmParams) -> ScoreReport:
    check_stage_features(features)
    names = list(features)
    cols = [score_tensor(features[n], params).data.reshape(-1) for n in names]
    scores = np.stack(cols, axis=1).astype(np.float64)
    # a saturated sigmoid rounds to 0 or 1; keep reported scores strictly inside (0, 1)
    scores = np.clip(scores, _LOW, _HIGH)
    means = scores.mean(axis=0)
    # np.argmin returns the first minimum: ties go to the lowest modality index
    return ScoreReport(names, scores, means, int(np.argmin(means)))


def rank_modalities(report: ScoreReport) -> list[int]:
    """Modality indices ordered by ascending batch mean (stable on ties)."""
    return [int(i) for i in np.argsort(report.batch_means, kind="stable")]


def lowest(report: ScoreReport, k: int) -> list[int]:
    return rank_modalities(report)[:k]


def ranking_names(report: ScoreReport) -> Sequence[str]:
    return [report.names[i] for i in rank_modalities(report)]
