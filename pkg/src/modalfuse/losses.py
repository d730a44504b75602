"""Adaptation losses over the labelled pixel set (pseudo-label != 255)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import IGNORE_LABEL
from .errors import DataError, NumericError, ShapeError
from .tensor import (
    Tensor,
    add,
    log,
    mul,
    select_channel,
    softmax_channel,
    sub,
    sum_channels,
    tensor_sum,
)

PROB_FLOOR = 1e-12
NORM_TOL = 1e-4


@dataclass
class LossOutputs:
    l_adapt: Tensor
    l_kl: Tensor
    l_total: Tensor
    omega_size: int

    @property
    def empty(self) -> bool:
        return self.omega_size == 0


def _labels(pseudo, probs_shape) -> np.ndarray:
    lab = np.asarray(pseudo)
    if lab.ndim == 2:
        lab = lab[None]
    B, C, H, W = probs_shape
    if lab.shape != (B, H, W):
        raise ShapeError(f"label batch {lab.shape} does not match probabilities {probs_shape}")
    bad = (lab != IGNORE_LABEL) & ((lab < 0) | (lab >= C))
    if bad.any():
        raise DataError(f"label id {int(lab[bad].max())} outside [0, {C}) and not {IGNORE_LABEL}")
    return lab.astype(np.int64)


def _check_normalised(p: np.ndarray, what: str) -> None:
    if p.ndim != 4:
        raise ShapeError(f"{what}: expected [B, C, H, W] probabilities, got {p.shape}")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > NORM_TOL:
        raise NumericError(f"{what}: probabilities are not normalised over channels")


def omega_mask(pseudo) -> np.ndarray:
    return np.asarray(pseudo) != IGNORE_LABEL


def adapt_loss(student_probs: Tensor, pseudo) -> Tensor:
    """Mean negative log-probability of the pseudo-label over labelled pixels.

    Returns a constant 0 when no pixel is labelled; check ``omega_mask`` to tell
    that case apart from a perfect prediction.
    """
    _check_normalised(student_probs.data, "adapt_loss")
    lab = _labels(pseudo, student_probs.shape)
    mask = lab != IGNORE_LABEL
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0, dtype=student_probs.dtype)
    picked = select_channel(student_probs, np.where(mask, lab, 0))
    logp = log(picked, floor=PROB_FLOOR)
    masked = mul(logp, Tensor(mask[:, None], dtype=student_probs.dtype))
    return mul(tensor_sum(masked), -1.0 / n)


def kl_loss(teacher_probs, student_probs: Tensor, pseudo) -> Tensor:
    """Mean over labelled pixels of KL(teacher || student); the teacher is a constant."""
    t = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if t.shape != student_probs.shape:
        raise ShapeError(f"teacher {t.shape} and student {student_probs.shape} shapes differ")
    _check_normalised(t, "kl_loss teacher")
    _check_normalised(student_probs.data, "kl_loss student")
    lab = _labels(pseudo, student_probs.shape)
    mask = lab != IGNORE_LABEL
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0, dtype=student_probs.dtype)
    dt = student_probs.dtype
    t = t.astype(dt)
    neg_entropy = (t * np.log(np.maximum(t, PROB_FLOOR))).sum(axis=1, keepdims=True)
    cross = sum_channels(mul(Tensor(t, dtype=dt), log(student_probs, floor=PROB_FLOOR)))
    per_pixel = sub(Tensor(neg_entropy, dtype=dt), cross)
    masked = mul(per_pixel, Tensor(mask[:, None], dtype=dt))
    return mul(tensor_sum(masked), 1.0 / n)


def total_loss(teacher_probs, student_probs: Tensor, pseudo) -> LossOutputs:
    l_adapt = adapt_loss(student_probs, pseudo)
    l_kl = kl_loss(teacher_probs, student_probs, pseudo)
    return LossOutputs(l_adapt, l_kl, add(l_adapt, l_kl), int(omega_mask(pseudo).sum()))


def pixel_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Supervised loss: mean cross-entropy over pixels whose label is not 255."""
    return adapt_loss(softmax_channel(logits), labels)
