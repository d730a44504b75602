"""In-memory samples, datasets, batching and the two train-time augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

IGNORE_LABEL = 255


@dataclass
class SampleRecord:
    modalities: dict  # name -> float32 array [3, H, W]
    label: np.ndarray  # uint8 [H, W]

    def copy(self) -> "SampleRecord":
        return SampleRecord({k: v.copy() for k, v in self.modalities.items()}, self.label.copy())

    @property
    def hw(self) -> tuple[int, int]:
        return self.label.shape


@dataclass
class SegDataset:
    modalities: tuple[str, ...]
    num_classes: int
    samples: list = field(default_factory=list)

    def __post_init__(self):
        self.modalities = tuple(self.modalities)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> SampleRecord:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def validate(self) -> None:
        for n, s in enumerate(self.samples):
            if tuple(s.modalities) != self.modalities:
                raise DataError(f"sample {n}: modalities {tuple(s.modalities)} != {self.modalities}")
            bad = (s.label != IGNORE_LABEL) & (s.label >= self.num_classes)
            if bad.any():
                raise DataError(f"sample {n}: class id {int(s.label[bad].max())} >= num_classes")

    def subset_names(self, names: Sequence[str]) -> tuple[str, ...]:
        """Normalise a modality subset to dataset order."""
        unknown = [n for n in names if n not in self.modalities]
        if unknown:
            raise ConfigError(f"unknown modality {unknown[0]!r}; available: {', '.join(self.modalities)}")
        if not names:
            raise ConfigError("modality subset is empty")
        return tuple(m for m in self.modalities if m in set(names))

    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples])


@dataclass
class ModalityBundle:
    """Ordered named modality tensors plus an active mask."""

    names: tuple[str, ...]
    tensors: dict
    active: tuple[bool, ...]

    @classmethod
    def from_arrays(cls, arrays: dict, active: Sequence[str] | None = None, dtype=None) -> "ModalityBundle":
        names = tuple(arrays)
        tensors = {n: a if isinstance(a, Tensor) else Tensor(a, dtype=dtype) for n, a in arrays.items()}
        act = tuple(True for _ in names) if active is None else tuple(n in set(active) for n in names)
        return cls(names, tensors, act)

    def subset(self, names: Sequence[str]) -> "ModalityBundle":
        unknown = [n for n in names if n not in self.names]
        if unknown:
            raise ConfigError(f"unknown modality {unknown[0]!r}")
        return ModalityBundle(self.names, self.tensors, tuple(n in set(names) for n in self.names))

    def active_names(self) -> list[str]:
        return [n for n, a in zip(self.names, self.active) if a]

    def active_features(self) -> dict:
        return {n: self.tensors[n] for n in self.active_names()}

    def __len__(self) -> int:
        return sum(self.active)


def stack_batch(samples: Sequence[SampleRecord], modalities: Sequence[str], dtype=None) -> tuple[ModalityBundle, np.ndarray]:
    if not samples:
        raise ShapeError("empty batch")
    arrays = {m: np.stack([s.modalities[m] for s in samples]) for m in modalities}
    labels = np.stack([s.label for s in samples])
    return ModalityBundle.from_arrays(arrays, dtype=dtype), labels


def iter_batches(
    dataset: SegDataset,
    batch_size: int,
    order: Sequence[int] | None = None,
    modalities: Sequence[str] | None = None,
    dtype=None,
) -> Iterator[tuple[ModalityBundle, np.ndarray, list[int]]]:
    idx = list(range(len(dataset))) if order is None else list(order)
    mods = tuple(modalities) if modalities is not None else dataset.modalities
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        bundle, labels = stack_batch([dataset[i] for i in chunk], mods, dtype=dtype)
        yield bundle, labels, chunk


def hflip(sample: SampleRecord) -> SampleRecord:
    return SampleRecord(
        {k: np.ascontiguousarray(v[:, :, ::-1]) for k, v in sample.modalities.items()},
        np.ascontiguousarray(sample.label[:, ::-1]),
    )


def random_crop(sample: SampleRecord, size: tuple[int, int], rng: np.random.Generator) -> SampleRecord:
    h, w = sample.hw
    ch, cw = size
    if ch > h or cw > w:
        raise ShapeError(f"crop {size} larger than sample {(h, w)}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return SampleRecord(
        {k: v[:, top : top + ch, left : left + cw].copy() for k, v in sample.modalities.items()},
        sample.label[top : top + ch, left : left + cw].copy(),
    )


def augment(
    sample: SampleRecord,
    rng: np.random.Generator,
    flip: bool = True,
    crop: tuple[int, int] | None = None,
) -> SampleRecord:
    """Horizontal flip with probability 1/2, then an optional random crop."""
    out = sample
    if flip and rng.random() < 0.5:
        out = hflip(out)
    if crop is not None:
        out = random_crop(out, crop, rng)
    return out
