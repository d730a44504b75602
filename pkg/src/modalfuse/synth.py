"""Synthetic multimodal scenes with complementary per-modality cues.

A scene is a class map painted with rectangles and discs on a background of
class 0. Each modality renders only a subset of the classes distinctly (its
"cue" classes); every other class maps to the same neutral code. No single
modality can therefore separate all classes, while the union can.

The target domain reuses the layout process but perturbs each modality's
gain, bias and noise level (by default only the last modality is degraded).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import SampleRecord, SegDataset
from .errors import ConfigError

DEFAULT_MODALITIES = ("rgb", "depth", "event", "lidar")
DOMAINS = {"source": 0, "target": 1}

# fixed 3-vectors used as class codes; rows are reused cyclically
_CODES = np.array(
    [
        [1.0, -1.0, 0.5],
        [-0.8, 0.9, 1.0],
        [0.9, 0.7, -1.0],
        [-1.0, -0.6, -0.7],
    ]
)


@dataclass(frozen=True)
class DomainShift:
    gain: float = 1.0
    bias: float = 0.0
    noise: float = 0.0  # added to the source noise sigma


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    modalities: tuple[str, ...] = DEFAULT_MODALITIES
    min_shapes: int = 2
    max_shapes: int = 4
    min_size: int = 8
    max_size: int = 16
    noise_sigma: float = 0.3
    cue_classes: tuple[tuple[int, ...], ...] | None = None
    target_shift: tuple[DomainShift, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes (background plus one shape class)")
        if self.num_classes > 255:
            raise ConfigError("labels are stored as bytes with 255 reserved: at most 255 classes")
        if not self.modalities:
            raise ConfigError("need at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modality names must be unique")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigError("shape sizes must satisfy 1 <= min_size <= max_size")
        if self.max_size > min(self.height, self.width):
            raise ConfigError(f"max_size {self.max_size} exceeds grid {self.height}x{self.width}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("shape counts must satisfy 0 <= min_shapes <= max_shapes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.cue_classes is not None:
            if len(self.cue_classes) != len(self.modalities):
                raise ConfigError("cue_classes needs one entry per modality")
            for cues in self.cue_classes:
                if any(not 0 <= c < self.num_classes for c in cues):
                    raise ConfigError(f"cue class outside [0, {self.num_classes})")
        if self.target_shift is not None and len(self.target_shift) != len(self.modalities):
            raise ConfigError("target_shift needs one entry per modality")

    def cues(self) -> tuple[tuple[int, ...], ...]:
        """Classes each modality renders distinctly.

        Default: shape classes 1..K-1 are dealt round-robin to the modalities;
        a modality left without one gets the background class as its cue.
        """
        if self.cue_classes is not None:
            return tuple(tuple(c) for c in self.cue_classes)
        m = len(self.modalities)
        out = [[] for _ in range(m)]
        for j, cls in enumerate(range(1, self.num_classes)):
            out[j % m].append(cls)
        return tuple(tuple(c) if c else (0,) for c in out)

    def shifts(self) -> tuple[DomainShift, ...]:
        if self.target_shift is not None:
            return self.target_shift
        return default_target_shift(len(self.modalities))


def default_target_shift(n: int) -> tuple[DomainShift, ...]:
    """Leave every modality but the last untouched; the last one gets an offset and extra noise.

    This mimics one degraded sensor. Subsets without it still see clean
    inputs, so their votes can overrule the full model where it is misled.
    """
    clean = DomainShift()
    return tuple(clean for _ in range(n - 1)) + (DomainShift(gain=1.0, bias=0.5, noise=0.7),)


def layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    label = np.zeros((H, W), dtype=np.uint8)
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        top = int(rng.integers(0, H - size + 1))
        left = int(rng.integers(0, W - size + 1))
        if rng.random() < 0.5:
            label[top : top + size, left : left + size] = cls
        else:
            r = size / 2.0
            cy, cx = top + r - 0.5, left + r - 0.5
            label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    return label


def render(label: np.ndarray, cues: Sequence[int], rng: np.random.Generator, gain: float, bias: float, sigma: float) -> np.ndarray:
    codes = np.zeros((256, 3))
    for j, cls in enumerate(cues):
        codes[cls] = _CODES[(cls + j) % len(_CODES)]
    clean = codes[label].transpose(2, 0, 1)  # [3, H, W]
    noise = rng.standard_normal(clean.shape) * sigma
    return (gain * clean + bias + noise).astype(np.float32)


def make_sample(spec: SceneSpec, domain: str, index: int) -> SampleRecord:
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {tuple(DOMAINS)}, got {domain!r}")
    rng = np.random.default_rng([spec.seed, DOMAINS[domain], index])
    label = layout(spec, rng)
    cues = spec.cues()
    shifts = spec.shifts()
    mods = {}
    for k, name in enumerate(spec.modalities):
        if domain == "target":
            sh = shifts[k]
            gain, bias, sigma = sh.gain, sh.bias, spec.noise_sigma + sh.noise
        else:
            gain, bias, sigma = 1.0, 0.0, spec.noise_sigma
        mods[name] = render(label, cues[k], rng, gain, bias, sigma)
    return SampleRecord(mods, label)


def generate(spec: SceneSpec, count: int, domain: str = "source", start: int = 0) -> SegDataset:
    """``count`` samples; sample i depends only on (seed, domain, start + i)."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    samples = [make_sample(spec, domain, start + i) for i in range(count)]
    return SegDataset(spec.modalities, spec.num_classes, samples)


DEGRADE_MODES = ("missing", "noise", "blackout")


def degrade(sample: SampleRecord, modality: str, mode: str, sigma: float = 0.0, seed: int = 0) -> SampleRecord:
    if modality not in sample.modalities:
        raise ConfigError(f"unknown modality {modality!r}")
    if mode not in DEGRADE_MODES:
        raise ConfigError(f"degrade mode must be one of {DEGRADE_MODES}, got {mode!r}")
    out = sample.copy()
    if mode == "missing":
        del out.modalities[modality]
    elif mode == "blackout":
        out.modalities[modality] = np.zeros_like(out.modalities[modality])
    elif sigma:
        rng = np.random.default_rng(seed)
        x = out.modalities[modality]
        out.modalities[modality] = (x + rng.standard_normal(x.shape) * sigma).astype(x.dtype)
    return out


def degrade_dataset(dataset: SegDataset, modality: str, mode: str, sigma: float = 0.0, seed: int = 0) -> SegDataset:
    samples = [degrade(s, modality, mode, sigma, seed + i) for i, s in enumerate(dataset)]
    mods = tuple(m for m in dataset.modalities if not (mode == "missing" and m == modality))
    return SegDataset(mods, dataset.num_classes, samples)


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)


__all__ = [
    "SceneSpec",
    "DomainShift",
    "generate",
    "degrade",
    "degrade_dataset",
    "make_sample",
    "layout",
    "with_seed",
    "DEFAULT_MODALITIES",
]
