"""Stage-wise encode -> score -> drop/compensate forward pass, evaluation, FLOPs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .asm import AsmParams, ScoreReport, lowest, score_modalities
from .data import ModalityBundle, SegDataset, iter_batches
from .encoder import EncoderConfig, encode_stage, segmentation_head
from .errors import ConfigError
from .mdm import SCOPES, MdmParams, aggregate, compensate, drop_without_compensation
from .metrics import MetricsReport, compute_miou
from .params import ModelParams
from .tensor import Tensor, no_grad, softmax_channel

STRATEGY_KINDS = ("score_drop", "random_drop", "naive_drop", "average_fusion")


@dataclass(frozen=True)
class FusionStrategy:
    kind: str = "score_drop"
    drops_per_stage: int = 1
    scope: str = "dropped"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.drops_per_stage < 0:
            raise ConfigError("drops_per_stage must be >= 0")
        if self.kind == "average_fusion" and self.drops_per_stage != 0:
            raise ConfigError("average_fusion implies drops_per_stage = 0")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")

    @classmethod
    def average(cls) -> "FusionStrategy":
        return cls("average_fusion", 0)

    def validate(self, n_modalities: int) -> None:
        if self.drops_per_stage > max(n_modalities - 1, 0) and n_modalities > 1:
            raise ConfigError(
                f"{self.drops_per_stage} drops per stage exceeds N-1 = {n_modalities - 1} for {n_modalities} modalities"
            )

    @property
    def label(self) -> str:
        return self.kind if self.kind == "average_fusion" else f"{self.kind}@{self.drops_per_stage}"


@dataclass
class StageTrace:
    stage: int
    active: list[str]
    report: ScoreReport | None = None
    dropped: list[str] = field(default_factory=list)


@dataclass
class ForwardTrace:
    stages: list[StageTrace] = field(default_factory=list)

    @property
    def dropped(self) -> list[str]:
        return [n for s in self.stages for n in s.dropped]

    @property
    def survivors(self) -> list[str]:
        last = self.stages[-1]
        return [n for n in last.active if n not in last.dropped]


def drops_at_stage(strategy: FusionStrategy, n_active: int) -> int:
    if strategy.kind == "average_fusion" or n_active <= 1:
        return 0
    return min(strategy.drops_per_stage, n_active - 1)


def forward(
    bundle: ModalityBundle,
    params: ModelParams,
    strategy: FusionStrategy,
    config: EncoderConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Return class logits [B, K, H, W] and the per-stage drop trace.

    Dropped branches stop being encoded. With one active modality the scoring
    and dropping machinery is bypassed entirely.
    """
    feats = bundle.active_features()
    if not feats:
        raise ConfigError("bundle has no active modality")
    strategy.validate(len(feats))
    _, _, H, W = next(iter(feats.values())).shape
    config.check_input(H, W)
    if strategy.kind == "random_drop" and rng is None:
        rng = np.random.default_rng(0)

    trace = ForwardTrace()
    for s in range(config.num_stages):
        feats = encode_stage(s, feats, params, config)
        entry = StageTrace(s, list(feats))
        k = drops_at_stage(strategy, len(feats))
        if k:
            if strategy.kind == "random_drop":
                idx = sorted(int(i) for i in rng.choice(len(feats), size=k, replace=False))
            else:
                with no_grad():
                    entry.report = score_modalities(feats, AsmParams.from_model(params, s))
                idx = lowest(entry.report, k)
            if strategy.kind == "naive_drop":
                outcome = drop_without_compensation(feats, idx)
            else:
                outcome = compensate(feats, idx, MdmParams.from_model(params, s), scope=strategy.scope)
            entry.dropped = outcome.dropped
            feats = outcome.surviving
        trace.stages.append(entry)
    logits = segmentation_head(aggregate(feats), params, (H, W))
    return logits, trace


def predict(logits: Tensor) -> np.ndarray:
    """Per-pixel argmax class (ties go to the lowest class id)."""
    return logits.data.argmax(axis=1).astype(np.uint8)


def run_predictions(
    params: ModelParams,
    dataset: SegDataset,
    strategy: FusionStrategy,
    config: EncoderConfig,
    modalities: Sequence[str] | None = None,
    batch_size: int = 8,
    seed: int = 0,
    return_probs: bool = False,
):
    """Predicted label maps [N, H, W] for the whole dataset (optionally softmax maps)."""
    mods = dataset.subset_names(modalities) if modalities is not None else dataset.modalities
    rng = np.random.default_rng(seed)
    preds, probs = [], []
    with no_grad():
        for bundle, _, _ in iter_batches(dataset, batch_size):
            logits, _ = forward(bundle.subset(mods), params, strategy, config, rng=rng)
            preds.append(predict(logits))
            if return_probs:
                probs.append(softmax_channel(logits).data)
    out = np.concatenate(preds) if preds else np.zeros((0, 0, 0), np.uint8)
    if return_probs:
        return out, (np.concatenate(probs) if probs else None)
    return out


def evaluate(
    params: ModelParams,
    dataset: SegDataset,
    strategy: FusionStrategy,
    config: EncoderConfig,
    modalities: Sequence[str] | None = None,
    batch_size: int = 8,
    seed: int = 0,
) -> MetricsReport:
    preds = run_predictions(params, dataset, strategy, config, modalities, batch_size, seed)
    return compute_miou(preds, dataset.labels(), dataset.num_classes)


def all_subsets(modalities: Sequence[str]) -> list[tuple[str, ...]]:
    """Non-empty subsets in binary-counting order (bit i selects modality i)."""
    mods = list(modalities)
    return [tuple(m for i, m in enumerate(mods) if mask >> i & 1) for mask in range(1, 2 ** len(mods))]


def evaluate_subsets(
    params: ModelParams,
    dataset: SegDataset,
    subsets: Sequence[Sequence[str]] | None,
    strategy: FusionStrategy,
    config: EncoderConfig,
    batch_size: int = 8,
    seed: int = 0,
) -> list[tuple[tuple[str, ...], MetricsReport]]:
    """One MetricsReport per modality subset (``None`` means every non-empty subset)."""
    if subsets is None:
        subsets = all_subsets(dataset.modalities)
    normalised = [dataset.subset_names(list(s)) for s in subsets]
    return [
        (sub, evaluate(params, dataset, strategy, config, sub, batch_size, seed)) for sub in normalised
    ]


# --------------------------------------------------------------------------- efficiency


def conv_param_count(c_in: int, c_out: int, k: int = 1, groups: int = 1, bias: bool = True) -> int:
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def conv_macs(c_in: int, c_out: int, h_out: int, w_out: int, k: int = 1, groups: int = 1, batch: int = 1) -> int:
    return batch * c_out * h_out * w_out * (c_in // groups) * k * k


def conv_flops(c_in: int, c_out: int, h_out: int, w_out: int, k: int = 1, groups: int = 1, batch: int = 1) -> int:
    """Two FLOPs per multiply-accumulate; bias adds and pointwise ops are not counted."""
    return 2 * conv_macs(c_in, c_out, h_out, w_out, k, groups, batch)


@dataclass
class EfficiencyReport:
    param_count: int
    flops: int
    per_stage_breakdown: list = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def count_efficiency(
    params: ModelParams,
    strategy: FusionStrategy,
    input_shape: Sequence[int],
    config: EncoderConfig,
    n_modalities: int,
) -> EfficiencyReport:
    """Analytic parameter and FLOP count for one forward pass.

    ``input_shape`` is the per-modality [B, C, H, W]. The branch count per
    stage follows the drop schedule; terminated branches cost nothing.
    """
    B, _, H, W = input_shape
    strategy.validate(n_modalities)
    config.check_input(H, W)
    n = n_modalities
    h, w = H, W
    breakdown = []
    total = 0
    for s, c_out in enumerate(config.channels_per_stage):
        c_in = config.stage_in_channels(s)
        h, w = h // config.stage_stride, w // config.stage_stride
        r = config.bottleneck(c_out)
        enc = n * (conv_flops(c_in, c_out, h, w, 3, batch=B) + conv_flops(c_out, c_out, h, w, 3, batch=B))
        k = drops_at_stage(strategy, n)
        asm = mdm = 0
        if k:
            if strategy.kind != "random_drop":
                asm = n * B * 2 * (c_out * r + r * r + r)
            if strategy.kind != "naive_drop":
                donors = n if strategy.scope == "all_others" else k
                gate = B * 2 * (c_out * r + r * c_out) + conv_flops(2, 1, h, w, 3, batch=B)
                mdm = donors * gate
        breakdown.append({"stage": s, "branches": n, "dropped": k, "encoder": enc, "asm": asm, "mdm": mdm})
        total += enc + asm + mdm
        n -= k
    head = conv_flops(config.channels_per_stage[-1], config.num_classes, h, w, 1, batch=B)
    breakdown.append({"stage": "head", "branches": 1, "dropped": 0, "encoder": 0, "asm": 0, "mdm": 0, "head": head})
    total += head
    return EfficiencyReport(params.count(), int(total), breakdown)


def subset_label(subset: Sequence[str]) -> str:
    return "+".join(subset)
