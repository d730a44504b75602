"""Modality dropping with attention-gated compensation.

Every surviving branch i absorbs the dropped branches j through

    f_i' = f_i + 0.5 * sum_j Wc_j * f_j + 0.5 * sum_j Ws_j * f_j

where Wc_j is a squeeze-excitation channel gate [B, C, 1, 1] and Ws_j a
spatial gate [B, 1, H, W], both computed from f_j itself. With
``scope="all_others"`` the sum runs over every other modality instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .encoder import check_stage_features
from .errors import ConfigError, ShapeError
from .params import ModelParams
from .tensor import (
    Tensor,
    add,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    global_avg_pool,
    mul,
    relu,
    sigmoid,
)

SCOPES = ("dropped", "all_others")


@dataclass
class MdmParams:
    chan1_weight: Tensor
    chan1_bias: Tensor
    chan2_weight: Tensor
    chan2_bias: Tensor
    spatial_weight: Tensor  # [1, 2, 3, 3]
    spatial_bias: Tensor  # [1]

    @classmethod
    def from_model(cls, params: ModelParams, stage: int) -> "MdmParams":
        pre = f"mdm.{stage}"
        return cls(
            params[f"{pre}.chan1.weight"],
            params[f"{pre}.chan1.bias"],
            params[f"{pre}.chan2.weight"],
            params[f"{pre}.chan2.bias"],
            params[f"{pre}.spatial.weight"],
            params[f"{pre}.spatial.bias"],
        )


@dataclass
class FusionOutcome:
    surviving: dict  # name -> Tensor
    dropped: list[str] = field(default_factory=list)
    dropped_indices: list[int] = field(default_factory=list)


def channel_weights(f: Tensor, params: MdmParams) -> Tensor:
    if f.ndim != 4 or f.shape[1] != params.chan1_weight.shape[1]:
        raise ShapeError(f"channel gate expects {params.chan1_weight.shape[1]} channels, got {f.shape}")
    h = relu(conv2d(global_avg_pool(f), params.chan1_weight, params.chan1_bias))
    return sigmoid(conv2d(h, params.chan2_weight, params.chan2_bias))


def spatial_weights(f: Tensor, params: MdmParams) -> Tensor:
    if f.ndim != 4:
        raise ShapeError(f"spatial gate expects a [B, C, H, W] tensor, got {f.shape}")
    squeezed = concat_channels([channel_mean(f), channel_max(f)])
    return sigmoid(conv2d(squeezed, params.spatial_weight, params.spatial_bias, padding=1))


def gated_contribution(f: Tensor, params: MdmParams) -> Tensor:
    """0.5 * Wc * f + 0.5 * Ws * f for one donor branch."""
    wc = channel_weights(f, params)
    ws = spatial_weights(f, params)
    return add(mul(mul(wc, 0.5), f), mul(mul(ws, 0.5), f))


def compensate(
    features: Mapping[str, Tensor],
    drop_set: Iterable,
    params: MdmParams,
    scope: str = "dropped",
) -> FusionOutcome:
    """Remove ``drop_set`` (names or indices) and fold it into the survivors."""
    check_stage_features(features)
    if scope not in SCOPES:
        raise ConfigError(f"compensation scope must be one of {SCOPES}, got {scope!r}")
    names = list(features)
    dropped = []
    for d in drop_set:
        name = names[d] if isinstance(d, int) else d
        if name not in features:
            raise ConfigError(f"unknown modality {d!r} in drop set")
        if name not in dropped:
            dropped.append(name)
    if not dropped:
        raise ConfigError("drop set is empty")
    survivors = [n for n in names if n not in dropped]
    if not survivors:
        raise ConfigError("drop set covers every modality; nothing survives")

    donors = names if scope == "all_others" else dropped
    contrib = {j: gated_contribution(features[j], params) for j in donors}
    out = {}
    for i in survivors:
        acc = features[i]
        for j in donors:
            if j != i:
                acc = add(acc, contrib[j])
        out[i] = acc
    return FusionOutcome(out, dropped, [names.index(n) for n in dropped])


def drop_without_compensation(features: Mapping[str, Tensor], drop_set: Iterable) -> FusionOutcome:
    names = list(features)
    dropped = [names[d] if isinstance(d, int) else d for d in drop_set]
    survivors = {n: t for n, t in features.items() if n not in dropped}
    if not survivors:
        raise ConfigError("drop set covers every modality; nothing survives")
    return FusionOutcome(survivors, dropped, [names.index(n) for n in dropped])


def aggregate(outcome) -> Tensor:
    """Element-wise mean of the surviving branches."""
    surviving = outcome.surviving if isinstance(outcome, FusionOutcome) else outcome
    tensors = list(surviving.values())
    if not tensors:
        raise ConfigError("no surviving modality to aggregate")
    if len(tensors) == 1:
        return tensors[0]
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return mul(acc, 1.0 / len(tensors))
