"""Flat ``key = value`` run configuration for the command-line harness.

Lines are ``key = value``; ``#`` starts a comment. Every key is typed and
documented in ``KEYS``; anything else is rejected. Keys naming input paths
are only required by the commands that read them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .encoder import EncoderConfig
from .errors import ConfigError
from .pipeline import FusionStrategy
from .pseudo_label import PseudoLabelConfig
from .synth import DomainShift, SceneSpec
from .training import TrainConfig
from .uda import AdaptConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _names(text: str) -> tuple[str, ...]:
    out = tuple(p.strip() for p in text.split(",") if p.strip())
    if not out:
        raise ValueError("empty list")
    return out


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _names(text))


def _optional_str(text: str) -> str | None:
    return None if text.lower() in ("", "none") else text


def _crop(text: str) -> tuple[int, int] | None:
    if text.lower() in ("", "none"):
        return None
    h, w = text.lower().split("x")
    return int(h), int(w)


def _subsets(text: str) -> tuple[tuple[str, ...], ...] | None:
    """``all``, ``full`` or ``;``-separated groups of ``+``-joined modality names."""
    if text.strip().lower() == "all":
        return None
    if text.strip().lower() == "full":
        return ()
    groups = tuple(tuple(m.strip() for m in g.split("+") if m.strip()) for g in text.split(";") if g.strip())
    if not groups or any(not g for g in groups):
        raise ValueError("expected 'all' or groups like rgb+depth;rgb")
    return groups


def _shifts(text: str) -> tuple[DomainShift, ...] | None:
    """``default`` or ``;``-separated ``gain,bias,noise`` triples, one per modality."""
    if text.strip().lower() == "default":
        return None
    out = []
    for group in text.split(";"):
        vals = [float(v) for v in group.split(",")]
        if len(vals) != 3:
            raise ValueError("each shift needs gain,bias,noise")
        out.append(DomainShift(*vals))
    return tuple(out)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    shown: str | None = None  # default as written in a config file, when _show cannot render it


KEYS: dict[str, Key] = {
    # run
    "seed": Key(int, 0, "seed for data, initialisation, shuffling and random drops"),
    "out": Key(str, "out", "output directory (overridden by --out)"),
    # scene
    "height": Key(int, 32, "scene height"),
    "width": Key(int, 32, "scene width"),
    "num_classes": Key(int, 4, "number of classes including background"),
    "modalities": Key(_names, ("rgb", "depth", "event", "lidar"), "comma list of modality names"),
    "min_shapes": Key(int, 2, "fewest shapes per scene"),
    "max_shapes": Key(int, 4, "most shapes per scene"),
    "min_size": Key(int, 8, "smallest shape extent"),
    "max_size": Key(int, 16, "largest shape extent"),
    "noise_sigma": Key(float, 0.3, "source rendering noise"),
    "target_shift": Key(_shifts, None, "'default' or gain,bias,noise;... per modality", "default"),
    "train_count": Key(int, 64, "gen-data: samples per training split"),
    "test_count": Key(int, 32, "gen-data: samples per test split"),
    # encoder
    "num_stages": Key(int, 4, "encoder stages"),
    "channels": Key(_ints, (8, 16, 24, 32), "comma list of channels per stage"),
    "stage_stride": Key(int, 2, "stride of each stage's first convolution"),
    "reduction": Key(int, 4, "channel reduction inside ASM and MDM"),
    # strategy
    "strategy": Key(str, "score_drop", "score_drop | random_drop | naive_drop | average_fusion"),
    "drops_per_stage": Key(int, 1, "modalities dropped per stage"),
    "compensation_scope": Key(str, "dropped", "compensation sources: dropped | all_others"),
    # training
    "base_lr": Key(float, 6e-5, "peak learning rate"),
    "poly_power": Key(float, 0.9, "poly decay exponent"),
    "warmup_epochs": Key(int, 10, "epochs at base_lr * warmup_factor"),
    "warmup_factor": Key(float, 0.1, "warm-up learning-rate multiplier"),
    "epochs": Key(int, 200, "training or adaptation epochs"),
    "batch_size": Key(int, 2, "samples per step"),
    "eps": Key(float, 1e-8, "AdamW epsilon"),
    "weight_decay": Key(float, 1e-2, "AdamW decoupled weight decay"),
    "beta1": Key(float, 0.9, "AdamW first-moment decay"),
    "beta2": Key(float, 0.999, "AdamW second-moment decay"),
    "flip": Key(_bool, True, "random horizontal flips"),
    "crop": Key(_crop, None, "random crop HxW or none"),
    # pseudo-labels and adaptation
    "combinations": Key(_subsets, None, "voting subsets: all or rgb+depth;rgb;...", "all"),
    "min_combination_size": Key(int, 1, "with combinations=all, skip subsets smaller than this"),
    "threshold": Key(int, 2, "minimum agreeing votes T"),
    "ignore_label": Key(int, 255, "label for unvoted pixels"),
    "refresh_interval": Key(int, 1, "epochs between pseudo-label regeneration"),
    "random_subsets": Key(_bool, False, "train the student on random modality subsets"),
    # evaluation and efficiency
    "subsets": Key(_subsets, (), "eval/vote subsets: full, all or rgb+depth;rgb", "full"),
    "flops_compare": Key(_bool, True, "flops: also report average_fusion"),
    "flops_batch": Key(int, 1, "flops: batch extent of the counted input"),
    "score_stage": Key(int, 0, "score: stage whose ASM scores the stored features"),
    # inputs
    "train_data": Key(_optional_str, None, "labelled dataset directory for train"),
    "eval_data": Key(_optional_str, None, "labelled dataset directory for eval, vote and adapt curves"),
    "target_data": Key(_optional_str, None, "unlabelled target dataset directory for adapt"),
    "checkpoint": Key(_optional_str, None, "model checkpoint for eval, vote, score"),
    "teacher": Key(_optional_str, None, "teacher checkpoint for adapt"),
    "student_init": Key(_optional_str, None, "student start checkpoint for adapt (default: teacher)"),
    "features": Key(_optional_str, None, "score: directory of <modality>.egt feature tensors"),
}

COMMAND_INPUTS = {
    "gen-data": (),
    "train": ("train_data",),
    "eval": ("checkpoint", "eval_data"),
    "adapt": ("teacher", "target_data"),
    "vote": ("checkpoint", "eval_data"),
    "flops": (),
    "score": ("checkpoint", "features"),
}


class RunConfig:
    """Parsed configuration: typed values plus the canonical text used for run ids."""

    def __init__(self, values: dict[str, Any], explicit: dict[str, str]):
        self.values = values
        self.explicit = explicit

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def canonical(self) -> str:
        """Sorted explicit keys; the output directory is excluded so reruns elsewhere share an id."""
        return "".join(f"{k}={self.explicit[k]}\n" for k in sorted(self.explicit) if k != "out")

    def run_id(self, command: str) -> str:
        return hashlib.sha256(f"{command}\n{self.canonical()}".encode()).hexdigest()[:12]

    def require(self, command: str) -> None:
        if command not in COMMAND_INPUTS:
            raise ConfigError(f"unknown command {command!r}")
        for key in COMMAND_INPUTS[command]:
            if self.values[key] is None:
                raise ConfigError(f"missing required key {key!r} for command {command}")

    def with_overrides(self, **raw: str) -> "RunConfig":
        text = dict(self.explicit)
        text.update({k: v for k, v in raw.items() if v is not None})
        return parse_pairs(text)

    # typed views

    def scene(self) -> SceneSpec:
        v = self.values
        return SceneSpec(
            height=v["height"], width=v["width"], num_classes=v["num_classes"], modalities=v["modalities"],
            min_shapes=v["min_shapes"], max_shapes=v["max_shapes"], min_size=v["min_size"],
            max_size=v["max_size"], noise_sigma=v["noise_sigma"], target_shift=v["target_shift"], seed=v["seed"],
        )

    def encoder(self, num_classes: int | None = None) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            num_classes=num_classes if num_classes is not None else v["num_classes"],
            num_stages=v["num_stages"], channels_per_stage=v["channels"],
            stage_stride=v["stage_stride"], reduction=v["reduction"],
        )

    def strategy(self) -> FusionStrategy:
        v = self.values
        drops = 0 if v["strategy"] == "average_fusion" else v["drops_per_stage"]
        return FusionStrategy(v["strategy"], drops, v["compensation_scope"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            base_lr=v["base_lr"], poly_power=v["poly_power"], warmup_epochs=v["warmup_epochs"],
            warmup_factor=v["warmup_factor"], epochs=v["epochs"], batch_size=v["batch_size"], eps=v["eps"],
            weight_decay=v["weight_decay"], beta1=v["beta1"], beta2=v["beta2"], seed=v["seed"],
            flip=v["flip"], crop=v["crop"],
        )

    def pseudo(self) -> PseudoLabelConfig:
        v = self.values
        return PseudoLabelConfig(v["combinations"], v["threshold"], v["ignore_label"], v["min_combination_size"])

    def adapt(self) -> AdaptConfig:
        v = self.values
        return AdaptConfig(self.pseudo(), self.train(), v["refresh_interval"], v["random_subsets"])


def parse_pairs(raw: dict[str, str]) -> RunConfig:
    values = {k: spec.default for k, spec in KEYS.items()}
    for key, text in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = KEYS[key].parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc
    return RunConfig(values, dict(raw))


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    try:
        return parse_pairs(raw)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def documented_template() -> str:
    """Every key with its default and description, as a commented config file."""
    lines = []
    for key, spec in KEYS.items():
        lines.append(f"# {spec.doc}")
        shown = spec.shown if spec.shown is not None else _show(spec.default)
        lines.append(f"# {key} = {shown}")
    return "\n".join(lines) + "\n"


def _show(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)
