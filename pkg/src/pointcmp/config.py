"""Run configuration and its key-value text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .augment import count_for, segments_for
from .data import SyntheticSpec
from .encoder import EncoderConfig


class ConfigError(ValueError):
    pass


MASK_GRANULARITIES = ("segment", "token")
MASK_STRATEGIES = ("similarity", "random")
ERASE_STRATEGIES = ("similarity", "random", "off")


@dataclass
class RunConfig:
    # synthetic data
    num_classes: int = 3
    videos_per_class: int = 30
    raw_frames: int = 24
    raw_points: int = 512
    data_seed: int = 0
    train_fraction: float = 0.7
    # clips
    frames: int = 16
    stride: int = 1
    points_per_frame: int = 256
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    # encoder
    segments: int = 4
    tokens: int = 32
    channels: int = 128
    hidden: int = 64
    radius: float = 0.3
    k_ball: int = 9
    # augmentation
    dominant_fraction: float = 0.4
    mask_ratio: float = 0.25
    mask_granularity: str = "segment"
    mask_strategy: str = "similarity"
    erase_fraction: float = 0.2
    erase_strategy: str = "similarity"
    # branches
    local_branch: bool = True
    global_branch: bool = True
    matching_module: bool = True
    batch_negatives: str = "regressor"  # "regressor": other samples' positives; "tokens": their pooled grids
    heads: int = 4
    depth: int = 3
    proj_dim: int = 128
    tau_local: float = 0.01
    tau_global: float = 0.1
    # optimisation
    lr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    epochs: int = 30
    batch_size: int = 8
    max_steps: int = 0  # 0: no cap
    # evaluation
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    eval_views: int = 4
    # run
    seed: int = 0
    deterministic: bool = True

    @property
    def frames_per_segment(self) -> int:
        return self.frames // self.segments

    @property
    def num_masked_segments(self) -> int:
        return segments_for(self.mask_ratio, self.segments)

    @property
    def num_masked_tokens(self) -> int:
        if self.mask_granularity == "segment":
            return self.num_masked_segments * self.tokens
        return count_for(self.mask_ratio, self.segments * self.tokens)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.tokens, self.channels, self.hidden, self.radius, self.k_ball,
                             self.frames_per_segment)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_classes, self.videos_per_class, self.raw_frames, self.raw_points,
                             self.data_seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.frames > 0 and self.segments > 0, "frames and segments must be positive")
        need(self.frames % self.segments == 0, f"{self.segments} segments do not divide {self.frames} frames")
        need(self.tokens <= self.points_per_frame, "more tokens than points per frame")
        need(self.channels % self.heads == 0, "channels must be divisible by heads")
        for name in ("dominant_fraction", "mask_ratio", "erase_fraction", "train_fraction"):
            v = getattr(self, name)
            need(0 < v < 1, f"{name} must lie in (0, 1), got {v}")
        need(self.mask_granularity in MASK_GRANULARITIES, f"mask_granularity not in {MASK_GRANULARITIES}")
        need(self.mask_strategy in MASK_STRATEGIES, f"mask_strategy not in {MASK_STRATEGIES}")
        need(self.erase_strategy in ERASE_STRATEGIES, f"erase_strategy not in {ERASE_STRATEGIES}")
        need(self.batch_negatives in ("regressor", "tokens"), "batch_negatives must be 'regressor' or 'tokens'")
        need(self.local_branch or self.global_branch, "at least one branch must be enabled")
        if self.mask_granularity == "segment":
            need(1 <= self.num_masked_segments < self.segments,
                 f"mask_ratio {self.mask_ratio} masks {self.num_masked_segments} of {self.segments} segments")
        else:
            need(1 <= self.num_masked_tokens < self.segments * self.tokens, "token mask count out of range")
        need(self.num_masked_tokens >= 2 or not self.local_branch, "local loss needs >= 2 masked tokens")
        need(self.tau_local > 0 and self.tau_global > 0, "temperatures must be positive")
        need(self.scale_lo > 0 and self.scale_hi >= self.scale_lo, "bad scale range")
        need(self.batch_size >= 2 or self.erase_strategy != "off" or not self.global_branch,
             "global branch without hard negatives needs batch_size >= 2")
        need(self.lr > 0 and self.epochs >= 0 and self.warmup_epochs >= 0, "bad optimiser settings")
        return self

    # ---- key-value text form

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().with_strings(read_key_values(text))

    def with_strings(self, values: dict) -> "RunConfig":
        """Copy with fields overridden from string values (as read from files or flags)."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = parse_value(types[key], raw, key)
        return self.replace(**parsed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


def read_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def parse_value(type_name, raw, key="value"):
    if not isinstance(raw, str):
        return raw
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t}") from exc
