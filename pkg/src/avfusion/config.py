"""Architecture and training configuration, presets, and config file IO.

Config files are JSON with a ``format``/``version`` header; see README for
the schema. CLI overrides use dotted keys (``model.depth=2``) applied after
file parsing, so precedence is CLI > file > preset defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_FORMAT = "avf-config"
CONFIG_VERSION = 1

STRATEGIES = ("vanilla-shared", "vanilla-cross", "bottleneck")
UPDATE_MODES = ("symmetric", "rgb-first", "spec-first")
MODALITIES = ("av", "rgb", "spec")
HEAD_MODES = ("single", "verb-noun")


@dataclass
class TokenizerConfig:
    """Input geometry shared by the synthetic data and the model."""

    frame_height: int = 32
    frame_width: int = 32
    frame_channels: int = 1
    frames_per_clip: int = 1        # F frames sampled per window
    frame_rate: float = 5.0
    rgb_patch: int = 8
    sample_rate: int = 4000
    window_s: float = 0.025
    hop_s: float = 0.010
    n_mels: int = 16
    spec_patch: int = 8
    span_s: float = 0.4             # sampled window length t
    # Fixed input normalization (x - mean) * scale applied per modality
    # before patch embedding.
    rgb_mean: float = 0.4
    rgb_scale: float = 4.0
    spec_mean: float = -1.5
    spec_scale: float = 0.7

    @property
    def rgb_patch_dim(self) -> int:
        return self.rgb_patch * self.rgb_patch * self.frame_channels

    @property
    def spec_patch_dim(self) -> int:
        return self.spec_patch * self.spec_patch

    def spectrogram_frames(self, n_samples: int) -> int:
        hop = int(round(self.hop_s * self.sample_rate))
        return -(-n_samples // hop)

    def rgb_token_count(self) -> int:
        gh = self.frame_height // self.rgb_patch
        gw = self.frame_width // self.rgb_patch
        return self.frames_per_clip * gh * gw

    def spec_token_count(self) -> int:
        width = self.spectrogram_frames(int(round(self.span_s * self.sample_rate)))
        return (self.n_mels // self.spec_patch) * (width // self.spec_patch)


@dataclass
class ModelConfig:
    depth: int = 4                  # L transformer layers
    heads: int = 4                  # N_H attention heads
    dim: int = 64                   # token width d
    mlp_dim: int = 128
    bottleneck_tokens: int = 4      # B latent fusion tokens
    fusion_layer: int = 2           # L_f; 0 = early, depth = late
    strategy: str = "bottleneck"
    update_mode: str = "symmetric"
    share_weights: bool = False
    num_classes: int = 4
    head_mode: str = "single"
    verb_classes: int = 0
    noun_classes: int = 0
    modality: str = "av"            # "rgb"/"spec" give unimodal baselines
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)

    def validate(self) -> None:
        if not 0 <= self.fusion_layer <= self.depth:
            raise ValueError(f"fusion_layer {self.fusion_layer} outside [0, {self.depth}]")
        if self.bottleneck_tokens < 0:
            raise ValueError("bottleneck_tokens must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "vanilla-shared" and not self.share_weights:
            raise ValueError("vanilla-shared strategy requires share_weights=true")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_mode == "verb-noun" and (self.verb_classes < 1 or self.noun_classes < 1):
            raise ValueError("verb-noun head needs verb_classes and noun_classes")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    epochs: int = 20
    warmup_epochs: float = 1.0
    batch_size: int = 16
    momentum: float = 0.9
    mixup_alpha: float = 0.0        # 0 disables mixup
    mixup_mode: str = "standard"    # or "modality"
    stochastic_depth: float = 0.0
    max_time_mask: int = 0          # SpecAugment extents; 0 disables
    max_freq_mask: int = 0
    visual_augment: bool = False
    sampling: str = "sync"          # or "async"
    test_crops: int = 1
    eval_every: int = 0             # 0 = final epoch only
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.stochastic_depth < 1.0:
            raise ValueError("stochastic_depth must be in [0, 1)")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs exceeds epochs")
        if self.mixup_mode not in ("standard", "modality"):
            raise ValueError(f"unknown mixup_mode {self.mixup_mode!r}")
        if self.sampling not in ("sync", "async"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


@dataclass
class RunConfig:
    """Everything one run needs; what presets and config files describe."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: str = "pair-sum"
    classes: int = 4
    train_samples: int = 4000
    test_samples: int = 1000
    noise: float = 0.05

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()


def tiny_preset() -> RunConfig:
    """Smallest config that exercises every mechanism; used by tests."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        depth=2,
        heads=2,
        dim=8,
        mlp_dim=16,
        bottleneck_tokens=2,
        fusion_layer=1,
        num_classes=3,
        tokenizer=TokenizerConfig(
            frame_height=8,
            frame_width=8,
            frame_channels=1,
            frames_per_clip=1,
            frame_rate=5.0,
            rgb_patch=4,
            sample_rate=2000,
            n_mels=8,
            spec_patch=4,
            span_s=0.2,
        ),
    )
    cfg.train = TrainConfig(epochs=2, warmup_epochs=0.5, batch_size=4, seed=0)
    cfg.classes = 3
    cfg.train_samples = 24
    cfg.test_samples = 12
    return cfg


def desk_preset() -> RunConfig:
    """CPU-minutes scale; the acceptance configuration."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Full-scale geometry; used for shape laws and cost accounting only."""
    cfg = RunConfig()
    cfg.model = ModelConfig(
        depth=12,
        heads=12,
        dim=768,
        mlp_dim=3072,
        bottleneck_tokens=4,
        fusion_layer=8,
        num_classes=527,
        tokenizer=TokenizerConfig(
            frame_height=224,
            frame_width=224,
            frame_channels=3,
            frames_per_clip=8,
            frame_rate=25.0,
            rgb_patch=16,
            sample_rate=16000,
            n_mels=128,
            spec_patch=16,
            span_s=8.0,
        ),
    )
    cfg.train = TrainConfig(
        base_lr=0.5,
        epochs=50,
        warmup_epochs=2.5,
        batch_size=64,
        mixup_alpha=0.3,
        stochastic_depth=0.3,
        max_time_mask=192,
        max_freq_mask=48,
        visual_augment=True,
        test_crops=4,
    )
    cfg.classes = 527
    return cfg


PRESETS = {
    "tiny": tiny_preset,
    "desk": desk_preset,
    "paper": paper_preset,
}


def get_preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# (De)serialization.

def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    return {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, **d}


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    data = dict(data)
    fmt = data.pop("format", CONFIG_FORMAT)
    version = data.pop("version", CONFIG_VERSION)
    if fmt != CONFIG_FORMAT or int(version) != CONFIG_VERSION:
        raise ValueError(f"unsupported config header: {fmt} v{version}")
    model_d = dict(data.pop("model", {}))
    tok_d = dict(model_d.pop("tokenizer", {}))
    train_d = dict(data.pop("train", {}))
    cfg = RunConfig(
        model=ModelConfig(tokenizer=TokenizerConfig(**tok_d), **model_d),
        train=TrainConfig(**train_d),
        **data,
    )
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def load_config(path: str | Path) -> RunConfig:
    data = json.loads(Path(path).read_text())
    # A run manifest embeds the resolved config under "config".
    if "config" in data and "subcommand" in data:
        data = data["config"]
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply dotted-key overrides like ``model.depth=2`` with type coercion."""
    data = config_to_dict(cfg)
    for key, raw in overrides.items():
        node: Any = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise KeyError(f"unknown config key {key!r}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = _coerce(raw, node[leaf])
    return config_from_dict(data)


def _coerce(raw: str, previous: Any) -> Any:
    if isinstance(previous, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(previous, int):
        return int(raw)
    if isinstance(previous, float):
        return float(raw)
    return raw
