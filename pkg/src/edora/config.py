"""Flat ``key = value`` run configuration shared by every CLI command.

Each :class:`RunConfig` field is also a ``--flag`` (underscores or dashes);
flags override file values, which override the defaults below.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .adapters import AdapterSpec, AdapterSpecError
from .model import ADAPTER_TARGETS, ConfigError, ModelConfig
from .train import OptimConfig

METHODS = ("full", "lora", "dora", "edora", "none")
SPLITS = ("stratified", "ordered")
OUT_ENV = "EDORA_OUT"


@dataclass
class RunConfig:
    # output
    out: str = ""
    seed: int = 0
    # data: explicit paths (EDTS file or manifest), otherwise synthesized
    source: str = ""
    target: str = ""
    synth_classes: int = 3
    synth_channels: int = 8
    synth_trials: int = 100
    synth_rate: float = 250.0
    synth_window: float = 4.0
    synth_shift: float = 0.5
    synth_amplitude: float = 1.0
    synth_seed: int = 0
    band_low: float = 4.0
    band_high: float = 40.0
    band_order: int = 4
    split: str = "stratified"
    holdout_fraction: float = 0.2
    # backbone
    temporal_kernel: int = 25
    embed_dim: int = 40
    encoder_layers: int = 3
    heads: int = 4
    ffn_dim: int = 0
    pool_kernel: int = 30
    pool_stride: int = 15
    head_hidden: int = 256
    # adaptation
    method: str = "edora"
    rank: int = 4
    segments: int = 2
    norm_mode: str = "weight"
    targets: str = ",".join(ADAPTER_TARGETS)
    fresh: str = "auto"
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 72
    pretrain_epochs: int = 2000
    pretrain_lr: float = 0.0
    finetune_epochs: int = 500
    finetune_lr: float = 0.0
    # artifacts
    pretrained: str = ""
    checkpoint: str = ""
    data: str = ""
    # ablation grid
    ranks: str = "2,4"
    segment_list: str = "1,2"
    seeds: str = "0,1"

    # ------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if not 0 < self.band_low < self.band_high < self.synth_rate / 2 and not (self.source or self.target):
            raise ConfigError(f"band {self.band_low}-{self.band_high} Hz must lie below Nyquist")
        for name in ("synth_classes", "synth_channels", "synth_trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        unknown = set(self.target_list()) - set(ADAPTER_TARGETS)
        if unknown:
            raise ConfigError(f"unknown adapter targets {sorted(unknown)}")
        self.model_config(self.synth_channels, self.samples(), self.synth_classes)
        self.optim("pretrain")
        self.optim("finetune")
        if self.method in ("lora", "dora", "edora"):
            self.adapter_spec()
        self.int_list("ranks")
        self.int_list("segment_list")
        self.int_list("seeds")
        return self

    def model_config(self, channels: int, samples: int, classes: int) -> ModelConfig:
        return ModelConfig(channels=channels, samples=samples, classes=classes,
                           temporal_kernel=self.temporal_kernel, embed_dim=self.embed_dim,
                           encoder_layers=self.encoder_layers, heads=self.heads,
                           ffn_dim=self.ffn_dim or None, pool_kernel=self.pool_kernel,
                           pool_stride=self.pool_stride, head_hidden=self.head_hidden)

    def samples(self) -> int:
        return int(round(self.synth_rate * self.synth_window))

    def adapter_spec(self) -> AdapterSpec | None:
        if self.method in ("full", "none"):
            return None
        n = self.segments if self.method == "edora" else 1
        try:
            return AdapterSpec(self.method, self.rank, n, self.norm_mode)
        except AdapterSpecError as err:
            raise ConfigError(str(err)) from err

    def optim(self, phase: str, seed: int | None = None) -> OptimConfig:
        epochs = self.pretrain_epochs if phase == "pretrain" else self.finetune_epochs
        lr = (self.pretrain_lr if phase == "pretrain" else self.finetune_lr) or self.lr
        return OptimConfig(lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, epochs=epochs,
                           batch_size=self.batch_size, seed=self.seed if seed is None else seed)

    def fresh_prefixes(self) -> tuple[str, ...] | None:
        if self.fresh == "auto":
            return None
        return tuple(p.strip() + "." for p in self.fresh.split(",") if p.strip())

    def target_list(self) -> tuple[str, ...]:
        return tuple(t.strip() for t in self.targets.split(",") if t.strip())

    def int_list(self, name: str) -> list[int]:
        raw = getattr(self, name)
        try:
            return [int(v) for v in raw.split(",") if v.strip()]
        except ValueError as err:
            raise ConfigError(f"{name} must be a comma-separated integer list, got {raw!r}") from err

    def out_root(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "runs"))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as err:
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from err
    return value


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, str(value))
    return RunConfig(**values).validate()
