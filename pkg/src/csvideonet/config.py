"""Run configuration: a strict, documented key-value schema with file + override loading.

Precedence is flags > file > defaults. Unknown keys are rejected.

Schema (defaults in brackets)::

    seed                      [0]    master seed; fills every null seed below
    out                       ["runs/default"]
    ingest.inputs             [[]]   clip files or image-sequence directories
    ingest.crop               [[160, 160]]
    ingest.block_size         [32]
    ingest.T                  [10]
    ingest.holdout            [0]    trailing GOPs written to the test split
    ingest.workers            [1]
    ingest.synthetic_clips    [0]    >0 generates moving-gradient clips instead of reading inputs
    ingest.synthetic_frames   [25]
    data.train / data.test    [null] dataset directories
    sensing.m_key             [40]
    sensing.m_nonkey          [10]
    sensing.seed              [null]
    sensing.noise_mode        ["measurement"]  or "frame"
    model.key_channels        [[128, 64, 32, 32, 16, 16, 1]]
    model.nonkey_channels     [[64, 16, 1]]
    model.hidden_size         [1024]
    model.num_layers          [1]
    model.kernel_size         [3]
    pretrain.*                TrainConfig fields; batch 100, lr 1e-3, 1000 steps, no clipping
    train.*                   TrainConfig fields; batch 20, lr 1e-4, 2000 steps, clip 5.0
    train.mode                ["full"] or "cnn_only"
    train.pretrained          [null] key-CNN checkpoint; null trains from scratch
    eval.cr_labels            [[25, 50, 100]]
    eval.snr_levels           [["clean", 60, 40, 20]]
    eval.checkpoints          [{}]   CR label -> decoder checkpoint path
    eval.seed                 [null]
    eval.bench_repeats        [20]
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class IngestSection:
    inputs: list = field(default_factory=list)
    crop: list = field(default_factory=lambda: [160, 160])
    block_size: int = 32
    T: int = 10
    holdout: int = 0
    workers: int = 1
    synthetic_clips: int = 0
    synthetic_frames: int = 25


@dataclass
class DataSection:
    train: Optional[str] = None
    test: Optional[str] = None


@dataclass
class SensingSection:
    m_key: int = 40
    m_nonkey: int = 10
    seed: Optional[int] = None
    noise_mode: str = "measurement"


@dataclass
class ModelSection:
    key_channels: list = field(default_factory=lambda: [128, 64, 32, 32, 16, 16, 1])
    nonkey_channels: list = field(default_factory=lambda: [64, 16, 1])
    hidden_size: int = 1024
    num_layers: int = 1
    kernel_size: int = 3


@dataclass
class PhaseSection:
    batch_size: int = 20
    steps: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: Optional[int] = None
    eval_every: int = 0
    optimizer: str = "adam"
    clip_norm: Optional[float] = 5.0
    mode: str = "full"
    pretrained: Optional[str] = None


@dataclass
class EvalSection:
    cr_labels: list = field(default_factory=lambda: [25, 50, 100])
    snr_levels: list = field(default_factory=lambda: ["clean", 60, 40, 20])
    checkpoints: dict = field(default_factory=dict)
    seed: Optional[int] = None
    bench_repeats: int = 20


_SECTIONS = {
    "ingest": IngestSection,
    "data": DataSection,
    "sensing": SensingSection,
    "model": ModelSection,
    "pretrain": PhaseSection,
    "train": PhaseSection,
    "eval": EvalSection,
}


def _pretrain_defaults() -> PhaseSection:
    return PhaseSection(batch_size=100, steps=1000, lr=1e-3, clip_norm=None)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    ingest: IngestSection = field(default_factory=IngestSection)
    data: DataSection = field(default_factory=DataSection)
    sensing: SensingSection = field(default_factory=SensingSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PhaseSection = field(default_factory=_pretrain_defaults)
    train: PhaseSection = field(default_factory=PhaseSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.merge(d)
        cfg.validate()
        return cfg

    def merge(self, d: dict) -> None:
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        for key, value in d.items():
            if key in ("seed", "out"):
                setattr(self, key, value)
            elif key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                section = getattr(self, key)
                known = {f.name for f in fields(section)}
                for k, v in value.items():
                    if k not in known:
                        raise ConfigError(f"unknown config key {key}.{k}")
                    setattr(section, k, copy.deepcopy(v))
            else:
                raise ConfigError(f"unknown config key {key!r}")

    def set_path(self, dotted: str, value: Any) -> None:
        parts = dotted.split(".")
        d: dict = {}
        cur = d
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        self.merge(d)

    def validate(self) -> None:
        try:
            self.model_config()
            self.train_config("pretrain")
            self.train_config("full")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if self.sensing.noise_mode not in ("measurement", "frame"):
            raise ConfigError("sensing.noise_mode must be 'measurement' or 'frame'")
        if not self.sensing.m_key >= self.sensing.m_nonkey >= 1:
            raise ConfigError("need sensing.m_key >= sensing.m_nonkey >= 1")
        if self.train.mode not in ("full", "cnn_only"):
            raise ConfigError("train.mode must be 'full' or 'cnn_only'")
        if len(self.ingest.crop) != 2 or self.ingest.holdout < 0:
            raise ConfigError("ingest.crop must be [h, w] and holdout non-negative")
        if self.eval.bench_repeats < 10:
            raise ConfigError("eval.bench_repeats must be at least 10")

    # -- derived objects ----------------------------------------------------

    def seed_for(self, value: Optional[int]) -> int:
        return self.seed if value is None else int(value)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            block_size=self.ingest.block_size,
            m_key=self.sensing.m_key,
            m_nonkey=self.sensing.m_nonkey,
            T=self.ingest.T,
            key_channels=tuple(m.key_channels),
            nonkey_channels=tuple(m.nonkey_channels),
            hidden_size=m.hidden_size,
            num_layers=m.num_layers,
            kernel_size=m.kernel_size,
        )

    def train_config(self, phase: str) -> TrainConfig:
        s = self.pretrain if phase == "pretrain" else self.train
        return TrainConfig(
            phase=phase, batch_size=s.batch_size, steps=s.steps, lr=s.lr, beta1=s.beta1,
            beta2=s.beta2, eps=s.eps, seed=self.seed_for(s.seed), eval_every=s.eval_every,
            optimizer=s.optimizer, clip_norm=s.clip_norm,
        )

    def resolved(self) -> dict:
        """Fully explicit dict (null seeds filled in)."""
        d = {"seed": self.seed, "out": self.out}
        for name in _SECTIONS:
            sec = getattr(self, name)
            d[name] = {f.name: copy.deepcopy(getattr(sec, f.name)) for f in fields(sec)}
            if "seed" in d[name]:
                d[name]["seed"] = self.seed_for(d[name]["seed"])
        return d


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), seed=None, out=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        if p.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
        cfg.merge(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set_path(k.strip(), parse_value(v))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = str(out)
    cfg.validate()
    return cfg
