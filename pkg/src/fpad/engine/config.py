"""Run configuration shared by training, inference and the studies."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..proposals import ModelDims
from ..synthcorpus import ConfigError, CorpusConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    iterations: int = 2000
    lam: float = 0.5
    n_way: int = 5
    shots: int = 1
    seed: int = 0
    # stage-1 / stage-2 target assignment
    s1_pos_tiou: float = 0.7
    s1_neg_tiou: float = 0.3
    s2_pos_tiou: float = 0.5
    s2_neg_tiou: float = 0.5
    s2_neg_floor: float = 0.1
    batch_size: int = 64
    pos_fraction: float = 0.5
    nms_threshold: float = 0.7
    train_top_k: int = 32
    test_top_k: int = 64
    temperature: float = 0.1
    # adaptation loss on L2-normalised embeddings
    adapt_normalized: bool = True
    # architecture
    hidden: int = 64
    embed_dim: int = 64
    bins: int = 4
    context: int = 4
    context_ratio: float = 0.25
    scales: tuple[float, ...] = (2, 4, 8, 16, 32, 64)
    # frozen detectors that add pretraining-prototype directions to familiar rows
    pretrain_projection: bool = False
    pretrain_gain: float = 2.0

    def __post_init__(self):
        if isinstance(self.scales, list):
            object.__setattr__(self, "scales", tuple(self.scales))
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.lam < 0:
            raise ConfigError("lam", "must be non-negative")
        if not 0 < self.nms_threshold <= 1:
            raise ConfigError("nms_threshold", "must lie in (0, 1]")
        if self.iterations < 0:
            raise ConfigError("iterations", "must be non-negative")
        if self.n_way < 1 or self.shots < 1:
            raise ConfigError("n_way", "n_way and shots must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature", "must be positive")

    def dims(self, corpus_config: CorpusConfig) -> ModelDims:
        return ModelDims(
            feature_dim=corpus_config.feature_dim,
            seq_len=corpus_config.seq_len,
            stride=corpus_config.stride,
            scales=self.scales,
            context=self.context,
            hidden=self.hidden,
            bins=self.bins,
            embed_dim=self.embed_dim,
            context_ratio=self.context_ratio,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


@dataclass(frozen=True)
class EvalConfig:
    # 1000 episodes is the full protocol; CI-scale runs use 200
    count: int = 1000
    seed: int = 1000
    proposal_threshold: float = 0.3
    similarity_threshold: float = 0.0
    class_nms: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count", "must be at least 1")
        for name in ("proposal_threshold", "similarity_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(name, "must lie in [0, 1]")

    def replace(self, **changes) -> "EvalConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


# low-threshold preset used for THUMOS-style evaluation
THUMOS_THRESHOLDS = {"proposal_threshold": 0.05, "similarity_threshold": 0.02}
