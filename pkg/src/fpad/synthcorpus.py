"""Synthetic feature-level corpora for few-shot temporal detection.

Untrimmed sequences are ``seq_len x feature_dim`` maps where rows inside a
ground-truth segment are ``prototype + noise`` and background rows are pure
noise. Every prototype carries the same ``actionness`` component, a generic
foreground signal that class-agnostic proposals can transfer to unseen
classes; it moves all prototypes alike, so their distances are unchanged.
Trimmed exemplars are single vectors carrying an extra constant offset
``frame_rate_bias * u`` that the query stream never has; this is the stream
discrepancy the adaptation loss targets.

A catalog also holds a set of "pretraining" prototypes. Classes flagged
``pretrain_visible`` reuse one of them verbatim; the rest sit at correlation
``rho`` to their nearest one. The engine builds frozen detectors along them
to simulate backbone familiarity.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container

CORPUS_MAGIC = "FPADCORP1"


class ConfigError(ValueError):
    """Invalid corpus configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    seed: int
    num_classes: int = 100
    feature_dim: int = 32
    seq_len: int = 96
    sigma_clip: float = 0.25
    sigma_background: float = 0.25
    # number of ground-truth segments per untrimmed sequence
    segment_density: int = 2
    min_segment_len: int = 8
    max_segment_len: int = 48
    # minimum number of background rows between two segments
    min_gap: int = 8
    frame_rate_bias: float = 0.5
    # correlation of non-visible prototypes to pretraining ones; a float or one value per non-visible class
    rho: float | tuple[float, ...] = 0.0
    visible_fraction: float = 0.4
    prototype_norm: float = 2.0
    # magnitude of a foreground direction shared by every prototype (generic actionness)
    actionness: float = 2.0
    exemplars_per_class: int = 10
    sequences_per_class: int = 8
    second_class_prob: float = 0.0
    clip_frames: int = 16
    frame_rate: float = 6.0
    stride: int = 8

    def __post_init__(self):
        if isinstance(self.rho, list):
            object.__setattr__(self, "rho", tuple(self.rho))
        self.validate()

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "a non-negative integer seed is mandatory")
        if self.num_classes < 10:
            raise ConfigError("num_classes", "at least 10 classes are required")
        for name in ("feature_dim", "seq_len", "segment_density", "min_segment_len",
                     "exemplars_per_class", "sequences_per_class", "clip_frames", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        for name in ("sigma_clip", "sigma_background", "frame_rate_bias", "prototype_norm", "actionness"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.min_gap < 0:
            raise ConfigError("min_gap", "must be non-negative")
        if self.max_segment_len < self.min_segment_len or self.max_segment_len > self.seq_len:
            raise ConfigError("max_segment_len", "must lie in [min_segment_len, seq_len]")
        if not 0.0 <= self.visible_fraction <= 1.0:
            raise ConfigError("visible_fraction", "must lie in [0, 1]")
        if not 0.0 <= self.second_class_prob <= 1.0:
            raise ConfigError("second_class_prob", "must lie in [0, 1]")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate", "must be positive")
        rhos = self.rho if isinstance(self.rho, tuple) else (self.rho,)
        if any(not 0.0 <= r <= 1.0 for r in rhos):
            raise ConfigError("rho", "correlations must lie in [0, 1]")
        if isinstance(self.rho, tuple) and len(self.rho) != self.num_classes - self.num_visible:
            raise ConfigError("rho", "schedule needs one value per non-visible class")

    @property
    def num_visible(self) -> int:
        return int(round(self.visible_fraction * self.num_classes))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.rho, tuple):
            d["rho"] = list(self.rho)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        if "seed" not in data:
            raise ConfigError("seed", "missing mandatory field")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


@dataclass
class ClassCatalog:
    names: list[str]
    prototypes: np.ndarray  # (C, D)
    pretrain_visible: np.ndarray  # (C,) bool
    rho: list[float | None]
    pretrain_prototypes: np.ndarray  # (K, D)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def visible_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.pretrain_visible)]

    @property
    def hidden_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.pretrain_visible)]

    def min_pairwise_distance(self) -> float:
        p = self.prototypes
        dist = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
        dist[np.diag_indices_from(dist)] = np.inf
        return float(dist.min())


@dataclass
class ExemplarClip:
    class_id: int
    duration: float  # seconds
    feature: np.ndarray  # (D,)


@dataclass
class UntrimmedSequence:
    features: np.ndarray  # (T, D)
    segments: list[tuple[int, int, int]]  # (start, end, class_id) in rows
    frame_rate: float
    stride: int

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def classes(self) -> set[int]:
        return {c for _, _, c in self.segments}


@dataclass
class Corpus:
    config: CorpusConfig
    catalog: ClassCatalog
    bias_direction: np.ndarray  # (D,) unit vector
    exemplars: list[ExemplarClip]
    sequences: list[UntrimmedSequence]
    _by_class: dict[int, list[int]] = field(default=None, init=False, repr=False)
    _seq_by_class: dict[int, list[int]] = field(default=None, init=False, repr=False)

    def exemplar_indices(self, class_id: int) -> list[int]:
        if self._by_class is None:
            self._by_class = {}
            for i, clip in enumerate(self.exemplars):
                self._by_class.setdefault(clip.class_id, []).append(i)
        return self._by_class.get(class_id, [])

    def sequences_with(self, class_id: int) -> list[int]:
        if self._seq_by_class is None:
            self._seq_by_class = {}
            for i, seq in enumerate(self.sequences):
                for c in sorted(seq.classes):
                    self._seq_by_class.setdefault(c, []).append(i)
        return self._seq_by_class.get(class_id, [])


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def build_catalog(config: CorpusConfig, n_novel: int | None = None) -> ClassCatalog:
    """Draw class prototypes and pretraining visibility deterministically.

    ``n_novel``, when given, is checked against the class count and against
    the number of non-visible classes a controlled split would need.
    """
    c, d = config.num_classes, config.feature_dim
    n_vis = config.num_visible
    if n_novel is not None and not 0 < n_novel < c:
        raise ConfigError("n_novel", f"{n_novel} novel classes cannot be split from {c}")
    if n_novel is not None and c - n_vis < n_novel:
        raise ConfigError("visible_fraction", f"only {c - n_vis} non-visible classes for {n_novel} novel")
    rng = _stream(config.seed, 0)
    visible = np.zeros(c, dtype=bool)
    visible[rng.choice(c, size=n_vis, replace=False)] = True
    pretrain = np.array([_unit(rng.standard_normal(d)) for _ in range(n_vis)]).reshape(n_vis, d)
    pretrain *= config.prototype_norm

    if n_vis and n_vis < d:
        q, _ = np.linalg.qr(pretrain.T)
        span = q[:, :n_vis]
    else:
        span = None
    rho_iter = iter(config.rho if isinstance(config.rho, tuple) else [config.rho] * (c - n_vis))

    prototypes = np.empty((c, d))
    rhos: list[float | None] = []
    next_pre = 0
    for i in range(c):
        if visible[i]:
            prototypes[i] = pretrain[next_pre]
            next_pre += 1
            rhos.append(1.0)
            continue
        g = rng.standard_normal(d)
        if n_vis == 0:
            prototypes[i] = config.prototype_norm * _unit(g)
            rhos.append(None)
            continue
        r = float(next(rho_iter))
        nearest = _unit(pretrain[np.argmax(pretrain @ g / config.prototype_norm)])
        if span is not None:
            orth = g - span @ (span.T @ g)
        else:
            orth = g - nearest * (nearest @ g)
        orth = _unit(orth)
        prototypes[i] = config.prototype_norm * (r * nearest + math.sqrt(max(0.0, 1.0 - r * r)) * orth)
        rhos.append(r)
    # the shared component moves every prototype by the same vector, so
    # pairwise distances and the visible/pretraining coincidence are kept
    shift = config.actionness * actionness_direction(config)
    names = [f"class_{i:03d}" for i in range(c)]
    return ClassCatalog(names, prototypes + shift, visible, rhos, pretrain + shift)


def actionness_direction(config: CorpusConfig) -> np.ndarray:
    return _unit(_stream(config.seed, 4).standard_normal(config.feature_dim))


def bias_direction(config: CorpusConfig) -> np.ndarray:
    return _unit(_stream(config.seed, 3).standard_normal(config.feature_dim))


def synth_exemplar(
    catalog: ClassCatalog,
    class_id: int,
    config: CorpusConfig,
    rng: np.random.Generator,
    direction: np.ndarray | None = None,
) -> ExemplarClip:
    if not 0 <= class_id < catalog.num_classes:
        raise ConfigError("class_id", f"{class_id} is not in the catalog")
    u = bias_direction(config) if direction is None else direction
    noise = rng.normal(0.0, config.sigma_clip, size=config.feature_dim) if config.sigma_clip > 0 else 0.0
    feature = catalog.prototypes[class_id] + noise + config.frame_rate_bias * u
    n_rows = rng.integers(config.min_segment_len, config.max_segment_len + 1)
    duration = float(n_rows * config.stride / config.frame_rate)
    return ExemplarClip(int(class_id), duration, np.asarray(feature, dtype=np.float64))


def synth_untrimmed(
    catalog: ClassCatalog,
    classes_present: Sequence[int],
    config: CorpusConfig,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> UntrimmedSequence:
    if not classes_present:
        raise ConfigError("classes_present", "at least one class is required")
    t, d = config.seq_len, config.feature_dim
    if config.sigma_background > 0:
        feats = rng.normal(0.0, config.sigma_background, size=(t, d))
    else:
        feats = np.zeros((t, d))
    placed: list[tuple[int, int, int]] = []
    for i in range(config.segment_density):
        cls = int(classes_present[i % len(classes_present)])
        for _ in range(max_retries):
            length = int(rng.integers(config.min_segment_len, config.max_segment_len + 1))
            starts = np.arange(t - length + 1)
            ok = np.ones(len(starts), dtype=bool)
            for s, e, _ in placed:
                ok &= (starts + length + config.min_gap <= s) | (starts >= e + config.min_gap)
            if ok.any():
                start = int(rng.choice(starts[ok]))
                end = start + length
                break
        else:
            raise GenerationError(
                f"could not place segment {i + 1} of {config.segment_density} in {t} rows "
                f"after {max_retries} attempts"
            )
        placed.append((start, end, cls))
        noise = rng.normal(0.0, config.sigma_clip, size=(length, d)) if config.sigma_clip > 0 else 0.0
        feats[start:end] = catalog.prototypes[cls] + noise
    placed.sort()
    return UntrimmedSequence(feats, placed, config.frame_rate, config.stride)


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Build the whole corpus; a pure function of ``config``."""
    catalog = build_catalog(config)
    u = bias_direction(config)
    ex_rng = _stream(config.seed, 1)
    exemplars = [
        synth_exemplar(catalog, c, config, ex_rng, u)
        for c in range(config.num_classes)
        for _ in range(config.exemplars_per_class)
    ]
    seq_rng = _stream(config.seed, 2)
    sequences = []
    for c in range(config.num_classes):
        for _ in range(config.sequences_per_class):
            present = [c]
            if config.second_class_prob > 0 and config.segment_density > 1 and seq_rng.random() < config.second_class_prob:
                other = int(seq_rng.integers(config.num_classes - 1))
                present.append(other if other < c else other + 1)
            sequences.append(synth_untrimmed(catalog, present, config, seq_rng))
    return Corpus(config, catalog, u, exemplars, sequences)


# ---------------------------------------------------------------------------
# persistence


def save_corpus(corpus: Corpus, path) -> None:
    cat = corpus.catalog
    header = {
        "config": corpus.config.to_dict(),
        "seed": corpus.config.seed,
        "num_classes": cat.num_classes,
        "feature_dim": corpus.config.feature_dim,
        "counts": {"exemplars": len(corpus.exemplars), "sequences": len(corpus.sequences)},
        "names": cat.names,
        "pretrain_visible": [bool(v) for v in cat.pretrain_visible],
        "rho": cat.rho,
        "exemplar_classes": [c.class_id for c in corpus.exemplars],
        "sequences": [
            {"segments": [list(s) for s in seq.segments], "frame_rate": seq.frame_rate, "stride": seq.stride}
            for seq in corpus.sequences
        ],
    }
    d = corpus.config.feature_dim
    blocks = [
        cat.prototypes,
        cat.pretrain_prototypes.reshape(-1, d),
        corpus.bias_direction,
        np.array([c.feature for c in corpus.exemplars]).reshape(-1, d),
        np.array([c.duration for c in corpus.exemplars]),
    ]
    blocks += [seq.features for seq in corpus.sequences]
    container.write(path, CORPUS_MAGIC, header, blocks)


def load_corpus(path) -> Corpus:
    header, blocks = container.read(Path(path), CORPUS_MAGIC)
    try:
        config = CorpusConfig.from_dict(header["config"])
        n_ex = header["counts"]["exemplars"]
        n_seq = header["counts"]["sequences"]
        if len(blocks) != 5 + n_seq:
            raise container.HeaderError("block count does not match declared counts")
        protos, pretrain, u, feats, durations = blocks[:5]
        catalog = ClassCatalog(
            list(header["names"]),
            protos,
            np.array(header["pretrain_visible"], dtype=bool),
            list(header["rho"]),
            pretrain,
        )
        exemplars = [
            ExemplarClip(int(c), float(durations[i]), feats[i])
            for i, c in enumerate(header["exemplar_classes"][:n_ex])
        ]
        sequences = [
            UntrimmedSequence(
                blocks[5 + i],
                [tuple(int(v) for v in s) for s in meta["segments"]],
                float(meta["frame_rate"]),
                int(meta["stride"]),
            )
            for i, meta in enumerate(header["sequences"])
        ]
    except (KeyError, TypeError, ConfigError) as exc:
        raise container.HeaderError(f"malformed corpus header: {exc}") from exc
    return Corpus(config, catalog, u, exemplars, sequences)
