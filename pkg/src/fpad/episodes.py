"""N-way k-shot episode sampling.

Episode ``i`` of a stream is drawn from its own generator seeded by
``(master_seed, phase, i)``, so any episode can be regenerated alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .splits import ClassSplit
from .synthcorpus import Corpus, ExemplarClip, UntrimmedSequence

_PHASE_KEY = {"train": 0, "test": 1}


class SamplingError(RuntimeError):
    pass


@dataclass
class Episode:
    classes: tuple[int, ...]  # global class id at each episode label
    shots: int
    support: list[ExemplarClip]  # label-major, ``shots`` clips per label
    query: UntrimmedSequence
    query_index: int
    phase: str

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.shots)

    def label_of(self, class_id: int) -> int:
        """Episode label of a global class id, or -1 when not in the episode."""
        try:
            return self.classes.index(class_id)
        except ValueError:
            return -1

    def gt_segments(self) -> list[tuple[int, int, int]]:
        """Query segments relabelled to episode labels (-1 for other classes)."""
        return [(s, e, self.label_of(c)) for s, e, c in self.query.segments]


def episode_rng(master_seed: int, phase: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, _PHASE_KEY[phase], index]))


def _sample(corpus: Corpus, split: ClassSplit, n_way: int, shots: int,
            rng: np.random.Generator, phase: str, max_retries: int = 100) -> Episode:
    pool = np.array(split.subset(phase))
    if len(pool) < n_way:
        raise SamplingError(f"{phase} subset has {len(pool)} classes, fewer than {n_way}-way")
    for _ in range(max_retries):
        classes = rng.permutation(rng.choice(pool, size=n_way, replace=False))
        candidates = sorted({q for c in classes for q in corpus.sequences_with(int(c))})
        if candidates:
            break
    else:
        raise SamplingError(f"no query sequence overlaps the sampled classes after {max_retries} tries")
    q = int(candidates[rng.integers(len(candidates))])
    support = []
    for c in classes:
        idx = corpus.exemplar_indices(int(c))
        if not idx:
            raise SamplingError(f"class {int(c)} has no exemplars")
        picks = rng.choice(idx, size=shots, replace=len(idx) < shots)
        support.extend(corpus.exemplars[int(i)] for i in picks)
    return Episode(tuple(int(c) for c in classes), shots, support, corpus.sequences[q], q, phase)


def sample_train_episode(corpus, split, n_way, shots, rng) -> Episode:
    return _sample(corpus, split, n_way, shots, rng, "train")


def sample_test_episode(corpus, split, n_way, shots, rng) -> Episode:
    return _sample(corpus, split, n_way, shots, rng, "test")


def make_episode(corpus, split, n_way, shots, master_seed, index, phase) -> Episode:
    return _sample(corpus, split, n_way, shots, episode_rng(master_seed, phase, index), phase)


def episode_stream(corpus: Corpus, split: ClassSplit, n_way: int, shots: int,
                   master_seed: int, count: int, phase: str) -> Iterator[Episode]:
    if count < 1:
        raise ValueError("count must be at least 1")
    for i in range(count):
        yield make_episode(corpus, split, n_way, shots, master_seed, i, phase)
