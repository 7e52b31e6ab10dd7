"""Base/novel class partitions, with optional pretraining-overlap control."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthcorpus import ClassCatalog


class SplitError(ValueError):
    pass


class InfeasibleSplitError(SplitError):
    """Controlled split asked for more novel classes than are non-visible."""

    def __init__(self, requested: int, available: int):
        super().__init__(
            f"controlled split needs {requested} non-visible classes but only {available} "
            f"exist (deficit {requested - available})"
        )
        self.requested = requested
        self.available = available


@dataclass(frozen=True)
class ClassSplit:
    base: tuple[int, ...]
    novel: tuple[int, ...]
    mode: str
    seed: int

    def to_dict(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "base": list(self.base), "novel": list(self.novel)}

    @classmethod
    def from_dict(cls, data: dict) -> "ClassSplit":
        try:
            split = cls(tuple(int(i) for i in data["base"]), tuple(int(i) for i in data["novel"]),
                        str(data["mode"]), int(data["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SplitError(f"malformed split record: {exc}") from exc
        if split.mode not in ("random", "controlled"):
            raise SplitError(f"unknown split mode {split.mode!r}")
        if set(split.base) & set(split.novel):
            raise SplitError("base and novel classes overlap")
        return split

    def subset(self, phase: str) -> tuple[int, ...]:
        if phase == "train":
            return self.base
        if phase == "test":
            return self.novel
        raise SplitError(f"unknown phase {phase!r}")


def _make(catalog: ClassCatalog, pool: list[int], n_novel: int, seed: int, mode: str) -> ClassSplit:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    novel = sorted(int(i) for i in rng.choice(pool, size=n_novel, replace=False))
    base = sorted(set(range(catalog.num_classes)) - set(novel))
    return ClassSplit(tuple(base), tuple(novel), mode, seed)


def random_split(catalog: ClassCatalog, n_novel: int, seed: int) -> ClassSplit:
    if not 0 < n_novel < catalog.num_classes:
        raise SplitError(f"n_novel must lie in (0, {catalog.num_classes}), got {n_novel}")
    return _make(catalog, list(range(catalog.num_classes)), n_novel, seed, "random")


def controlled_split(catalog: ClassCatalog, n_novel: int, seed: int) -> ClassSplit:
    """Draw novel classes only from classes unseen by the pretraining label set."""
    if not 0 < n_novel < catalog.num_classes:
        raise SplitError(f"n_novel must lie in (0, {catalog.num_classes}), got {n_novel}")
    hidden = catalog.hidden_ids
    if len(hidden) < n_novel:
        raise InfeasibleSplitError(n_novel, len(hidden))
    return _make(catalog, hidden, n_novel, seed, "controlled")


def make_split(catalog: ClassCatalog, mode: str, n_novel: int, seed: int) -> ClassSplit:
    if mode == "random":
        return random_split(catalog, n_novel, seed)
    if mode == "controlled":
        return controlled_split(catalog, n_novel, seed)
    raise SplitError(f"unknown split mode {mode!r}")


def split_report(split: ClassSplit, catalog: ClassCatalog) -> dict:
    visible = catalog.pretrain_visible
    overlap = int(sum(bool(visible[i]) for i in split.novel))

    def rho_stats(ids):
        vals = [catalog.rho[i] for i in ids if catalog.rho[i] is not None]
        if not vals:
            return {"count": 0, "mean": None, "min": None, "max": None}
        return {"count": len(vals), "mean": float(np.mean(vals)), "min": float(min(vals)), "max": float(max(vals))}

    return {
        "mode": split.mode,
        "seed": split.seed,
        "n_base": len(split.base),
        "n_novel": len(split.novel),
        "novel_pretrain_overlap": overlap,
        "rho_novel": rho_stats(split.novel),
        "rho_base": rho_stats(split.base),
    }


def save_split(split: ClassSplit, path) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_split(path) -> ClassSplit:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SplitError(f"split file is not JSON: {exc}") from exc
    return ClassSplit.from_dict(data)
