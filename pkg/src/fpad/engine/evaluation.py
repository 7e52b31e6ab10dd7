"""Episodic evaluation: per-episode mAP@0.5 and average mAP, then aggregates."""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..diffmath import ParamStore
from ..episodes import make_episode
from ..splits import ClassSplit
from ..synthcorpus import Corpus
from .config import EvalConfig, TrainConfig
from .inference import detect
from .metrics import average_map, map_at_tiou
from .model import feature_transform


@dataclass
class EvalReport:
    per_episode: list[dict]
    mean_map50: float
    std_map50: float
    mean_avg_map: float
    std_avg_map: float
    seed: int
    config: dict = field(default_factory=dict)
    timestamp: float | None = None

    @property
    def count(self) -> int:
        return len(self.per_episode)

    def to_dict(self, with_timestamp: bool = True) -> dict:
        d = {
            "count": self.count,
            "seed": self.seed,
            "mean_map50": self.mean_map50,
            "std_map50": self.std_map50,
            "mean_avg_map": self.mean_avg_map,
            "std_avg_map": self.std_avg_map,
            "config": self.config,
            "per_episode": self.per_episode,
        }
        if with_timestamp:
            d["timestamp"] = self.timestamp
        return d

    def to_json(self, with_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamp), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def summary(self) -> str:
        return (f"episodes={self.count} mAP@0.5={self.mean_map50:.4f} (std {self.std_map50:.4f}) "
                f"avg-mAP={self.mean_avg_map:.4f} (std {self.std_avg_map:.4f})")


def aggregate(per_episode: list[dict]) -> tuple[float, float, float, float]:
    m50 = np.array([e["map50"] for e in per_episode], dtype=np.float64)
    avg = np.array([e["avg_map"] for e in per_episode], dtype=np.float64)
    return float(m50.mean()), float(m50.std()), float(avg.mean()), float(avg.std())


def evaluate_episode(params, corpus, split, config: TrainConfig, eval_config: EvalConfig,
                     index: int, transform=None) -> dict:
    dims = config.dims(corpus.config)
    ep = make_episode(corpus, split, config.n_way, config.shots, eval_config.seed, index, "test")
    dets = detect(params, ep, config, dims, eval_config.proposal_threshold,
                  eval_config.similarity_threshold, transform, eval_config.class_nms)
    gts = ep.gt_segments()
    return {
        "index": index,
        "query": ep.query_index,
        "classes": list(ep.classes),
        "detections": len(dets),
        "map50": map_at_tiou(dets, gts, 0.5),
        "avg_map": average_map(dets, gts),
    }


def evaluate(params: ParamStore, corpus: Corpus, split: ClassSplit, config: TrainConfig,
             eval_config: EvalConfig = EvalConfig()) -> EvalReport:
    """Evaluate ``eval_config.count`` test episodes drawn from the novel classes.

    Episodes are independent; with ``workers > 1`` they run on a thread pool
    and are reassembled by index, so the report does not depend on it.
    """
    transform = feature_transform(corpus.catalog, config)

    def run(i):
        return evaluate_episode(params, corpus, split, config, eval_config, i, transform)

    if eval_config.workers > 1:
        with ThreadPoolExecutor(max_workers=eval_config.workers) as pool:
            per_episode = list(pool.map(run, range(eval_config.count)))
    else:
        per_episode = [run(i) for i in range(eval_config.count)]
    m50, s50, mavg, savg = aggregate(per_episode)
    echo = {"train": config.to_dict(), "eval": eval_config.to_dict(), "split": split.to_dict()}
    echo["eval"].pop("workers")
    return EvalReport(per_episode, m50, s50, mavg, savg, eval_config.seed, echo, time.time())
