"""Episodic training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..diffmath import ParamStore, sgd_step
from ..episodes import make_episode
from ..fewshot import NonFiniteLossError, total_loss
from ..proposals import stage1_forward
from ..splits import ClassSplit
from ..synthcorpus import Corpus
from .config import TrainConfig
from .model import apply_transform, feature_transform, init_params, plan_step, step_losses, training_weights

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_p1", "L_p2", "L_fewshot", "L_adapt", "L_total")


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    l_p1: float
    l_p2: float
    l_fewshot: float
    l_adapt: float
    l_total: float

    def row(self) -> tuple:
        return (self.iteration, self.l_p1, self.l_p2, self.l_fewshot, self.l_adapt, self.l_total)


def target_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 200, iteration]))


def train(config: TrainConfig, corpus: Corpus, split: ClassSplit,
          params: ParamStore | None = None) -> tuple[ParamStore, list[LossRecord]]:
    """Run ``config.iterations`` episodic SGD steps; returns params and loss log.

    Raises ``NonFiniteLossError`` (with iteration and component) on a
    non-finite loss.
    """
    if not split.base:
        raise ValueError("split has no base classes to train on")
    dims = config.dims(corpus.config)
    if params is None:
        params = init_params(dims, config.seed)
    transform = feature_transform(corpus.catalog, config)
    weights = training_weights(config.lam)
    records: list[LossRecord] = []
    for it in range(config.iterations):
        episode = make_episode(corpus, split, config.n_way, config.shots, config.seed, it, "train")
        s1 = stage1_forward(apply_transform(episode.query.features, transform), params, dims)
        if not (np.isfinite(s1.logits).all() and np.isfinite(s1.offsets).all()):
            # targets cannot be planned from a non-finite forward pass
            raise NonFiniteLossError("L_p1", math.nan, iteration=it)
        plan = plan_step(params, episode, config, dims, target_rng(config.seed, it), transform, stage1=s1)
        params.zero_grad()
        c = step_losses(params, plan, dims, weights, stage1=s1)
        l_p1 = c["p1_cls"] + c["p1_reg"]
        l_p2 = c["p2_cls"] + c["p2_reg"]
        l_total = total_loss(l_p1, l_p2, c["fewshot"], c["adapt"], config.lam, iteration=it)
        sgd_step(params, config.learning_rate)
        records.append(LossRecord(it, l_p1, l_p2, c["fewshot"], c["adapt"], l_total))
        if log.isEnabledFor(logging.DEBUG) and it % 200 == 0:
            log.debug("iter %d total %.4f p1 %.4f p2 %.4f fs %.4f adapt %.4f",
                      it, l_total, l_p1, l_p2, c["fewshot"], c["adapt"])
    return params, records


def final_adaptation_loss(records: list[LossRecord], window: int = 200) -> float:
    """Mean adaptation loss over the last ``window`` iterations."""
    if not records:
        return math.nan
    tail = records[-window:]
    return float(np.mean([r.l_adapt for r in tail]))


def write_loss_log(records: list[LossRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow([r.iteration] + [repr(float(v)) for v in r.row()[1:]])


def read_loss_log(path) -> list[LossRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"unexpected loss-log header {header}")
        return [LossRecord(int(row[0]), *(float(v) for v in row[1:])) for row in reader]
