"""The three studies: proposal-threshold sweep, lambda ablation, split comparison.

Every study returns a list of row dicts; ``write_csv`` and ``format_table``
turn them into plot-ready CSV or a text table.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..splits import ClassSplit, make_split
from ..synthcorpus import Corpus
from .config import EvalConfig, TrainConfig
from .evaluation import evaluate
from .training import final_adaptation_loss, train

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0, 0.1, 0.5, 1.0)
DEFAULT_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

THRESHOLD_COLUMNS = ("threshold", "map50", "avg_map", "detections")
LAMBDA_COLUMNS = ("lam", "map50", "avg_map", "final_adapt_loss")
SHOT_COLUMNS = ("shots", "map50", "avg_map")
SPLIT_RUN_COLUMNS = ("seed_set", "mode", "run", "split_seed", "map50", "avg_map")
SPLIT_SUMMARY_COLUMNS = ("seed_set", "mode", "runs", "mean_map50", "std_map50")

# corpus presets for the qualitative studies (combine with a seed)
NOISY_CORPUS = {"sigma_clip": 0.75, "sigma_background": 0.75}
# moderate noise leaves room for the frozen detectors to sharpen
# pretraining-visible novel classes; hidden classes get no help
LEAKAGE_CORPUS = {"sigma_clip": 0.5, "sigma_background": 0.5}
LEAKAGE_TRAIN = {"pretrain_projection": True, "pretrain_gain": 4.0}


def sweep_proposal_threshold(params, corpus: Corpus, split: ClassSplit, config: TrainConfig,
                             thresholds=DEFAULT_THRESHOLDS, eval_config: EvalConfig = EvalConfig()) -> list[dict]:
    """Evaluate the same params and episodes at each proposal-score threshold."""
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        rep = evaluate(params, corpus, split, config, eval_config.replace(proposal_threshold=t))
        dets = float(np.mean([e["detections"] for e in rep.per_episode]))
        rows.append({"threshold": t, "map50": rep.mean_map50, "avg_map": rep.mean_avg_map, "detections": dets})
    return rows


def sweep_lambda(config: TrainConfig, corpus: Corpus, split: ClassSplit, lambdas=DEFAULT_LAMBDAS,
                 eval_config: EvalConfig = EvalConfig()) -> list[dict]:
    """Train and evaluate once per adaptation weight; all runs share seeds."""
    rows = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError(f"adaptation weight must be non-negative, got {lam}")
        params, records = train(config.replace(lam=float(lam)), corpus, split)
        rep = evaluate(params, corpus, split, config, eval_config)
        rows.append({"lam": float(lam), "map50": rep.mean_map50, "avg_map": rep.mean_avg_map,
                     "final_adapt_loss": final_adaptation_loss(records)})
        log.info("lambda %.3g: %s", lam, rep.summary())
    return rows


def compare_shots(config: TrainConfig, corpus: Corpus, split: ClassSplit, shots=(1, 5),
                  eval_config: EvalConfig = EvalConfig()) -> list[dict]:
    """Train and test a k-shot model for each k, with shared seeds."""
    rows = []
    for k in shots:
        cfg = config.replace(shots=int(k))
        params, _ = train(cfg, corpus, split)
        rep = evaluate(params, corpus, split, cfg, eval_config)
        rows.append({"shots": int(k), "map50": rep.mean_map50, "avg_map": rep.mean_avg_map})
    return rows


def split_seed(seed_set: int, run: int) -> int:
    return 1000 * seed_set + run


def compare_splits(corpus: Corpus, config: TrainConfig, n_novel: int, seed_sets=(0,),
                   n_random: int = 3, n_controlled: int = 3,
                   eval_config: EvalConfig = EvalConfig()) -> tuple[list[dict], list[dict]]:
    """Train and evaluate ``n_random`` random and ``n_controlled`` controlled
    splits per seed set.

    Run ``j`` of a seed set uses the same split seed and training seed in
    both modes, so modes are paired. Returns per-run rows and per
    (seed set, mode) summaries with mean and population std of mAP@0.5
    (a single run reports std 0).
    """
    plan = [("random", n_random), ("controlled", n_controlled)]
    if n_random < 0 or n_controlled < 0 or n_random + n_controlled < 2:
        raise ValueError("compare_splits needs at least two split specs")
    runs, summary = [], []
    for s in seed_sets:
        for mode, count in plan:
            scores = []
            for j in range(count):
                seed = split_seed(s, j)
                split = make_split(corpus.catalog, mode, n_novel, seed)
                params, _ = train(config.replace(seed=seed), corpus, split)
                rep = evaluate(params, corpus, split, config, eval_config)
                runs.append({"seed_set": s, "mode": mode, "run": j, "split_seed": seed,
                             "map50": rep.mean_map50, "avg_map": rep.mean_avg_map})
                scores.append(rep.mean_map50)
            if not scores:
                continue
            summary.append({"seed_set": s, "mode": mode, "runs": len(scores),
                            "mean_map50": float(np.mean(scores)), "std_map50": float(np.std(scores))})
            log.info("seed set %d %s: %.4f +- %.4f", s, mode, summary[-1]["mean_map50"], summary[-1]["std_map50"])
    return runs, summary


# ---------------------------------------------------------------------------
# output


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: list[dict], path, columns) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r[c]) for c in columns])


def format_table(rows: list[dict], columns) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [list(columns)] + [[fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def format_split_summary(summary: list[dict]) -> str:
    """``mode: mean +- std`` lines, one per seed set and mode."""
    lines = []
    for r in summary:
        note = " (single run, std reported as 0)" if r["runs"] == 1 else ""
        lines.append(f"seed set {r['seed_set']}  {r['mode']:<10} mAP@0.5 {r['mean_map50']:.4f} "
                     f"+- {r['std_map50']:.4f} (n={r['runs']}){note}")
    return "\n".join(lines)
