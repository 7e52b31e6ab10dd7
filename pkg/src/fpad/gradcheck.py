"""Finite-difference release gate over every composed training loss.

Each micro-instance is a tiny corpus, one training episode and parameters
drawn uniformly from [-1, 1]. The discrete parts of a step (targets, NMS,
proposal selection) are frozen by ``plan_step``; what remains is checked
against central differences one loss path at a time. Instances too close to
a ReLU kink, an SoI argmax switch or a near-zero embedding are redrawn,
since central differences are not meaningful there.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffmath import ParamStore, finite_diff_check
from .engine.config import TrainConfig
from .engine.model import init_params, plan_step, step_losses, training_weights
from .episodes import SamplingError, make_episode
from .splits import random_split
from .synthcorpus import CorpusConfig, GenerationError, generate_corpus

LOSS_PATHS = ("binary_proposal", "smooth_l1", "fewshot_ce", "adaptation", "total")

KINK_MARGIN = 1e-3
MIN_EMBED_NORM = 0.1


def path_weights(path: str, lam: float) -> dict[str, float]:
    if path == "binary_proposal":
        return {"p1_cls": 1.0, "p2_cls": 1.0}
    if path == "smooth_l1":
        return {"p1_reg": 1.0, "p2_reg": 1.0}
    if path == "fewshot_ce":
        return {"fewshot": 1.0}
    if path == "adaptation":
        return {"adapt": 1.0}
    if path == "total":
        return training_weights(lam)
    raise KeyError(f"unknown loss path {path!r}")


MICRO_CORPUS = dict(num_classes=10, feature_dim=6, seq_len=32, stride=8, min_segment_len=4,
                    max_segment_len=12, min_gap=2, exemplars_per_class=3, sequences_per_class=2,
                    actionness=1.0)
MICRO_TRAIN = dict(hidden=5, embed_dim=4, bins=2, context=1, batch_size=8, train_top_k=6,
                   n_way=2, scales=(2, 4, 8))


@dataclass
class MicroInstance:
    seed: int
    params: ParamStore
    plan: object
    dims: object


def micro_instance(seed: int) -> MicroInstance | None:
    """One randomized instance, or None when it sits too close to a kink."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 500]))
    try:
        corpus = generate_corpus(CorpusConfig(seed=seed, **MICRO_CORPUS))
        split = random_split(corpus.catalog, 4, seed)
        shots = int(rng.integers(1, 3))
        config = TrainConfig(shots=shots, **MICRO_TRAIN)
        dims = config.dims(corpus.config)
        episode = make_episode(corpus, split, config.n_way, shots, seed, 0, "train")
    except (GenerationError, SamplingError):
        return None
    params = init_params(dims, seed)
    for name in params.names():
        params[name][...] = rng.uniform(-1.0, 1.0, params[name].shape)
    plan = plan_step(params, episode, config, dims, rng)
    if not len(plan.fewshot_rows):
        return None
    diag = step_losses(params, plan, dims, training_weights(1.0), backward=False, diagnostics=True)
    if diag["margin"] < KINK_MARGIN or diag["min_norm"] < MIN_EMBED_NORM:
        return None
    return MicroInstance(seed, params, plan, dims)


@dataclass
class PathResult:
    path: str
    instances: int
    checked: int
    max_rel_error: float
    passed: bool
    # (instance seed, parameter name, max relative error) for every failing row
    failures: list[tuple[int, str, float]] = field(default_factory=list)


@dataclass
class GradcheckSummary:
    tolerance: float
    step: float
    rows: list[PathResult] = field(default_factory=list)
    rejected: int = 0
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def format(self) -> str:
        lines = [f"{'path':<16} {'instances':>9} {'entries':>8} {'max_rel_err':>12}  status"]
        for r in self.rows:
            lines.append(f"{r.path:<16} {r.instances:>9d} {r.checked:>8d} {r.max_rel_error:>12.3e}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
            for seed, name, err in r.failures:
                lines.append(f"    instance {seed}: {name} rel err {err:.3e}")
        lines.append(f"tolerance {self.tolerance:g}, step {self.step:g}, {self.rejected} instances redrawn, "
                     f"{self.elapsed:.1f}s")
        return "\n".join(lines)


def run_gradcheck(instances: int = 20, seed: int = 0, step: float = 1e-4, tolerance: float = 1e-5,
                  max_entries: int | None = 3, lam: float = 0.5, paths=LOSS_PATHS,
                  max_attempts: int = 2000) -> GradcheckSummary:
    """Check every loss path on ``instances`` accepted micro-instances."""
    t0 = time.perf_counter()
    summary = GradcheckSummary(tolerance=tolerance, step=step)
    accepted: list[MicroInstance] = []
    attempt = 0
    while len(accepted) < instances and attempt < max_attempts:
        inst = micro_instance(seed * max_attempts + attempt)
        attempt += 1
        if inst is None:
            summary.rejected += 1
        else:
            accepted.append(inst)
    if len(accepted) < instances:
        raise RuntimeError(f"only {len(accepted)} of {instances} usable instances in {max_attempts} attempts")

    for path in paths:
        weights = path_weights(path, lam)
        worst, checked, failures = 0.0, 0, []
        for inst in accepted:
            def loss_fn(p, inst=inst):
                return step_losses(p, inst.plan, inst.dims, weights)["objective"]

            rng = np.random.default_rng(np.random.SeedSequence([inst.seed, 501]))
            rep = finite_diff_check(loss_fn, inst.params, step=step, tolerance=tolerance,
                                    max_entries=max_entries, rng=rng)
            worst = max(worst, rep.max_rel_error)
            checked += sum(r.checked for r in rep.rows)
            failures.extend((inst.seed, r.name, r.max_rel_error) for r in rep.failures())
        summary.rows.append(PathResult(path, len(accepted), checked, worst, not failures, failures))
    summary.elapsed = time.perf_counter() - t0
    return summary
