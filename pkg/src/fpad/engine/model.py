"""Parameter initialisation and the per-episode loss computation.

One training step is split in two. ``plan_step`` makes the discrete choices
(target assignment, NMS, proposal selection) from the current parameters.
``step_losses`` is then a piecewise-smooth function of the parameters for
that fixed plan; its ``margin`` tells the finite-difference checker how far
the nearest ReLU kink or SoI argmax switch is.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import container
from ..diffmath import ContractError, ParamStore, binary_score_loss, smooth_l1
from ..episodes import Episode
from ..fewshot import (
    adaptation_loss,
    encode_exemplar,
    encode_exemplar_backward,
    encode_rows,
    encode_rows_backward,
    fewshot_cls_loss,
    init_encoder_params,
    normalise_rows,
    normalise_rows_backward,
    similarity_backward,
    similarity_matrix,
)
from ..proposals import (
    ModelDims,
    StageOneOutput,
    decode_offsets,
    generate_anchors,
    init_proposal_params,
    label_and_sample,
    nms,
    pool_margin,
    pool_segments,
    pool_segments_backward,
    stage1_backward,
    stage1_forward,
    stage2_backward,
    stage2_forward,
    to_segments,
)
from ..synthcorpus import ClassCatalog
from .config import TrainConfig

PARAMS_MAGIC = "FPADPARM1"

COMPONENTS = ("p1_cls", "p1_reg", "p2_cls", "p2_reg", "fewshot", "adapt")


def init_params(dims: ModelDims, seed: int) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 100]))
    store = ParamStore()
    init_encoder_params(store, dims, rng)
    init_proposal_params(store, dims, rng)
    return store


@dataclass(frozen=True)
class PretrainProjection:
    """Frozen detectors along the pretraining prototype directions.

    Each detector responds to ``(x - center) . u_k`` and, above half of its own
    prototype's response, adds ``gain`` times the excess along ``u_k``. Rows
    of pretraining-visible classes get a clean copy of their direction on top
    of the raw features; noise and unseen classes rarely cross the threshold.
    Every row is then rescaled to its input norm, so familiarity changes the
    direction of a feature but never its magnitude.
    """
    center: np.ndarray  # (D,)
    directions: np.ndarray  # (K, D) unit rows
    thresholds: np.ndarray  # (K,)
    gain: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        response = (x - self.center) @ self.directions.T
        out = x + self.gain * np.maximum(response - self.thresholds, 0.0) @ self.directions
        n_in = np.linalg.norm(x, axis=-1, keepdims=True)
        n_out = np.linalg.norm(out, axis=-1, keepdims=True)
        return out * np.divide(n_in, n_out, out=np.ones_like(n_out), where=n_out > 0)


def feature_transform(catalog: ClassCatalog, config: TrainConfig) -> PretrainProjection | None:
    if not config.pretrain_projection or len(catalog.pretrain_prototypes) == 0:
        return None
    # centring on the mean class prototype removes the shared actionness part
    center = catalog.prototypes.mean(axis=0)
    rel = catalog.pretrain_prototypes - center
    norms = np.linalg.norm(rel, axis=1)
    return PretrainProjection(center, rel / norms[:, None], 0.5 * norms, float(config.pretrain_gain))


def apply_transform(x: np.ndarray, transform=None) -> np.ndarray:
    return x if transform is None else transform(x)


def support_matrix(episode: Episode, transform=None) -> np.ndarray:
    return apply_transform(np.array([c.feature for c in episode.support]), transform)


@dataclass
class StepPlan:
    features: np.ndarray  # transformed query map
    support: np.ndarray  # transformed support rows, label-major
    shots: int
    temperature: float
    s1_idx: np.ndarray
    s1_labels: np.ndarray
    s1_reg: np.ndarray
    s2_segments: np.ndarray  # sampled stage-2 candidates then adaptation proposals
    n_s2: int
    s2_labels: np.ndarray
    s2_reg: np.ndarray
    fewshot_rows: np.ndarray  # rows of the stage-2 sample feeding the similarity loss
    fewshot_targets: np.ndarray
    num_proposals: int
    adapt_normalized: bool = True


def plan_step(params: ParamStore, episode: Episode, config: TrainConfig, dims: ModelDims,
              rng: np.random.Generator, transform=None, stage1: StageOneOutput | None = None) -> StepPlan:
    feats = apply_transform(episode.query.features, transform)
    t = dims.seq_len
    anchors = generate_anchors(t, dims.scales, dims.stride)
    anchor_segs = to_segments(anchors, t)
    gt = np.array([(s, e) for s, e, _ in episode.query.segments], dtype=np.float64)
    gt_labels = np.array([episode.label_of(c) for _, _, c in episode.query.segments])

    t1 = label_and_sample(anchor_segs, gt, config.s1_pos_tiou, config.s1_neg_tiou,
                          config.batch_size, config.pos_fraction, rng)

    s1 = stage1 if stage1 is not None else stage1_forward(feats, params, dims)
    props = decode_offsets(anchors, s1.offsets, t)
    keep = nms(props, s1.scores, config.nms_threshold)[: config.train_top_k]
    proposals = props[keep]

    # stage-2 candidates: current proposals plus the ground truth; anchors join
    # only when no background candidate would otherwise exist
    cands = np.concatenate([proposals, gt])
    floor = config.s2_neg_floor
    try:
        t2 = label_and_sample(cands, gt, config.s2_pos_tiou, config.s2_neg_tiou,
                              config.batch_size, config.pos_fraction, rng, neg_floor=floor)
    except ContractError:
        cands = np.concatenate([cands, anchor_segs])
        try:
            t2 = label_and_sample(cands, gt, config.s2_pos_tiou, config.s2_neg_tiou,
                                  config.batch_size, config.pos_fraction, rng, neg_floor=floor)
        except ContractError:
            t2 = label_and_sample(cands, gt, config.s2_pos_tiou, config.s2_neg_tiou,
                                  config.batch_size, config.pos_fraction, rng, neg_floor=0.0)
    sampled = cands[t2.indices]

    n_pos = t2.num_pos
    labels_pos = gt_labels[t2.matched_gt[:n_pos]] if n_pos else np.zeros(0, np.int64)
    rows = np.flatnonzero(labels_pos >= 0)
    return StepPlan(
        features=feats,
        support=support_matrix(episode, transform),
        shots=episode.shots,
        temperature=config.temperature,
        s1_idx=t1.indices,
        s1_labels=t1.labels,
        s1_reg=t1.reg_targets,
        s2_segments=np.concatenate([sampled, proposals]),
        n_s2=len(sampled),
        s2_labels=t2.labels,
        s2_reg=t2.reg_targets,
        fewshot_rows=rows,
        fewshot_targets=labels_pos[rows],
        num_proposals=len(proposals),
        adapt_normalized=config.adapt_normalized,
    )


def _proposal_losses(logits, offsets, idx, labels, reg_targets, weights, prefix):
    """Binary score loss over the sample plus smooth-L1 over its positives."""
    d_logits = np.zeros_like(logits)
    d_offsets = np.zeros_like(offsets)
    l_cls, g = binary_score_loss(logits[idx], labels)
    d_logits[idx] += weights.get(f"{prefix}_cls", 0.0) * g.reshape(-1, 2)
    n_pos = int(labels.sum())
    l_reg = 0.0
    if n_pos:
        pos = idx[:n_pos]
        l_reg, g = smooth_l1(offsets[pos], reg_targets)
        l_reg /= n_pos
        d_offsets[pos] += weights.get(f"{prefix}_reg", 0.0) * g / n_pos
    return l_cls, l_reg, d_logits, d_offsets


def step_losses(params: ParamStore, plan: StepPlan, dims: ModelDims, weights: dict[str, float],
                backward: bool = True, stage1: StageOneOutput | None = None,
                diagnostics: bool = False) -> dict[str, float]:
    """All loss components for a fixed plan.

    The backward pass accumulates the gradient of ``sum(weights[c] * L_c)``
    into ``params.grads``. Returns the raw components and the weighted
    ``objective``. With ``diagnostics`` it also reports ``margin``, the
    distance to the nearest ReLU kink or SoI argmax switch, and ``min_norm``,
    the smallest non-zero embedding norm (where the cosine normalisation is
    most curved); gradient checks skip instances where either is small.
    """
    s1 = stage1 if stage1 is not None else stage1_forward(plan.features, params, dims)
    l1c, l1r, d1_logits, d1_offsets = _proposal_losses(
        s1.logits, s1.offsets, plan.s1_idx, plan.s1_labels, plan.s1_reg, weights, "p1")

    enc_map, map_cache = encode_rows(plan.features, params)
    pooled, argrows = pool_segments(enc_map, plan.s2_segments, dims.bins, dims.context_ratio)
    s2 = stage2_forward(pooled, params, dims)
    n2 = plan.n_s2
    l2c, l2r, d2_logits, d2_offsets = _proposal_losses(
        s2.logits, s2.offsets, np.arange(n2), plan.s2_labels, plan.s2_reg, weights, "p2")

    f_s, enc_cache = encode_exemplar(plan.support, params)
    d_feat = np.zeros_like(s2.features)
    d_support = np.zeros_like(f_s)

    l_fs = 0.0
    if len(plan.fewshot_rows):
        f_r = s2.features[plan.fewshot_rows]
        sim, sim_cache = similarity_matrix(f_s, f_r)
        l_fs, d_sim = fewshot_cls_loss(sim, plan.fewshot_targets, plan.shots, plan.temperature)
        w = weights.get("fewshot", 0.0)
        if backward and w:
            ds, dr = similarity_backward(sim_cache, w * d_sim)
            d_support += ds
            np.add.at(d_feat, plan.fewshot_rows, dr)

    w = weights.get("adapt", 0.0)
    if plan.adapt_normalized:
        # compared on the unit sphere the similarity head works on, so the
        # loss cannot be lowered by shrinking embeddings
        r_hat, r_cache = normalise_rows(s2.features[n2:])
        s_hat, s_cache = normalise_rows(f_s)
        l_ad, dr, ds = adaptation_loss(r_hat, s_hat)
        dr, ds = normalise_rows_backward(r_cache, dr), normalise_rows_backward(s_cache, ds)
    else:
        l_ad, dr, ds = adaptation_loss(s2.features[n2:], f_s)
    d_feat[n2:] += w * dr
    d_support += w * ds

    comps = {"p1_cls": l1c, "p1_reg": l1r, "p2_cls": l2c, "p2_reg": l2r, "fewshot": l_fs, "adapt": l_ad}
    if backward:
        stage1_backward(s1, d1_logits, d1_offsets, params)
        d_pooled = stage2_backward(s2, d2_logits, d2_offsets, d_feat, params)
        encode_rows_backward(map_cache, pool_segments_backward(argrows, d_pooled, len(enc_map)), params)
        encode_exemplar_backward(enc_cache, d_support, params)
    comps["objective"] = sum(weights.get(k, 0.0) * comps[k] for k in COMPONENTS)
    if not diagnostics:
        return comps
    pre = [s1.cache[1], map_cache[1], s2.cache[2], s2.cache[5], enc_cache[0][1], enc_cache[2]]
    margin = min(np.abs(p).min() for p in pre if p.size)
    comps["margin"] = float(min(margin, pool_margin(enc_map, argrows)))
    norms = np.linalg.norm(np.concatenate([s2.features, f_s]), axis=1)
    comps["min_norm"] = float(norms[norms > 0].min()) if (norms > 0).any() else np.inf
    return comps


def training_weights(lam: float) -> dict[str, float]:
    w = {k: 1.0 for k in COMPONENTS}
    w["adapt"] = lam
    return w


# ---------------------------------------------------------------------------
# persistence


def save_params(params: ParamStore, path, extra: dict | None = None) -> None:
    header = {"names": params.names(), "extra": extra or {}}
    container.write(Path(path), PARAMS_MAGIC, header, [params[n] for n in params.names()])


def load_params(path) -> tuple[ParamStore, dict]:
    header, blocks = container.read(Path(path), PARAMS_MAGIC)
    names = header.get("names")
    if not isinstance(names, list) or len(names) != len(blocks):
        raise container.HeaderError("parameter names do not match the stored blocks")
    store = ParamStore()
    for name, value in zip(names, blocks):
        store.add(name, value)
    return store, header.get("extra", {})
