"""Class-agnostic two-stage temporal proposal subnet.

Segments are ``(start, end)`` pairs and anchors are ``(center, length)``
pairs, both in feature-map rows, stored as ``(n, 2)`` float arrays.

Stage 1 mean-pools the feature map into ``seq_len // stride`` blocks, gives
each block a window of neighbouring blocks, and runs a shared projection +
ReLU followed by per-scale score and offset heads. Stage 2 works on the
row-encoded map (the exemplar encoder applied to every row): each stage-1
proposal is max-pooled into a fixed number of bins plus one context bin per
side, the refinement heads read a projection of all bins, and ``f(R_i)`` is
the shared embedding of the mean interior bin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffmath import ContractError, ParamStore, linear, linear_backward, relu, relu_backward, softmax


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 32
    seq_len: int = 96
    stride: int = 8
    scales: tuple[float, ...] = (2, 4, 8, 16, 32, 64)
    context: int = 4  # neighbouring blocks on each side seen by stage 1
    hidden: int = 64
    bins: int = 4
    embed_dim: int = 64
    # width of the pooled context bin on each side, relative to segment length
    context_ratio: float = 0.25

    @property
    def pooled_bins(self) -> int:
        return self.bins + (2 if self.context_ratio > 0 else 0)

    @property
    def positions(self) -> int:
        return self.seq_len // self.stride

    @property
    def num_anchors(self) -> int:
        return self.positions * len(self.scales)

    @property
    def context_dim(self) -> int:
        return (2 * self.context + 1) * self.feature_dim


def init_proposal_params(store: ParamStore, dims: ModelDims, rng: np.random.Generator) -> None:
    s2 = 2 * len(dims.scales)
    h, e = dims.hidden, dims.embed_dim
    store.add_glorot("s1.proj.W", dims.context_dim, h, rng)
    store.add("s1.proj.b", np.zeros(h))
    store.add_glorot("s1.score.W", h, s2, rng)
    store.add("s1.score.b", np.zeros(s2))
    store.add_glorot("s1.offset.W", h, s2, rng)
    store.add("s1.offset.b", np.zeros(s2))
    store.add_glorot("s2.proj.W", dims.pooled_bins * h, h, rng)
    store.add("s2.proj.b", np.zeros(h))
    store.add_glorot("s2.score.W", h, 2, rng)
    store.add("s2.score.b", np.zeros(2))
    store.add_glorot("s2.offset.W", h, 2, rng)
    store.add("s2.offset.b", np.zeros(2))


# ---------------------------------------------------------------------------
# geometry


def generate_anchors(seq_len: int, scales, stride: int = 8) -> np.ndarray:
    """Anchors at every stride-block centre for every scale, position-major."""
    scales = [float(s) for s in scales]
    if not scales or min(scales) <= 0:
        raise ContractError("anchor scales must be positive")
    if seq_len < stride:
        raise ContractError("sequence shorter than one stride block")
    centers = np.arange(seq_len // stride) * stride + stride / 2.0
    c = np.repeat(centers, len(scales))
    length = np.tile(np.array(scales), len(centers))
    return np.stack([c, length], axis=1)


def to_segments(anchors: np.ndarray, seq_len: float | None = None) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    seg = np.stack([a[:, 0] - a[:, 1] / 2, a[:, 0] + a[:, 1] / 2], axis=1)
    return seg if seq_len is None else clip_segments(seg, seq_len)


def to_anchors(segments: np.ndarray) -> np.ndarray:
    s = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    return np.stack([(s[:, 0] + s[:, 1]) / 2, s[:, 1] - s[:, 0]], axis=1)


# decoded segments are never shorter than this
MIN_LENGTH = 1e-3


def clip_segments(segments: np.ndarray, seq_len: float) -> np.ndarray:
    s = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    start = np.clip(s[:, 0], 0.0, seq_len - MIN_LENGTH)
    end = np.clip(s[:, 1], start + MIN_LENGTH, seq_len)
    return np.stack([start, end], axis=1)


def tiou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    return float(inter / (max(a[1], b[1]) - min(a[0], b[0])))


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    union = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    return np.where(inter > 0, np.maximum(inter, 0.0) / union, 0.0)


def encode_offsets(gt, anchor) -> np.ndarray:
    """Regression targets ``(dc, dl)`` of segments ``gt`` w.r.t. ``anchor``.

    Accepts one pair each or aligned ``(n, 2)`` arrays.
    """
    g = to_anchors(gt)
    a = np.asarray(anchor, dtype=np.float64).reshape(-1, 2)
    if np.any(g[:, 1] <= 0) or np.any(a[:, 1] <= 0):
        raise ContractError("segment and anchor lengths must be positive")
    out = np.stack([(g[:, 0] - a[:, 0]) / a[:, 1], np.log(g[:, 1] / a[:, 1])], axis=1)
    return out[0] if np.ndim(gt) == 1 else out


def decode_offsets(anchor, offsets, seq_len: float | None = None) -> np.ndarray:
    a = np.asarray(anchor, dtype=np.float64).reshape(-1, 2)
    o = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    center = a[:, 0] + o[:, 0] * a[:, 1]
    # exp overflow guard; anything this long is clipped anyway
    length = a[:, 1] * np.exp(np.minimum(o[:, 1], 50.0))
    out = to_segments(np.stack([center, length], axis=1), seq_len)
    return out[0] if np.ndim(offsets) == 1 else out


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class StageOneOutput:
    logits: np.ndarray  # (A, 2) background/foreground
    offsets: np.ndarray  # (A, 2)
    cache: tuple

    @property
    def scores(self) -> np.ndarray:
        return softmax(self.logits)[:, 1]


def block_context(features: np.ndarray, dims: ModelDims) -> np.ndarray:
    t, d = features.shape
    if d != dims.feature_dim or t != dims.seq_len:
        raise ContractError(f"feature map {features.shape} does not match ({dims.seq_len}, {dims.feature_dim})")
    p = dims.positions
    blocks = features[: p * dims.stride].reshape(p, dims.stride, d).mean(axis=1)
    k = dims.context
    padded = np.zeros((p + 2 * k, d))
    padded[k : k + p] = blocks
    return np.concatenate([padded[i : i + p] for i in range(2 * k + 1)], axis=1)


def stage1_forward(features: np.ndarray, params: ParamStore, dims: ModelDims) -> StageOneOutput:
    ctx = block_context(np.asarray(features, dtype=np.float64), dims)
    pre = linear(ctx, params["s1.proj.W"], params["s1.proj.b"])
    h = relu(pre)
    n = dims.num_anchors
    logits = linear(h, params["s1.score.W"], params["s1.score.b"]).reshape(n, 2)
    offsets = linear(h, params["s1.offset.W"], params["s1.offset.b"]).reshape(n, 2)
    return StageOneOutput(logits, offsets, (ctx, pre, h))


def stage1_backward(out: StageOneOutput, d_logits, d_offsets, params: ParamStore) -> None:
    ctx, pre, h = out.cache
    p = h.shape[0]
    dh = np.zeros_like(h)
    for head, grad in (("s1.score", d_logits), ("s1.offset", d_offsets)):
        g = np.asarray(grad, dtype=np.float64).reshape(p, -1)
        d_in, dw, db = linear_backward(h, params[f"{head}.W"], g)
        params.accumulate(f"{head}.W", dw)
        params.accumulate(f"{head}.b", db)
        dh += d_in
    dpre = relu_backward(pre, dh)
    _, dw, db = linear_backward(ctx, params["s1.proj.W"], dpre)
    params.accumulate("s1.proj.W", dw)
    params.accumulate("s1.proj.b", db)


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class SampledTargets:
    indices: np.ndarray  # sampled candidate indices, positives first
    labels: np.ndarray  # 1 foreground, 0 background
    matched_gt: np.ndarray  # best GT index per sampled candidate (-1 for negatives)
    reg_targets: np.ndarray  # (n_pos, 2) for the positive prefix

    @property
    def num_pos(self) -> int:
        return int(self.labels.sum())


def label_and_sample(
    candidates: np.ndarray,
    gts: np.ndarray,
    pos_tiou: float,
    neg_tiou: float,
    batch_size: int,
    pos_fraction: float,
    rng: np.random.Generator,
    neg_floor: float = 0.0,
    force_best: bool = True,
) -> SampledTargets:
    """Label candidates by tIoU against ground truth and draw a balanced batch.

    Positives have tIoU >= ``pos_tiou`` with some GT; the best candidate for
    each GT is forced positive. Negatives have max tIoU in
    ``[neg_floor, neg_tiou)``. ``candidates`` and ``gts`` are segments.
    """
    if not 0.0 <= neg_floor <= neg_tiou <= pos_tiou <= 1.0:
        raise ContractError("thresholds must satisfy 0 <= neg_floor <= neg_tiou <= pos_tiou <= 1")
    cands = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts):
        iou = tiou_matrix(cands, gts)
        best_iou = iou.max(axis=1)
        best_gt = iou.argmax(axis=1)
        pos = best_iou >= pos_tiou
        if force_best:
            pos[iou.argmax(axis=0)] = True
    else:
        best_iou = np.zeros(len(cands))
        best_gt = np.full(len(cands), -1)
        pos = np.zeros(len(cands), dtype=bool)
    neg = (best_iou < neg_tiou) & (best_iou >= neg_floor) & ~pos
    if not neg.any():
        raise ContractError("no negative candidates available")
    pos_idx, neg_idx = np.flatnonzero(pos), np.flatnonzero(neg)
    n_pos = min(len(pos_idx), int(round(batch_size * pos_fraction)))
    n_neg = min(len(neg_idx), batch_size - n_pos)
    pos_pick = np.sort(rng.choice(pos_idx, size=n_pos, replace=False)) if n_pos else pos_idx[:0]
    neg_pick = np.sort(rng.choice(neg_idx, size=n_neg, replace=False))
    indices = np.concatenate([pos_pick, neg_pick]).astype(np.int64)
    labels = np.concatenate([np.ones(n_pos, np.int64), np.zeros(n_neg, np.int64)])
    matched = np.concatenate([best_gt[pos_pick], np.full(n_neg, -1)]).astype(np.int64)
    if n_pos:
        reg = encode_offsets(gts[best_gt[pos_pick]], to_anchors(cands[pos_pick]))
    else:
        reg = np.zeros((0, 2))
    return SampledTargets(indices, labels, matched, reg.reshape(-1, 2))


# ---------------------------------------------------------------------------
# SoI pooling


def segment_rows(segment, seq_len: int) -> tuple[int, int]:
    """Integer row range covered by a segment; at least one row long."""
    start = min(max(math.floor(segment[0]), 0), seq_len)
    end = min(max(math.ceil(segment[1]), 0), seq_len)
    if end - start < 1:
        end = min(seq_len, start + 1)
        start = end - 1
    return start, end


def bin_bounds(start: int, end: int, bins: int) -> list[tuple[int, int]]:
    length = end - start
    out = []
    for i in range(bins):
        lo = start + (i * length) // bins
        hi = start + ((i + 1) * length) // bins
        out.append((lo, max(hi, lo + 1)))
    return out


def soi_pool(features: np.ndarray, segment, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool the rows under ``segment`` into ``bins`` per-channel maxima.

    Returns the pooled ``(bins, D)`` array and the row index each output was
    taken from, which the backward pass routes gradient to.
    """
    if bins < 1:
        raise ContractError("bins must be positive")
    t, d = features.shape
    start, end = segment_rows(segment, t)
    pooled = np.empty((bins, d))
    argrows = np.empty((bins, d), dtype=np.int64)
    cols = np.arange(d)
    for i, (lo, hi) in enumerate(bin_bounds(start, end, bins)):
        window = features[lo:hi]
        arg = window.argmax(axis=0)
        pooled[i] = window[arg, cols]
        argrows[i] = lo + arg
    return pooled, argrows


def soi_pool_backward(argrows: np.ndarray, grad_out: np.ndarray, seq_len: int) -> np.ndarray:
    bins, d = grad_out.shape
    grad = np.zeros((seq_len, d))
    np.add.at(grad, (argrows.reshape(-1), np.tile(np.arange(d), bins)), grad_out.reshape(-1))
    return grad


def pool_segments(features: np.ndarray, segments: np.ndarray, bins: int,
                  context_ratio: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """SoI features for every segment, shape ``(n, pooled_bins, D)``.

    With ``context_ratio > 0`` one extra bin is max-pooled on each side of
    the segment (left, interior bins, right), each ``context_ratio`` times the
    segment length wide; context falling outside the map pools to zeros and
    records argmax row -1. Also returns the argmax rows for the backward pass.
    """
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    t, d = features.shape
    extra = 2 if context_ratio > 0 else 0
    out = np.zeros((len(segs), bins + extra, d))
    rows = np.full((len(segs), bins + extra, d), -1, dtype=np.int64)
    lo = extra // 2
    for i, (s, e) in enumerate(segs):
        out[i, lo : lo + bins], rows[i, lo : lo + bins] = soi_pool(features, (s, e), bins)
        if extra:
            width = max(context_ratio * (e - s), 1.0)
            if s > 0:
                out[i, :1], rows[i, :1] = soi_pool(features, (max(0.0, s - width), s), 1)
            if e < t:
                out[i, -1:], rows[i, -1:] = soi_pool(features, (e, min(float(t), e + width)), 1)
    return out, rows


def pool_segments_backward(argrows: np.ndarray, grad_out: np.ndarray, seq_len: int) -> np.ndarray:
    d = grad_out.shape[-1]
    rows = argrows.reshape(-1)
    cols = np.broadcast_to(np.arange(d), argrows.shape).reshape(-1)
    valid = rows >= 0
    grad = np.zeros((seq_len, d))
    np.add.at(grad, (rows[valid], cols[valid]), grad_out.reshape(-1)[valid])
    return grad


def pool_margin(features: np.ndarray, argrows: np.ndarray) -> float:
    """Smallest gap between a positive pooled maximum and any other value in
    its column (conservative: all rows, not only the bin's). Keeps
    finite-difference probes away from argmax switches."""
    valid = argrows >= 0
    if not valid.any():
        return math.inf
    cols = np.broadcast_to(np.arange(features.shape[1]), argrows.shape)[valid]
    rows = argrows[valid]
    top = features[rows, cols]
    keep = top > 0
    if not keep.any():
        return math.inf
    rows, cols, top = rows[keep], cols[keep], top[keep]
    gaps = np.abs(top[None, :] - features[:, cols])
    gaps[rows, np.arange(len(top))] = np.inf
    return float(gaps.min())


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class StageTwoOutput:
    logits: np.ndarray  # (n, 2)
    offsets: np.ndarray  # (n, 2)
    features: np.ndarray  # (n, embed_dim), f(R_i)
    cache: tuple

    @property
    def scores(self) -> np.ndarray:
        return softmax(self.logits)[:, 1]


def interior_bins(dims: ModelDims) -> slice:
    lo = 1 if dims.pooled_bins > dims.bins else 0
    return slice(lo, lo + dims.bins)


def stage2_forward(pooled: np.ndarray, params: ParamStore, dims: ModelDims) -> StageTwoOutput:
    """Score, refine and embed pooled proposals.

    ``pooled`` is ``(n, pooled_bins, H)``, SoI-pooled from the row-encoded map.
    The heads read a projection of all bins, context included; ``f(R_i)`` is
    the shared embedding of the mean interior bin.
    """
    p = np.asarray(pooled, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != (dims.pooled_bins, dims.hidden):
        raise ContractError(f"pooled shape {p.shape} is not (n, {dims.pooled_bins}, {dims.hidden})")
    x = p.reshape(len(p), -1)
    pre1 = linear(x, params["s2.proj.W"], params["s2.proj.b"])
    h = relu(pre1)
    logits = linear(h, params["s2.score.W"], params["s2.score.b"])
    offsets = linear(h, params["s2.offset.W"], params["s2.offset.b"])
    inner = p[:, interior_bins(dims)].mean(axis=1)
    pre2 = linear(inner, params["embed.W"], params["embed.b"])
    return StageTwoOutput(logits, offsets, relu(pre2), (p, x, pre1, h, inner, pre2, dims))


def stage2_backward(out: StageTwoOutput, d_logits, d_offsets, d_features, params: ParamStore) -> np.ndarray:
    """Accumulate parameter gradients; returns the gradient w.r.t. ``pooled``."""
    p, x, pre1, h, inner, pre2, dims = out.cache
    dh = np.zeros_like(h)
    for head, grad in (("s2.score", d_logits), ("s2.offset", d_offsets)):
        if grad is None:
            continue
        d_in, dw, db = linear_backward(h, params[f"{head}.W"], grad)
        params.accumulate(f"{head}.W", dw)
        params.accumulate(f"{head}.b", db)
        dh += d_in
    dx, dw, db = linear_backward(x, params["s2.proj.W"], relu_backward(pre1, dh))
    params.accumulate("s2.proj.W", dw)
    params.accumulate("s2.proj.b", db)
    d_pooled = dx.reshape(p.shape)
    if d_features is not None:
        d_inner, dw, db = linear_backward(inner, params["embed.W"], relu_backward(pre2, d_features))
        params.accumulate("embed.W", dw)
        params.accumulate("embed.b", db)
        d_pooled[:, interior_bins(dims)] += d_inner[:, None, :] / dims.bins
    return d_pooled


# ---------------------------------------------------------------------------
# suppression


def nms(segments: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy temporal NMS; returns kept indices in descending score order.

    Ties in score go to the earlier start, then the smaller index.
    """
    segs = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ContractError("nms requires finite scores")
    order = np.lexsort((np.arange(len(segs)), segs[:, 0], -scores))
    keep = []
    alive = np.ones(len(segs), dtype=bool)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        rest = rest[alive[rest]]
        if len(rest):
            overlap = tiou_matrix(segs[i], segs[rest])[0]
            alive[rest[overlap > iou_threshold]] = False
    return np.array(keep, dtype=np.int64)
