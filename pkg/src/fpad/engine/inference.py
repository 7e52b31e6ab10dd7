"""Two-step few-shot detection on one episode."""
from __future__ import annotations

import numpy as np

from ..diffmath import ParamStore
from ..episodes import Episode
from ..fewshot import assign_labels, encode_exemplar, encode_rows, similarity_matrix
from ..proposals import ModelDims, decode_offsets, generate_anchors, nms, pool_segments, stage1_forward, stage2_forward, to_anchors
from .config import TrainConfig
from .metrics import Detection
from .model import apply_transform, support_matrix


def detect(params: ParamStore, episode: Episode, config: TrainConfig, dims: ModelDims,
           proposal_threshold: float = 0.3, similarity_threshold: float = 0.0,
           transform=None, class_nms: bool = True) -> list[Detection]:
    """Detections for the episode query, labelled with episode labels.

    Stage-1 proposals go through NMS, are rescored and refined by stage 2, and
    each gets the episode label with the highest class-averaged similarity.
    Survivors of both thresholds are de-duplicated per label.
    """
    feats = apply_transform(episode.query.features, transform)
    t = dims.seq_len
    anchors = generate_anchors(t, dims.scales, dims.stride)
    s1 = stage1_forward(feats, params, dims)
    segs = decode_offsets(anchors, s1.offsets, t)
    keep = nms(segs, s1.scores, config.nms_threshold)[: config.test_top_k]
    props = segs[keep]

    enc_map, _ = encode_rows(feats, params)
    pooled, _ = pool_segments(enc_map, props, dims.bins, dims.context_ratio)
    s2 = stage2_forward(pooled, params, dims)
    refined = decode_offsets(to_anchors(props), s2.offsets, t)
    p_scores = s2.scores

    f_s, _ = encode_exemplar(support_matrix(episode, transform), params)
    sim, _ = similarity_matrix(f_s, s2.features)
    labels, s_scores = assign_labels(sim, episode.shots)

    mask = (p_scores >= proposal_threshold) & (s_scores >= similarity_threshold)
    idx = np.flatnonzero(mask)
    if class_nms and len(idx):
        kept = []
        for lab in np.unique(labels[idx]):
            members = idx[labels[idx] == lab]
            kept.extend(members[nms(refined[members], s_scores[members], config.nms_threshold)])
        idx = np.array(sorted(kept), dtype=np.int64)
    return [
        Detection(float(refined[i, 0]), float(refined[i, 1]), int(labels[i]), float(p_scores[i]), float(s_scores[i]))
        for i in idx
    ]
