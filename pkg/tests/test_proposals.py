import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpad.diffmath import ContractError, ParamStore, binary_score_loss, finite_diff_check
from fpad.proposals import (ModelDims, clip_segments, decode_offsets, encode_offsets, generate_anchors,
                            init_proposal_params, label_and_sample, nms, soi_pool, soi_pool_backward,
                            stage1_backward, stage1_forward, stage2_backward, stage2_forward, tiou,
                            tiou_matrix, to_segments)
from fpad.fewshot import init_encoder_params


# ---------------------------------------------------------------------------
# brute-force oracles


def oracle_tiou(a, b):
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    inter = max(0.0, hi - lo)
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def oracle_nms(segs, scores, thr):
    order = sorted(range(len(segs)), key=lambda i: (-scores[i], segs[i][0], i))
    suppressed = set()
    keep = []
    for i in order:
        if i in suppressed:
            continue
        keep.append(i)
        for j in range(len(segs)):
            if j != i and j not in suppressed and j not in keep and oracle_tiou(segs[i], segs[j]) > thr:
                suppressed.add(j)
    return keep


def oracle_soi(features, start, end, bins):
    # row k of the segment goes to bin ceil((k+1) * bins / L) - 1; bins that
    # receive no row fall back to the single row at their lower boundary
    length = end - start
    members = [[] for _ in range(bins)]
    for k in range(length):
        members[math.ceil((k + 1) * bins / length) - 1].append(start + k)
    out = []
    for i, rows in enumerate(members):
        if not rows:
            rows = [start + (i * length) // bins]
        out.append(np.max(features[rows], axis=0))
    return np.array(out)


# ---------------------------------------------------------------------------
# anchors and geometry


def test_anchor_count_default():
    anchors = generate_anchors(96, (2, 4, 8, 16, 32, 64), 8)
    positions = [(c, l) for c in range(4, 96, 8) for l in (2, 4, 8, 16, 32, 64)]
    assert len(anchors) == 72
    np.testing.assert_array_equal(anchors, np.array(positions, dtype=float))


def test_single_anchor():
    np.testing.assert_array_equal(generate_anchors(8, [4], 8), [[4.0, 4.0]])
    with pytest.raises(ContractError):
        generate_anchors(96, [0, 2])


def test_clipped_anchors_non_degenerate():
    seg = to_segments(generate_anchors(96, (2, 64, 200), 8), 96)
    assert np.all(seg[:, 0] < seg[:, 1])
    assert np.all(seg >= 0) and np.all(seg <= 96)


def test_tiou_examples():
    assert tiou((0, 10), (0, 10)) == 1.0
    assert tiou((0, 10), (12, 20)) == 0.0
    assert tiou((0, 10), (5, 15)) == pytest.approx(1 / 3)


def test_offsets_examples():
    anchor = (50.0, 20.0)
    seg = (40.0, 80.0)  # centre 60, length 40
    np.testing.assert_allclose(encode_offsets(seg, anchor), [0.5, math.log(2)])
    np.testing.assert_allclose(encode_offsets((40.0, 60.0), anchor), [0.0, 0.0])
    np.testing.assert_allclose(decode_offsets(anchor, (0.5, math.log(2))), [40.0, 80.0])
    np.testing.assert_allclose(decode_offsets(anchor, (0.0, 0.0)), [40.0, 60.0])
    assert decode_offsets(anchor, (1e6, 0.0), 96)[1] == 96.0
    with pytest.raises(ContractError):
        encode_offsets((5.0, 5.0), anchor)


def test_round_trip_10k():
    rng = np.random.default_rng(0)
    n = 10000
    start = rng.uniform(-50, 150, n)
    gt = np.stack([start, start + rng.uniform(0.1, 100, n)], 1)
    anchors = np.stack([rng.uniform(-50, 150, n), rng.uniform(0.5, 100, n)], 1)
    back = decode_offsets(anchors, encode_offsets(gt, anchors))
    assert np.abs(back - gt).max() < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100), st.floats(0.01, 100), st.floats(-100, 100), st.floats(0.01, 100))
def test_tiou_properties(a0, al, b0, bl):
    a, b = (a0, a0 + al), (b0, b0 + bl)
    v = tiou(a, b)
    assert v == pytest.approx(tiou(b, a), abs=1e-12)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(oracle_tiou(a, b), abs=1e-9)
    assert tiou(a, a) == 1.0
    if v == 1.0:
        assert a == pytest.approx(b)


def test_tiou_matrix_matches_scalar():
    rng = np.random.default_rng(1)
    a = np.sort(rng.uniform(0, 50, (20, 2)), 1) + [0, 0.1]
    b = np.sort(rng.uniform(0, 50, (15, 2)), 1) + [0, 0.1]
    m = tiou_matrix(a, b)
    for i in range(20):
        for j in range(15):
            assert m[i, j] == pytest.approx(oracle_tiou(a[i], b[j]), abs=1e-12)


# ---------------------------------------------------------------------------
# NMS


def test_nms_examples():
    np.testing.assert_array_equal(nms([[0, 10]], [0.5], 0.7), [0])
    np.testing.assert_array_equal(nms([[0, 10], [1, 10]], [0.9, 0.8], 0.7), [0])
    np.testing.assert_array_equal(nms([[0, 1], [2, 3], [4, 5]], [0.1, 0.9, 0.5], 0.7), [1, 2, 0])


def test_nms_tie_break():
    # equal scores: earlier start first, then smaller index
    np.testing.assert_array_equal(nms([[5, 9], [0, 4], [0, 4.5]], [0.5, 0.5, 0.5], 0.99), [1, 2, 0])
    np.testing.assert_array_equal(nms([[0, 4], [0, 4]], [0.5, 0.5], 0.7), [0])


def test_nms_matches_brute_force_1000():
    rng = np.random.default_rng(2)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(1, 33))
        start = rng.integers(0, 40, n).astype(float)
        segs = np.stack([start, start + rng.integers(1, 20, n)], 1)
        # coarse scores so ties occur
        scores = rng.integers(0, 6, n) / 5.0 if trial % 2 else rng.random(n)
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        got = nms(segs, scores, thr)
        want = oracle_nms(segs.tolist(), scores.tolist(), thr)
        mismatches += list(got) != want
        kept = segs[got]
        assert all(oracle_tiou(kept[i], kept[j]) <= thr for i in range(len(kept)) for j in range(i))
    assert mismatches == 0


def test_nms_rejects_non_finite():
    with pytest.raises(ContractError):
        nms([[0, 1]], [float("nan")], 0.7)


# ---------------------------------------------------------------------------
# SoI pooling


def test_soi_examples():
    f = np.array([[1.0], [5.0], [3.0], [2.0]])
    out, rows = soi_pool(f, (0, 4), 2)
    np.testing.assert_array_equal(out, [[5.0], [3.0]])
    np.testing.assert_array_equal(rows, [[1], [2]])
    ident, _ = soi_pool(np.arange(12.0).reshape(6, 2), (1, 5), 4)
    np.testing.assert_array_equal(ident, np.arange(12.0).reshape(6, 2)[1:5])
    const, _ = soi_pool(np.full((10, 3), 2.5), (2, 9), 3)
    assert np.all(const == 2.5)


def test_soi_short_segment_expanded():
    f = np.arange(10.0).reshape(10, 1)
    out, _ = soi_pool(f, (3.2, 3.4), 2)
    assert out.shape == (2, 1) and np.all(out == 3.0)
    with pytest.raises(ContractError):
        soi_pool(f, (0, 4), 0)


def test_soi_matches_brute_force_500():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(500):
        t, d = int(rng.integers(4, 30)), int(rng.integers(1, 6))
        feats = rng.standard_normal((t, d))
        bins = int(rng.integers(1, 7))
        start = int(rng.integers(0, t))
        end = int(rng.integers(start + 1, t + 1))
        got, _ = soi_pool(feats, (start, end), bins)
        mismatches += not np.array_equal(got, oracle_soi(feats, start, end, bins))
    assert mismatches == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_soi_backward_routes_to_argmax(seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((12, 3))
    out, rows = soi_pool(feats, (1, 11), 3)
    g = rng.standard_normal(out.shape)
    grad = soi_pool_backward(rows, g, 12)
    touched = {(int(r), c) for (b, c), r in np.ndenumerate(rows)}
    for (r, c), v in np.ndenumerate(grad):
        if (r, c) not in touched:
            assert v == 0.0
    assert grad.sum() == pytest.approx(g.sum())
    np.testing.assert_array_equal(feats[rows, np.arange(3)], out)


# ---------------------------------------------------------------------------
# target assignment


def test_single_gt_equal_to_anchor():
    cands = np.array([[0, 10], [20, 30], [40, 50]], float)
    t = label_and_sample(cands, [[20, 30]], 0.7, 0.3, 64, 0.5, np.random.default_rng(0))
    assert t.num_pos == 1 and t.indices[0] == 1
    np.testing.assert_allclose(t.reg_targets, [[0.0, 0.0]])


def test_forced_best_when_disjoint():
    cands = np.array([[0, 2], [10, 12], [30, 32]], float)
    t = label_and_sample(cands, [[3, 9]], 0.7, 0.3, 64, 0.5, np.random.default_rng(0))
    # no anchor overlaps, yet the best (first by argmax) is forced positive
    assert t.num_pos == 1


def test_balanced_batch_counts():
    rng = np.random.default_rng(0)
    pos = np.tile([[10.0, 20.0]], (40, 1)) + rng.uniform(-0.3, 0.3, (40, 2))
    neg = np.tile([[60.0, 70.0]], (50, 1)) + rng.uniform(-0.3, 0.3, (50, 2))
    t = label_and_sample(np.concatenate([pos, neg]), [[10, 20]], 0.7, 0.3, 64, 0.5, rng)
    assert (int(t.labels.sum()), int((t.labels == 0).sum())) == (32, 32)
    assert len(set(t.indices.tolist())) == 64


def test_pad_with_negatives():
    rng = np.random.default_rng(0)
    cands = np.concatenate([[[10.0, 20.0]] * 3, [[60.0, 70.0]] * 100])
    t = label_and_sample(cands, [[10, 20]], 0.7, 0.3, 64, 0.5, rng)
    assert t.num_pos == 3 and len(t.indices) == 64


def test_no_negatives_is_contract_error():
    with pytest.raises(ContractError):
        label_and_sample([[0, 10]], [[0, 10]], 0.7, 0.3, 4, 0.5, np.random.default_rng(0))
    with pytest.raises(ContractError):
        label_and_sample([[0, 10]], [[0, 10]], 0.3, 0.7, 4, 0.5, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# stage 1 / stage 2


def _params(dims, seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_encoder_params(store, dims, rng)
    init_proposal_params(store, dims, rng)
    return store


SMALL = ModelDims(feature_dim=4, seq_len=32, stride=8, scales=(2, 4, 8), context=1, hidden=5, bins=2,
                  embed_dim=3, context_ratio=0.25)


def test_stage1_zero_weights():
    params = _params(SMALL)
    for n in params.names():
        params[n][...] = 0.0
    out = stage1_forward(np.random.default_rng(0).standard_normal((32, 4)), params, SMALL)
    assert out.logits.shape == (SMALL.num_anchors, 2)
    np.testing.assert_allclose(out.scores, 0.5)
    assert np.all(out.offsets == 0.0)


def test_stage1_shape_error():
    with pytest.raises(ContractError):
        stage1_forward(np.zeros((30, 4)), _params(SMALL), SMALL)


def test_stage2_zero_weights_and_shape():
    params = _params(SMALL)
    pooled = np.random.default_rng(0).standard_normal((7, SMALL.pooled_bins, SMALL.hidden))
    out = stage2_forward(pooled, params, SMALL)
    assert out.features.shape == (7, SMALL.embed_dim)
    for n in params.names():
        params[n][...] = 0.0
    out = stage2_forward(pooled, params, SMALL)
    np.testing.assert_allclose(out.scores, 0.5)
    assert np.all(out.offsets == 0.0)
    with pytest.raises(ContractError):
        stage2_forward(pooled[:, :2], params, SMALL)


def _uniform(params, rng):
    for n in params.names():
        params[n][...] = rng.uniform(-1, 1, params[n].shape)


def test_stage1_gradients():
    rng = np.random.default_rng(4)
    params = _params(SMALL)
    _uniform(params, rng)
    feats = rng.standard_normal((32, 4))
    labels = rng.integers(0, 2, SMALL.num_anchors)
    target = rng.standard_normal((SMALL.num_anchors, 2))

    def loss_fn(p):
        out = stage1_forward(feats, p, SMALL)
        l1, g1 = binary_score_loss(out.logits, labels)
        diff = out.offsets - target
        stage1_backward(out, g1, diff, p)
        return l1 + 0.5 * float((diff ** 2).sum())

    rep = finite_diff_check(loss_fn, params, names=[n for n in params.names() if n.startswith("s1")])
    assert rep.passed, rep.failures()


def test_stage2_gradients():
    rng = np.random.default_rng(5)
    params = _params(SMALL)
    _uniform(params, rng)
    pooled = rng.standard_normal((6, SMALL.pooled_bins, SMALL.hidden))
    labels = rng.integers(0, 2, 6)
    w_off = rng.standard_normal((6, 2))
    w_feat = rng.standard_normal((6, SMALL.embed_dim))
    grads = {}

    def loss_fn(p):
        out = stage2_forward(pooled, p, SMALL)
        l1, g1 = binary_score_loss(out.logits, labels)
        grads["pooled"] = stage2_backward(out, g1, w_off, w_feat, p)
        return l1 + float((out.offsets * w_off).sum() + (out.features * w_feat).sum())

    names = [n for n in params.names() if n.startswith("s2") or n.startswith("embed")]
    rep = finite_diff_check(loss_fn, params, names=names)
    assert rep.passed, rep.failures()

    # gradient w.r.t. the pooled input
    base = pooled.copy()
    loss_fn(params)
    analytic = grads["pooled"].copy()
    h = 1e-6
    for idx in [(0, 0, 0), (3, 1, 2), (5, SMALL.pooled_bins - 1, 4)]:
        pooled[idx] = base[idx] + h
        up = loss_fn(params)
        pooled[idx] = base[idx] - h
        down = loss_fn(params)
        pooled[idx] = base[idx]
        assert analytic[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-7)
    params.zero_grad()


def test_forward_deterministic():
    params = _params(SMALL)
    feats = np.random.default_rng(0).standard_normal((32, 4))
    a, b = stage1_forward(feats, params, SMALL), stage1_forward(feats, params, SMALL)
    np.testing.assert_array_equal(a.logits, b.logits)
    np.testing.assert_array_equal(a.offsets, b.offsets)


def test_clip_segments_minimum_length():
    out = clip_segments([[96.0, 96.0], [-5.0, -1.0]], 96)
    assert np.all(out[:, 1] > out[:, 0])
