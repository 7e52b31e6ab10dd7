import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpad.container import ChecksumError, HeaderError, PayloadError
from fpad.synthcorpus import (ConfigError, CorpusConfig, GenerationError, actionness_direction, bias_direction,
                              build_catalog, generate_corpus, load_corpus, save_corpus, synth_exemplar,
                              synth_untrimmed)


def _strip(cfg, vectors):
    # undo the shared actionness shift to recover the raw construction
    return vectors - cfg.actionness * actionness_direction(cfg)


def test_seed_is_mandatory():
    with pytest.raises(ConfigError) as err:
        CorpusConfig.from_dict({"num_classes": 20})
    assert err.value.field == "seed"
    with pytest.raises(TypeError):
        CorpusConfig()


@pytest.mark.parametrize("field,value", [("sigma_clip", -0.1), ("frame_rate_bias", -1.0),
                                         ("num_classes", 5), ("rho", 1.5), ("visible_fraction", 2.0)])
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError) as err:
        CorpusConfig(seed=0, **{field: value})
    assert err.value.field == field


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        CorpusConfig.from_dict({"seed": 0, "sigma": 0.1})


def test_catalog_deterministic():
    cfg = CorpusConfig(seed=4, num_classes=30)
    a, b = build_catalog(cfg), build_catalog(cfg)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    np.testing.assert_array_equal(a.pretrain_visible, b.pretrain_visible)


def test_rho_zero_orthogonal_to_pretraining_span():
    cfg = CorpusConfig(seed=1, num_classes=30, visible_fraction=0.2, rho=0.0)
    cat = build_catalog(cfg)
    protos, pre = _strip(cfg, cat.prototypes), _strip(cfg, cat.pretrain_prototypes)
    hidden = protos[cat.hidden_ids]
    assert np.abs(hidden @ pre.T).max() < 1e-9


def test_rho_one_equals_pretraining_prototype():
    cfg = CorpusConfig(seed=1, num_classes=30, visible_fraction=0.2, rho=1.0)
    cat = build_catalog(cfg)
    pre = cat.pretrain_prototypes
    for i in cat.hidden_ids:
        assert np.min(np.linalg.norm(pre - cat.prototypes[i], axis=1)) < 1e-9


def test_visible_classes_coincide_with_pretraining():
    cfg = CorpusConfig(seed=2, num_classes=20)
    cat = build_catalog(cfg)
    assert all(cat.rho[i] == 1.0 for i in cat.visible_ids)
    for i in cat.visible_ids:
        assert np.min(np.linalg.norm(cat.pretrain_prototypes - cat.prototypes[i], axis=1)) == 0.0


def test_intermediate_rho_is_correlation_to_nearest():
    cfg = CorpusConfig(seed=3, num_classes=30, visible_fraction=0.2, rho=0.6)
    cat = build_catalog(cfg)
    protos, pre = _strip(cfg, cat.prototypes), _strip(cfg, cat.pretrain_prototypes)
    for i in cat.hidden_ids:
        cos = pre @ protos[i] / (np.linalg.norm(pre, axis=1) * np.linalg.norm(protos[i]))
        assert cos.max() == pytest.approx(0.6, abs=1e-9)


def test_catalog_rejects_too_many_novel():
    cfg = CorpusConfig(seed=0, num_classes=10, visible_fraction=0.5)
    with pytest.raises(ConfigError):
        build_catalog(cfg, n_novel=6)
    with pytest.raises(ConfigError):
        build_catalog(cfg, n_novel=10)


def test_default_catalog_separable():
    cfg = CorpusConfig(seed=0)
    assert build_catalog(cfg).min_pairwise_distance() >= 4 * cfg.sigma_clip


def test_exemplar_noise_free_equals_prototype():
    cfg = CorpusConfig(seed=0, num_classes=10, sigma_clip=0.0, frame_rate_bias=0.0)
    cat = build_catalog(cfg)
    clip = synth_exemplar(cat, 3, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(clip.feature, cat.prototypes[3])
    assert clip.duration > 0


def test_exemplar_bias_norm():
    cfg = CorpusConfig(seed=0, num_classes=10, sigma_clip=0.0, frame_rate_bias=1.0)
    cat = build_catalog(cfg)
    clip = synth_exemplar(cat, 2, cfg, np.random.default_rng(0))
    assert np.linalg.norm(clip.feature - cat.prototypes[2]) == pytest.approx(1.0, abs=1e-12)


def test_exemplar_deterministic_and_bad_class():
    cfg = CorpusConfig(seed=0, num_classes=10)
    cat = build_catalog(cfg)
    a = synth_exemplar(cat, 1, cfg, np.random.default_rng(9))
    b = synth_exemplar(cat, 1, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a.feature, b.feature)
    with pytest.raises(ConfigError):
        synth_exemplar(cat, 10, cfg, np.random.default_rng(0))


def test_untrimmed_single_segment_and_zero_background():
    cfg = CorpusConfig(seed=0, num_classes=10, segment_density=1, sigma_background=0.0)
    cat = build_catalog(cfg)
    seq = synth_untrimmed(cat, [4], cfg, np.random.default_rng(1))
    assert len(seq.segments) == 1
    (s, e, c), = seq.segments
    assert c == 4
    mask = np.ones(seq.length, bool)
    mask[s:e] = False
    assert np.all(seq.features[mask] == 0.0)


def test_untrimmed_closure():
    cfg = CorpusConfig(seed=0, num_classes=10, segment_density=3, min_gap=2)
    cat = build_catalog(cfg)
    seq = synth_untrimmed(cat, [1, 7], cfg, np.random.default_rng(2))
    assert seq.classes <= {1, 7}


def test_untrimmed_has_no_bias():
    cfg = CorpusConfig(seed=0, num_classes=10, segment_density=1, sigma_clip=0.0, frame_rate_bias=3.0)
    cat = build_catalog(cfg)
    seq = synth_untrimmed(cat, [5], cfg, np.random.default_rng(3))
    s, e, _ = seq.segments[0]
    np.testing.assert_array_equal(seq.features[s:e], np.broadcast_to(cat.prototypes[5], (e - s, cfg.feature_dim)))


def test_untrimmed_density_too_high():
    cfg = CorpusConfig(seed=0, num_classes=10, seq_len=40, segment_density=4, min_segment_len=16,
                       max_segment_len=20)
    with pytest.raises(GenerationError):
        synth_untrimmed(build_catalog(cfg), [0], cfg, np.random.default_rng(0), max_retries=5)
    with pytest.raises(ConfigError):
        synth_untrimmed(build_catalog(cfg), [], cfg, np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(0, 4), st.floats(0.0, 1.0))
def test_segments_within_bounds_and_no_same_class_overlap(seed, density, gap, second):
    cfg = CorpusConfig(seed=seed % 1000, num_classes=10, segment_density=density, min_gap=gap, max_segment_len=24,
                       sequences_per_class=2, exemplars_per_class=1, second_class_prob=second)
    corpus = generate_corpus(cfg)
    for seq in corpus.sequences:
        assert len(seq.segments) >= 1
        for s, e, c in seq.segments:
            assert 0 <= s < e <= cfg.seq_len
        segs = seq.segments
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                if segs[i][2] == segs[j][2]:
                    assert segs[i][1] <= segs[j][0] or segs[j][1] <= segs[i][0]


def test_bias_gap_converges_to_beta_u():
    # exemplar mean minus in-segment mean -> beta * u as sigma -> 0
    cfg = CorpusConfig(seed=5, num_classes=10, sigma_clip=1e-3, sigma_background=1e-3, frame_rate_bias=0.5,
                       exemplars_per_class=40, sequences_per_class=10)
    corpus = generate_corpus(cfg)
    target = cfg.frame_rate_bias * bias_direction(cfg)
    for c in range(3):
        ex = np.mean([corpus.exemplars[i].feature for i in corpus.exemplar_indices(c)], axis=0)
        rows = np.concatenate([seq.features[s:e] for seq in corpus.sequences for s, e, k in seq.segments if k == c])
        np.testing.assert_allclose(ex - rows.mean(0), target, atol=1e-3)
    np.testing.assert_allclose(np.linalg.norm(corpus.bias_direction), 1.0)


def test_corpus_deterministic():
    cfg = CorpusConfig(seed=8, num_classes=10, exemplars_per_class=2, sequences_per_class=2)
    a, b = generate_corpus(cfg), generate_corpus(cfg)
    for x, y in zip(a.sequences, b.sequences):
        np.testing.assert_array_equal(x.features, y.features)
        assert x.segments == y.segments


# ---------------------------------------------------------------------------
# persistence


def _assert_same(a, b):
    assert a.config == b.config
    np.testing.assert_array_equal(a.catalog.prototypes, b.catalog.prototypes)
    np.testing.assert_array_equal(a.catalog.pretrain_prototypes, b.catalog.pretrain_prototypes)
    np.testing.assert_array_equal(a.catalog.pretrain_visible, b.catalog.pretrain_visible)
    assert a.catalog.rho == b.catalog.rho and a.catalog.names == b.catalog.names
    np.testing.assert_array_equal(a.bias_direction, b.bias_direction)
    for x, y in zip(a.exemplars, b.exemplars, strict=True):
        assert x.class_id == y.class_id and x.duration == y.duration
        np.testing.assert_array_equal(x.feature, y.feature)
    for x, y in zip(a.sequences, b.sequences, strict=True):
        np.testing.assert_array_equal(x.features, y.features)
        assert x.segments == y.segments and x.frame_rate == y.frame_rate and x.stride == y.stride


def test_round_trip_bit_exact(small_corpus, tmp_path):
    path = tmp_path / "c.fpad"
    save_corpus(small_corpus, path)
    _assert_same(small_corpus, load_corpus(path))
    # rerun of the same config gives identical bytes
    save_corpus(generate_corpus(small_corpus.config), tmp_path / "d.fpad")
    assert path.read_bytes() == (tmp_path / "d.fpad").read_bytes()


def test_file_layout(small_corpus, tmp_path):
    path = tmp_path / "c.fpad"
    save_corpus(small_corpus, path)
    raw = path.read_bytes()
    assert raw.startswith(b"FPADCORP1")


def test_corrupt_magic(small_corpus, tmp_path):
    path = tmp_path / "c.fpad"
    save_corpus(small_corpus, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(HeaderError):
        load_corpus(path)


def test_truncated(small_corpus, tmp_path):
    path = tmp_path / "c.fpad"
    save_corpus(small_corpus, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 1000])
    with pytest.raises(PayloadError):
        load_corpus(path)


def test_checksum_mismatch(small_corpus, tmp_path):
    path = tmp_path / "c.fpad"
    save_corpus(small_corpus, path)
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_corpus(path)
