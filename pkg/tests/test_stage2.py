import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptseg import stage2
from promptseg.errors import (ConfigError, DegenerateInputError,
                              DimensionError, NumericError)


def test_mask_pool_full_mask_is_global_mean():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((4, 4, 6))
    v = stage2.mask_pool(feats, np.ones((4, 4)))
    assert np.allclose(v, feats.reshape(-1, 6).mean(axis=0))


def test_mask_pool_single_pixel():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((4, 4, 6))
    mask = np.zeros((4, 4))
    mask[2, 3] = 1.0
    assert np.array_equal(stage2.mask_pool(feats, mask), feats[2, 3])


def test_mask_pool_two_pixaccording_scalar_oracle():
    feats = np.arange(16.0).reshape(2, 2, 4)
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    expect = (feats[0, 0] + feats[1, 1]) / 2.0
    assert np.array_equal(stage2.mask_pool(feats, mask), expect)


def test_mask_pool_soft_fallback_and_degenerate():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((2, 2, 3))
    soft = np.array([[0.4, 0.0], [0.0, 0.2]])
    v = stage2.mask_pool(feats, soft)
    expect = (feats[0, 0] * 0.4 + feats[1, 1] * 0.2) / 0.6
    assert np.allclose(v, expect)
    with pytest.raises(DegenerateInputError):
        stage2.mask_pool(feats, np.zeros((2, 2)))


def test_mask_pool_ignores_features_outside_mask():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((3, 3, 4))
    mask = np.zeros((3, 3))
    mask[0, :2] = 1.0
    base = stage2.mask_pool(feats, mask)
    feats2 = feats.copy()
    feats2[1:] = 99.0
    assert np.array_equal(base, stage2.mask_pool(feats2, mask))


def test_classify_stage2_closed_form():
    t1 = np.array([1.0, 0.0, 0.0, 0.0])
    t2 = np.array([0.0, 1.0, 0.0, 0.0])
    probs = stage2.classify_stage2(t1 * 2.5, np.stack([t1, t2]), tau2=1.0)
    e = np.e
    assert np.abs(probs - [e / (e + 1), 1 / (e + 1)]).max() < 1e-12
    assert abs(probs.sum() - 1.0) <= 1e-9


def test_classify_stage2_uniform_and_scale_invariant():
    rng = np.random.default_rng(4)
    v = rng.standard_normal(5)
    emb = np.stack([np.roll(np.eye(5)[0], i) for i in range(3)])
    # a constant vector has the same cosine to each one-hot class
    u = stage2.classify_stage2(np.full(5, 0.7), emb, tau2=0.5)
    assert np.abs(u - 1.0 / 3.0).max() < 1e-12
    a = stage2.classify_stage2(v, emb, tau2=0.3)
    b = stage2.classify_stage2(v * 17.0, emb, tau2=0.3)
    assert np.abs(a - b).max() <= 1e-12


def test_classify_stage2_errors():
    with pytest.raises(NumericError):
        stage2.classify_stage2(np.zeros(4), np.eye(4)[:2], tau2=1.0)
    with pytest.raises(ConfigError):
        stage2.classify_stage2(np.ones(4), np.eye(4)[:2], tau2=-1.0)


def test_ensemble_exponent_identities():
    p = np.array([0.5, 0.3, 0.2])        # two real classes + no-object
    p_hat = np.array([0.9, 0.1])
    lam1 = stage2.ensemble(p, p_hat, 1.0)
    assert np.allclose(lam1[:2] / lam1[:2].sum(), p[:2] / p[:2].sum())
    assert lam1[:2].argmax() == p[:2].argmax()
    lam0 = stage2.ensemble(p, p_hat, 0.0)
    assert np.allclose(lam0[:2] / lam0[:2].sum(), p_hat / p_hat.sum())
    assert lam0[:2].argmax() == p_hat.argmax()


def test_ensemble_worked_example():
    p = np.array([0.8, 0.15, 0.05])
    p_hat = np.array([0.2, 0.8])
    out = stage2.ensemble(p, p_hat, 0.65)
    unnorm = 0.8 ** 0.65 * 0.2 ** 0.35
    assert abs(unnorm - 0.4925) < 1e-4
    # renormalization keeps ratios of real classes
    assert abs(out[0] / out[1] - unnorm / (0.15 ** 0.65 * 0.8 ** 0.35)) < 1e-9


def test_ensemble_zero_probability_and_bounds():
    p = np.array([0.0, 0.9, 0.1])
    p_hat = np.array([0.5, 0.5])
    out = stage2.ensemble(p, p_hat, 0.65)
    assert out[0] == 0.0
    with pytest.raises(ConfigError):
        stage2.ensemble(p, p_hat, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.floats(0.0, 1.0))
def test_ensemble_monotone_before_renormalization(pk, qk, lam):
    base = pk ** lam * qk ** (1 - lam)
    up_p = (pk + 0.01) ** lam * qk ** (1 - lam)
    up_q = pk ** lam * (qk + 0.01) ** (1 - lam)
    assert up_p >= base and up_q >= base


def test_semantic_map_single_proposal():
    probs = np.array([[0.0, 0.0, 0.0, 1.0, 0.0]])  # one-hot on class 3 of 4
    masks = np.full((1, 3, 3), 0.9)
    labels = stage2.semantic_map(probs, masks)
    assert (labels == 3).all()


def test_semantic_map_disjoint_proposals():
    probs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    masks = np.zeros((2, 2, 2))
    masks[0, :, 0] = 0.95
    masks[1, :, 1] = 0.95
    labels = stage2.semantic_map(probs, masks)
    assert np.array_equal(labels, [[0, 1], [0, 1]])


def test_semantic_map_matches_per_pixel_oracle():
    rng = np.random.default_rng(5)
    r, k, h, w = 4, 3, 5, 6
    probs = rng.random((r, k + 1))
    masks = rng.random((r, h, w))
    labels = stage2.semantic_map(probs, masks)
    for y in range(h):
        for x in range(w):
            scores = [sum(probs[i, c] * masks[i, y, x] for i in range(r))
                      for c in range(k)]
            assert labels[y, x] == int(np.argmax(scores))


def test_semantic_map_class_subset():
    probs = np.array([[0.9, 0.05, 0.03, 0.02], [0.05, 0.9, 0.03, 0.02]])
    masks = np.stack([np.full((2, 2), 0.8), np.full((2, 2), 0.7)])
    full = stage2.semantic_map(probs, masks)
    assert (full == 0).all()
    sub = stage2.semantic_map(probs, masks, classes=[1, 2])
    assert (sub == 1).all()


def _mini_scene_set(n=40, **kw):
    from promptseg import scenes
    from promptseg.config import RunConfig
    cfg = RunConfig(train_count=n, data_seed=9, pretrain_epochs=2,
                    clip_channels=12, embed_dim=16, **kw)
    return cfg, [scenes.generate_scene(cfg, "train", i) for i in range(n)]


def test_pretrain_deterministic_and_frozen():
    from promptseg import textbank
    cfg, train = _mini_scene_set(12)
    vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim, seed=0)
    a = stage2.pretrain_frozen_encoder(train, table, vocab, cfg, seed=3)
    b = stage2.pretrain_frozen_encoder(train, table, vocab, cfg, seed=3)
    for key in a:
        assert np.array_equal(a[key].data, b[key].data), key
        assert not a[key].requires_grad
    with pytest.raises(ValueError):
        a["clip.c1.w"].data[0, 0] = 1.0  # frozen means frozen


def test_pretrain_empty_dataset_rejected():
    from promptseg import textbank
    cfg, _ = _mini_scene_set(1)
    vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim, seed=0)
    with pytest.raises(ConfigError):
        stage2.pretrain_frozen_encoder([], table, vocab, cfg)
