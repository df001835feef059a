import math

import numpy as np
import pytest

from conftest import random_episode
from oracles import head_oracle
from episeg.adapt import (
    AdaptedHead,
    TtaConfig,
    adam_step,
    adapt,
    apply_head,
    expand_one_shot,
    init_head,
    load_head,
    loo_loss,
    loo_loss_and_grads,
    paste_foreground,
    save_head,
    soft_copy,
)
from episeg.routing import HlsConfig, TooFewSupportsError, route
from episeg.self_support import SspConfig
from episeg.synthetic import SyntheticSpec, gen_synthetic


def _masks(rng, k, n):
    out = []
    for _ in range(k):
        m = (rng.random(n) < 0.5).astype(float)
        m[0], m[1] = 1.0, 0.0
        out.append(m)
    return out


# --- head forward ------------------------------------------------------------


def test_zero_init_head_is_identity(rng):
    head = init_head(6, TtaConfig(), seed=3)
    feat = rng.normal(size=(9, 6))
    out = apply_head(head, feat)
    assert out.tobytes() == feat.tobytes()


def test_m0_head_is_identity(rng):
    head = init_head(6, TtaConfig(variant="m0"))
    feat = rng.normal(size=(4, 6))
    assert apply_head(head, feat) is feat or np.array_equal(apply_head(head, feat), feat)
    assert head.n_params == 0


def test_head_matches_loop_oracle(rng):
    head = init_head(5, TtaConfig(hidden_dim=7), seed=0)
    head.W2 = rng.normal(size=(7, 5))
    head.b2 = rng.normal(size=5)
    head.b1 = rng.normal(size=7)
    feat = rng.normal(size=(6, 5))
    got = apply_head(head, feat)
    want = head_oracle(feat.tolist(), head.W1.tolist(), head.b1.tolist(), head.W2.tolist(), head.b2.tolist())
    assert np.allclose(got, want, atol=1e-5)


def test_parameter_count_budget():
    head = init_head(1024, TtaConfig(), seed=0)
    assert head.n_params == 2 * 1024 * 1024 + 1024 + 1024
    # comfortably inside a ~2.7% budget of a 304M-parameter backbone
    assert head.n_params < 0.027 * 304e6


# --- leave-one-out loss -------------------------------------------------------


def test_loo_loss_half_probability_is_ln2(rng):
    v = rng.normal(size=4)
    feats = [np.tile(v, (6, 1)) for _ in range(3)]  # identical rows -> zero margin
    masks = _masks(rng, 3, 6)
    head = init_head(4, TtaConfig(variant="m0"))
    assert loo_loss(feats, masks, head, kappa=10.0) == pytest.approx(math.log(2.0), abs=1e-9)


def test_loo_loss_small_on_separated_clusters(rng):
    mu_fg, mu_bg = np.full(8, 5.0), np.full(8, -5.0)
    mu_fg[0], mu_bg[0] = -5.0, 5.0
    feats, masks = [], _masks(rng, 3, 10)
    for m in masks:
        feats.append(np.where(m[:, None] > 0, mu_fg, mu_bg) + 0.01 * rng.normal(size=(10, 8)))
    head = init_head(8, TtaConfig(variant="m0"))
    assert loo_loss(feats, masks, head, kappa=10.0) < 0.01


def test_loo_needs_two(rng):
    head = init_head(4, TtaConfig())
    with pytest.raises(TooFewSupportsError):
        loo_loss([rng.normal(size=(5, 4))], [np.ones(5)], head, 10.0)


def test_gradients_match_finite_differences(rng):
    k, n, d = 3, 10, 6
    feats = [rng.normal(size=(n, d)) for _ in range(k)]
    masks = _masks(rng, k, n)
    cfg = TtaConfig(hidden_dim=5)
    head = init_head(d, cfg, seed=2)
    head.W2 = rng.normal(0, 0.1, size=head.W2.shape)
    head.b2 = rng.normal(0, 0.1, size=head.b2.shape)
    kappa = 5.0
    _, grads = loo_loss_and_grads(feats, masks, head, kappa)
    h = 1e-5
    for name, p in head.params().items():
        fd = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loo_loss(feats, masks, head, kappa)
            p[idx] = orig - h
            down = loo_loss(feats, masks, head, kappa)
            p[idx] = orig
            fd[idx] = (up - down) / (2 * h)
            it.iternext()
        rel = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert rel <= 1e-6, f"{name}: rel err {rel}"


def test_grads_cover_combination_sizes(rng):
    feats = [rng.normal(size=(8, 4)) for _ in range(4)]
    masks = _masks(rng, 4, 8)
    head = init_head(4, TtaConfig(), seed=1)
    l1, g1 = loo_loss_and_grads(feats, masks, head, 10.0, n_protos=1)
    l3, g3 = loo_loss_and_grads(feats, masks, head, 10.0, n_protos=3)
    assert np.isfinite(l1) and np.isfinite(l3)
    assert any(np.linalg.norm(g1[k] - g3[k]) > 0 for k in g1)


# --- Adam ---------------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    cfg = TtaConfig()
    head = init_head(3, cfg, seed=0)
    before = {k: v.copy() for k, v in head.params().items()}
    adam_step(head, {k: np.zeros_like(v) for k, v in head.params().items()}, cfg)
    for k, v in head.params().items():
        assert np.array_equal(v, before[k])


def test_adam_first_step_magnitude_is_lr():
    # scalar quadratic f(w) = w^2 at w=1: one bias-corrected step moves by ~lr
    cfg = TtaConfig(lr=1.3e-3)
    head = init_head(1, cfg, seed=0)
    head.b2[0] = 1.0
    grads = {k: np.zeros_like(v) for k, v in head.params().items()}
    grads["b2"][0] = 2.0
    adam_step(head, grads, cfg)
    assert head.b2[0] == pytest.approx(1.0 - cfg.lr, abs=1e-10)
    assert head.t == 1


def test_adam_monotone_on_quadratic():
    cfg = TtaConfig(lr=0.05)
    head = init_head(1, cfg, seed=0)
    head.b2[0] = 1.0
    values = []
    for _ in range(10):
        grads = {k: np.zeros_like(v) for k, v in head.params().items()}
        grads["b2"][0] = 2.0 * head.b2[0]
        adam_step(head, grads, cfg)
        values.append(head.b2[0] ** 2)
    assert all(b < a for a, b in zip(values, values[1:]))


# --- soft-copy ----------------------------------------------------------------


def test_paste_identity_offset(rng):
    dump = random_episode(rng, shot=1).supports[0]
    out = paste_foreground(dump, 0, 0)
    assert np.array_equal(out.mask, dump.mask)
    assert np.array_equal(out.tokens, dump.tokens)


def test_paste_fully_off_grid(rng):
    dump = random_episode(rng, shot=1, hg=4, wg=4).supports[0]
    out = paste_foreground(dump, 4, 0)
    assert np.array_equal(out.mask, dump.mask)


def test_paste_exhaustive_offsets_bounds(rng):
    dump = random_episode(rng, shot=1, hg=6, wg=6).supports[0]
    fg = int(dump.mask.sum())
    for dy in range(-5, 6):
        for dx in range(-5, 6):
            out = paste_foreground(dump, dy, dx)
            assert set(np.unique(out.mask)) <= {0, 1}
            assert fg <= out.mask.sum() <= 2 * fg


def test_paste_does_not_mutate_input(rng):
    dump = random_episode(rng, shot=1).supports[0]
    before = dump.tokens.copy()
    paste_foreground(dump, 1, 1)
    assert np.array_equal(dump.tokens, before)


def test_soft_copy_deterministic(rng):
    dump = random_episode(rng, shot=1).supports[0]
    a, b = soft_copy(dump, 77), soft_copy(dump, 77)
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.tokens, b.tokens)


def test_expand_one_shot(rng):
    episode = random_episode(rng, shot=1)
    out = expand_one_shot(episode, views=2, seed=5)
    assert out.shot == 2
    assert all(s.mask is not None for s in out.supports)
    again = expand_one_shot(episode, views=2, seed=5)
    assert np.array_equal(out.supports[0].tokens, again.supports[0].tokens)


# --- adaptation loop ----------------------------------------------------------


def _routed(episodes):
    cfg = HlsConfig(candidates=list(range(8)), anchor_layer=7)
    ssp = SspConfig()
    return [(ep, route(ep, cfg, ssp)) for ep in episodes]


def test_adapt_m1_never_updates():
    episodes, _ = _episodes(2)
    for ep, decision in _routed(episodes):
        head = adapt(ep, decision, TtaConfig(variant="m1"), seed=4)
        assert head.t == 0
        assert not head.W2.any() and not head.b2.any()


def _episodes(n, **overrides):
    kwargs = dict(hg=8, wg=8, d=12, layers=8, planted_layer=5, margin=2.0, noise=1.0,
                  episodes=n, attn_layers=[7])
    kwargs.update(overrides)
    spec = SyntheticSpec(**kwargs)
    return gen_synthetic(spec, shot=4, seed=21), spec


def test_adapt_reduces_loo_loss_on_most_episodes():
    episodes, _ = _episodes(10)
    ssp = SspConfig()
    wins = 0
    for ep, decision in _routed(episodes):
        feats = [decision.features(s) for s in ep.supports]
        masks = [s.flat_mask() for s in ep.supports]
        cfg = TtaConfig()
        head0 = init_head(feats[0].shape[1], cfg, seed=9)
        before = loo_loss(feats, masks, head0, ssp.kappa)
        head = adapt(ep, decision, cfg, kappa=ssp.kappa, seed=9)
        after = loo_loss(feats, masks, head, ssp.kappa)
        wins += after < before
        assert head.t == ep.shot - 1
    assert wins >= 8


def test_adapt_one_shot_requires_views():
    episodes, _ = _episodes(1)
    ep, decision = _routed(episodes)[0]
    one = type(ep)(supports=[ep.supports[0]], query=ep.query, class_id=ep.class_id)
    with pytest.raises(TooFewSupportsError):
        adapt(one, decision, TtaConfig(augment_views=1), seed=0)
    head = adapt(one, decision, TtaConfig(augment_views=2), seed=0)
    assert head.t == 1


def test_adapt_aborts_on_non_finite_loss():
    episodes, spec = _episodes(1)
    ep, decision = _routed(episodes)[0]
    ep.supports[0].tokens[decision.layers[0]] = np.nan
    head = adapt(ep, decision, TtaConfig(), seed=0)
    assert head.diverged
    assert head.t == 0 and not head.W2.any()


def test_adapt_deterministic():
    episodes, _ = _episodes(1)
    ep, decision = _routed(episodes)[0]
    h1 = adapt(ep, decision, TtaConfig(), seed=13)
    h2 = adapt(ep, decision, TtaConfig(), seed=13)
    for k in h1.params():
        assert h1.params()[k].tobytes() == h2.params()[k].tobytes()


def test_variants_agree_before_training(rng):
    feat = rng.normal(size=(10, 6))
    m0 = init_head(6, TtaConfig(variant="m0"))
    m1 = init_head(6, TtaConfig(variant="m1"), seed=1)
    m2 = init_head(6, TtaConfig(variant="m2"), seed=2)
    out0, out1, out2 = (apply_head(h, feat) for h in (m0, m1, m2))
    assert out0.tobytes() == out1.tobytes() == out2.tobytes()


def test_head_save_load_round_trip(tmp_path):
    head = init_head(5, TtaConfig(hidden_dim=4), seed=8)
    head.W2 += 0.25
    head.t = 3
    save_head(head, tmp_path / "head.hfd")
    back = load_head(tmp_path / "head.hfd")
    assert back.variant == head.variant and back.t == 3
    for k in head.params():
        assert np.allclose(back.params()[k], head.params()[k], atol=1e-6)
