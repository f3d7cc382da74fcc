import math

import numpy as np
import pytest

from advner import autodiff as ad
from advner.errors import ConfigError, DataError
from advner.losses import domain_loss, ner_loss, total_loss
from advner.model import ModelConfig, domain_logits, encode, init_params, ner_logits

from conftest import random_batch, small_config


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, n_tags=3, d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, n_tags=0)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, n_tags=3, dropout=1.0)


def test_init_is_deterministic_and_partitioned():
    cfg = small_config()
    a, b, c = init_params(cfg, 0), init_params(cfg, 0), init_params(cfg, 1)
    for name in a.names():
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert not np.array_equal(a["embed.tokens"].data, c["embed.tokens"].data)
    for name in a.names():
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".beta")):
            assert not a[name].data.any(), name
    groups = [set(a.groups[g]) for g in ("theta_f", "theta_n", "theta_d")]
    assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])
    assert set().union(*groups) == set(a.tensors)
    assert a.groups["theta_n"] == ["ner.w", "ner.b"]


def test_linear_init_bounds():
    p = init_params(small_config(), 3)
    w = p["enc.0.ffn.w2"].data
    assert np.abs(w).max() <= 1 / math.sqrt(32)


def test_encode_shape_and_determinism():
    p = init_params(small_config(dropout=0.1), 0)
    tokens, mask, _ = random_batch(np.random.default_rng(0))
    out = encode(p, tokens, mask)
    assert out.shape == (3, 6, 16)
    np.testing.assert_array_equal(out.data, encode(p, tokens, mask).data)
    a = encode(p, tokens, mask, np.random.default_rng(5)).data
    b = encode(p, tokens, mask, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_encode_rejects_bad_token_with_sequence_index():
    p = init_params(small_config(), 0)
    tokens, mask, _ = random_batch(np.random.default_rng(0))
    tokens[2, 0] = 40
    with pytest.raises(DataError, match="sequence 2"):
        encode(p, tokens, mask)


def test_padding_invariance():
    p = init_params(small_config(), 0)
    rng = np.random.default_rng(1)
    sent = rng.integers(2, 40, 9)
    feats = []
    for length in (16, 32):
        tokens = np.zeros((1, length), dtype=np.int64)
        mask = np.zeros((1, length), dtype=np.int64)
        tokens[0, :9], mask[0, :9] = sent, 1
        feats.append(ner_logits(p, encode(p, tokens, mask)).data[0, :9])
    np.testing.assert_allclose(feats[0], feats[1], atol=1e-5)


def test_ner_logits_zero_features():
    p = init_params(small_config(), 0)
    out = ner_logits(p, ad.tensor(np.zeros((2, 3, 16))))
    assert out.shape == (2, 3, 5)
    assert not out.data.any()


def test_ner_head_gradient_matches_finite_differences(tiny_params):
    p = tiny_params
    tokens, mask, tags = random_batch(np.random.default_rng(2))
    feats = ad.tensor(encode(p, tokens, mask).data)

    def loss():
        return ner_loss(ner_logits(p, feats), tags, mask)
    assert ad.finite_diff_check(loss, p.group("theta_n")) < 1e-3


def _domain_grads(p, tokens, mask, **kwargs):
    for t in p.all():
        t.grad = None
    feats = encode(p, tokens, mask)
    ad.backward(domain_loss(domain_logits(p, feats, mask, **kwargs)))
    return {n: (p[n].grad.copy() if p[n].grad is not None else None) for n in p.names()}


def test_domain_head_lambda_zero_blocks_extractor(tiny_params):
    tokens, mask, _ = random_batch(np.random.default_rng(3))
    grads = _domain_grads(tiny_params, tokens, mask, grl_lambda=0.0)
    for n in tiny_params.groups["theta_f"]:
        assert not grads[n].any(), n
    assert any(grads[n].any() for n in tiny_params.groups["theta_d"])


def test_domain_forward_independent_of_lambda(tiny_params):
    tokens, mask, _ = random_batch(np.random.default_rng(4))
    feats = encode(tiny_params, tokens, mask)
    a = domain_logits(tiny_params, feats, mask, 0.0).data
    b = domain_logits(tiny_params, feats, mask, 5.0).data
    assert a.shape == (3, 2)
    assert a.tobytes() == b.tobytes()


def test_domain_head_reversal_sign(tiny_params):
    tokens, mask, _ = random_batch(np.random.default_rng(5))
    rev = _domain_grads(tiny_params, tokens, mask, grl_lambda=1.0)
    plain = _domain_grads(tiny_params, tokens, mask, reverse=False)
    for n in tiny_params.groups["theta_f"]:
        np.testing.assert_allclose(rev[n], -plain[n], rtol=1e-10, atol=1e-14)
    for n in tiny_params.groups["theta_d"]:
        np.testing.assert_array_equal(rev[n], plain[n])


def test_parameter_partition_isolates_ner_logits():
    p = init_params(small_config(), 0)
    tokens, mask, _ = random_batch(np.random.default_rng(6))
    before = ner_logits(p, encode(p, tokens, mask)).data.copy()
    dom_before = domain_logits(p, encode(p, tokens, mask), mask).data.copy()
    for t in p.group("theta_d"):
        t.data = t.data + np.float32(0.5)
    assert ner_logits(p, encode(p, tokens, mask)).data.tobytes() == before.tobytes()
    assert not np.array_equal(domain_logits(p, encode(p, tokens, mask), mask).data, dom_before)


def test_forward_stays_finite_on_extreme_embeddings():
    p = init_params(small_config(), 0)
    p["embed.tokens"].data *= np.float32(1e4)
    tokens, mask, _ = random_batch(np.random.default_rng(7))
    feats = encode(p, tokens, mask)
    assert np.isfinite(feats.data).all()
    assert np.isfinite(domain_logits(p, feats, mask).data).all()


# -- losses -----------------------------------------------------------------


def test_ner_loss_examples():
    tags = np.array([[0, 2], [1, 3]])
    mask = np.ones((2, 2))
    perfect = np.full((2, 2, 4), -50.0)
    for i in range(2):
        for j in range(2):
            perfect[i, j, tags[i, j]] = 50.0
    assert ner_loss(ad.tensor(perfect), tags, mask).item() == pytest.approx(0.0, abs=1e-6)
    uniform = ner_loss(ad.tensor(np.zeros((2, 2, 4))), tags, mask).item()
    assert uniform == pytest.approx(math.log(4), rel=1e-6)


def test_ner_loss_ignores_masked_positions():
    logits = np.array([[[2.0, 0.0], [0.0, 1.0]]])
    tags = np.array([[0, 0]])
    full = ner_loss(ad.tensor(logits), tags, np.array([[1, 1]])).item()
    half = ner_loss(ad.tensor(logits), tags, np.array([[1, 0]])).item()
    nll0 = math.log(1 + math.exp(-2.0))
    nll1 = math.log(1 + math.exp(1.0))
    assert half == pytest.approx(nll0, rel=1e-6)
    assert full == pytest.approx((nll0 + nll1) / 2, rel=1e-6)


def test_ner_loss_rejects_bad_tag():
    with pytest.raises(DataError):
        ner_loss(ad.tensor(np.zeros((1, 2, 3))), np.array([[0, 3]]), np.ones((1, 2)))


def test_ner_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5, 3))
    tags = rng.integers(0, 3, (4, 5))
    mask = (rng.random((4, 5)) > 0.3).astype(int)
    mask[:, 0] = 1
    perm = rng.permutation(4)
    a = ner_loss(ad.tensor(logits), tags, mask).item()
    b = ner_loss(ad.tensor(logits[perm]), tags[perm], mask[perm]).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_domain_loss_examples():
    good_src = ad.tensor([[30.0, -30.0], [30.0, -30.0]])
    good_tgt = ad.tensor([[-30.0, 30.0]])
    assert domain_loss(good_src, good_tgt).item() == pytest.approx(0.0, abs=1e-6)
    zeros = ad.tensor(np.zeros((3, 2)))
    assert domain_loss(zeros, ad.tensor(np.zeros((5, 2)))).item() == pytest.approx(math.log(2), rel=1e-6)
    # the same confident logits scored under swapped labels
    assert domain_loss(good_tgt, good_src).item() > 10


def test_total_loss_examples():
    one, quarter = ad.tensor(1.0), ad.tensor(0.25)
    assert total_loss(one, quarter, 2.0).item() == 1.5
    assert total_loss(one, quarter, 0.0).item() == 1.0
    assert total_loss(one, ad.tensor(0.0), 2.0).item() == 1.0
    with pytest.raises(ConfigError):
        total_loss(one, quarter, -1.0)


def test_total_loss_linear_in_alpha():
    l_ner, l_adv = ad.tensor(0.7), ad.tensor(0.31)
    h = 1e-2
    for alpha in (0.5, 1.0, 2.0):
        slope = (total_loss(l_ner, l_adv, alpha + h).item() - total_loss(l_ner, l_adv, alpha - h).item()) / (2 * h)
        assert slope == pytest.approx(0.31, rel=1e-4)


def test_domain_loss_near_chance_at_init():
    values = []
    for seed in range(10):
        p = init_params(ModelConfig(vocab_size=200, n_tags=7), seed)
        rng = np.random.default_rng(100 + seed)
        tokens = rng.integers(2, 200, (100, 12))
        mask = np.ones_like(tokens)
        feats = encode(p, tokens, mask)
        logits = domain_logits(p, feats, mask)
        values.append(domain_loss(ad.tensor(logits.data[:50]), ad.tensor(logits.data[50:])).item())
    assert all(0.55 <= v <= 0.85 for v in values), values


def test_full_loss_gradients(tiny_params):
    """θ_n, θ_d follow the total loss; θ_f follows l_ner - λ·α·l_adv."""
    p = tiny_params
    rng = np.random.default_rng(8)
    s_tok, s_mask, s_tags = random_batch(rng)
    t_tok, t_mask, _ = random_batch(rng, b=2, length=5, short_row=False)
    lam, alpha = 0.7, 2.0

    def parts(reverse=True):
        sf, tf = encode(p, s_tok, s_mask), encode(p, t_tok, t_mask)
        l_ner = ner_loss(ner_logits(p, sf), s_tags, s_mask)
        l_adv = domain_loss(domain_logits(p, sf, s_mask, lam, reverse), domain_logits(p, tf, t_mask, lam, reverse))
        return l_ner, l_adv

    def total():
        return total_loss(*parts(), alpha)

    def extractor_objective():
        l_ner, l_adv = parts(reverse=False)
        return ad.sub(l_ner, ad.scale(l_adv, lam * alpha))

    assert ad.finite_diff_check(total, p.group("theta_n") + p.group("theta_d")) < 1e-3
    for t in p.all():
        t.grad = None
    ad.backward(total())
    total_grads = {n: p[n].grad.copy() for n in p.groups["theta_f"]}
    for t in p.all():
        t.grad = None
    ad.backward(extractor_objective())
    for n in p.groups["theta_f"]:
        np.testing.assert_allclose(total_grads[n], p[n].grad, rtol=1e-9, atol=1e-12)
    assert ad.finite_diff_check(extractor_objective, p.group("theta_f")) < 1e-3
