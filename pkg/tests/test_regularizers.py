import math

import numpy as np
import pytest

from mmie import autodiff as ad
from mmie.layers import GaussianHead, GaussianLatent, variational_encode
from mmie.regularizers import (Discriminator, alignment_loss, kl_to_std_normal,
                               masked_mean_rows, refinement_loss)

from fd import check_grads
from oracles import monte_carlo_kl


def latent_from(mu, sigma, mask=None):
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    mask = np.ones(mu.shape[0]) if mask is None else np.asarray(mask)
    with np.errstate(divide="ignore"):
        log_var = 2.0 * np.log(np.abs(sigma))
    return GaussianLatent(mu=ad.constant(mu), sigma=ad.constant(sigma),
                          z=ad.constant(mu), mask=mask,
                          log_var=ad.constant(np.where(np.isfinite(log_var),
                                                       log_var, 0.0)))


def test_kl_zero_at_prior():
    lat = latent_from(np.zeros((3, 4)), np.ones((3, 4)))
    assert kl_to_std_normal(lat).item() == 0.0


def test_kl_single_position_half():
    # d=1, mu=1, sigma=1 -> 0.5; verified against the sampling oracle
    lat = latent_from([[1.0]], [[1.0]])
    closed = kl_to_std_normal(lat).item()
    assert closed == pytest.approx(0.5)
    mc = monte_carlo_kl([1.0], [1.0], 1_000_000, np.random.default_rng(0))
    assert abs(mc - closed) / closed < 0.01


def test_kl_additive_over_dims():
    lat = latent_from([[1.0, 1.0]], [[1.0, 1.0]])
    assert kl_to_std_normal(lat).item() == pytest.approx(1.0)


def test_kl_additive_over_positions_and_split():
    rng = np.random.default_rng(1)
    mu = rng.uniform(-2, 2, (4, 3))
    sigma = rng.uniform(0.3, 3.0, (4, 3))
    whole = kl_to_std_normal(latent_from(mu, sigma)).item()
    top = kl_to_std_normal(latent_from(mu[:2], sigma[:2])).item()
    bottom = kl_to_std_normal(latent_from(mu[2:], sigma[2:])).item()
    assert whole == pytest.approx(top + bottom, rel=1e-12)


def test_kl_masked_positions_contribute_zero():
    mu = np.array([[1.0, 2.0], [5.0, 5.0]])
    sigma = np.array([[0.5, 2.0], [9.0, 9.0]])
    masked = kl_to_std_normal(latent_from(mu, sigma, mask=[1.0, 0.0])).item()
    only_first = kl_to_std_normal(latent_from(mu[:1], sigma[:1])).item()
    assert masked == pytest.approx(only_first, rel=1e-14)


def test_kl_nonnegative_and_strictly_positive_off_prior():
    rng = np.random.default_rng(2)
    for _ in range(50):
        mu = rng.uniform(-0.05, 0.05, (2, 3))
        sigma = 1.0 + rng.uniform(-0.05, 0.05, (2, 3))
        if np.allclose(mu, 0.0) and np.allclose(sigma, 1.0):
            continue
        kl = kl_to_std_normal(latent_from(mu, sigma)).item()
        assert kl > 0.0


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError, match="positive"):
        kl_to_std_normal(latent_from([[0.0]], [[0.0]]))


def test_kl_gradcheck():
    rng = np.random.default_rng(3)
    h = GaussianHead(4, 2, np.random.default_rng(4), "g")
    x = ad.param(rng.standard_normal((3, 4)), "x")

    def build():
        lat = variational_encode(x, h, None, np.ones(3))
        return kl_to_std_normal(lat)

    check_grads(build, [x] + list(h.sigma_blocks[0].parameters())[:3], tol=1e-4)


def test_kl_matches_monte_carlo_50_random_gaussians():
    rng = np.random.default_rng(5)
    for trial in range(50):
        d = int(rng.integers(1, 4))
        mu = rng.uniform(-2, 2, (1, d))
        sigma = rng.uniform(0.3, 3.0, (1, d))
        closed = kl_to_std_normal(latent_from(mu, sigma)).item()
        mc = monte_carlo_kl(mu, sigma, 1_000_000,
                            np.random.default_rng(100 + trial))
        assert abs(mc - closed) / max(closed, 1e-9) < 0.01, \
            f"trial {trial}: closed {closed} vs MC {mc}"


def test_refinement_loss_composition():
    nll = ad.constant([[1.0]])
    lat2 = latent_from([[2.0, 0.0]], [[1.0, 1.0]])      # KL = 2.0
    lat3 = latent_from([[math.sqrt(6.0)]], [[1.0]])     # KL = 3.0
    assert kl_to_std_normal(lat2).item() == pytest.approx(2.0)
    assert kl_to_std_normal(lat3).item() == pytest.approx(3.0)
    assert refinement_loss(lat2, lat3, nll, 0.0, 0.0).item() == 1.0
    prior = latent_from(np.zeros((2, 2)), np.ones((2, 2)))
    assert refinement_loss(prior, prior, nll, 0.7, 1.3).item() == pytest.approx(1.0)
    got = refinement_loss(lat2, lat3, nll, 0.1, 0.1).item()
    assert got == pytest.approx(1.5)


def test_discriminator_zero_weights_score_half():
    d = Discriminator(4, np.random.default_rng(6))
    for p in d.parameters():
        p.values[:] = 0.0
    rng = np.random.default_rng(7)
    s = d.score(ad.constant(rng.standard_normal((3, 4))),
                ad.constant(rng.standard_normal((2, 4))),
                np.ones(3), np.ones(2))
    assert s.item() == 0.5


def test_discriminator_score_in_open_interval():
    d = Discriminator(4, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    for _ in range(100):
        s = d.score(ad.constant(rng.standard_normal((2, 4)) * 5),
                    ad.constant(rng.standard_normal((3, 4)) * 5),
                    np.ones(2), np.ones(3)).item()
        assert 0.0 < s < 1.0


def test_discriminator_row_permutation_invariance():
    d = Discriminator(4, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    zt = rng.standard_normal((4, 4))
    zv = rng.standard_normal((2, 4))
    s1 = d.score(ad.constant(zt), ad.constant(zv), np.ones(4), np.ones(2)).item()
    s2 = d.score(ad.constant(zt[::-1].copy()), ad.constant(zv),
                 np.ones(4), np.ones(2)).item()
    assert s1 == pytest.approx(s2, rel=1e-12)


def test_masked_mean_requires_unmasked_row():
    from mmie.errors import ShapeError
    with pytest.raises(ShapeError, match="zero unmasked"):
        masked_mean_rows(ad.constant(np.ones((2, 3))), np.zeros(2))


class ConstantScorer:
    def __init__(self, positive, negative, pairs):
        self.positive, self.negative = positive, negative
        self.pos_ids = {(id(t), id(v)) for t, v in pairs}

    def score(self, zt, zv, tm, vm):
        val = self.positive if (id(zt), id(zv)) in self.pos_ids else self.negative
        return ad.constant([[val]])


def make_pairs(n, seed=12, d=4):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        lt = latent_from(rng.standard_normal((3, d)), np.ones((3, d)))
        lv = latent_from(rng.standard_normal((2, d)), np.ones((2, d)))
        pairs.append((lt, lv))
    return pairs


def test_alignment_loss_at_half_is_two_ln_two():
    d = Discriminator(4, np.random.default_rng(13))
    for p in d.parameters():
        p.values[:] = 0.0
    loss = alignment_loss(make_pairs(3), d)
    assert loss.item() == pytest.approx(2.0 * math.log(2.0))


def test_alignment_loss_arithmetic():
    pairs = make_pairs(2)
    scorer = ConstantScorer(0.9, 0.1, [(t.z, v.z) for t, v in pairs])
    loss = alignment_loss(pairs, scorer)
    assert loss.item() == pytest.approx(-2.0 * math.log(0.9), rel=1e-12)


def test_alignment_single_pair_warns_and_uses_positive_only(caplog):
    import logging
    d = Discriminator(4, np.random.default_rng(14))
    for p in d.parameters():
        p.values[:] = 0.0
    with caplog.at_level(logging.WARNING):
        loss = alignment_loss(make_pairs(1), d)
    assert "negatives" in caplog.text
    assert loss.item() == pytest.approx(math.log(2.0))


def test_alignment_gradcheck_through_disc_and_latents():
    rng = np.random.default_rng(15)
    d = Discriminator(4, np.random.default_rng(16))
    zt1 = ad.param(rng.standard_normal((3, 4)), "zt1")
    zv1 = ad.param(rng.standard_normal((2, 4)), "zv1")
    zt2 = ad.param(rng.standard_normal((3, 4)), "zt2")
    zv2 = ad.param(rng.standard_normal((2, 4)), "zv2")

    def lat(z, rows):
        return GaussianLatent(mu=z, sigma=None, z=z, mask=np.ones(rows),
                              log_var=None)

    def build():
        pairs = [(lat(zt1, 3), lat(zv1, 2)), (lat(zt2, 3), lat(zv2, 2))]
        return alignment_loss(pairs, d)

    check_grads(build, [zt1, zv1, zt2, zv2] + list(d.parameters()), tol=1e-4)


def test_alignment_loss_decreases_training_only_disc():
    from mmie.training import AdamW
    rng = np.random.default_rng(17)
    d = Discriminator(4, np.random.default_rng(18))
    pairs = make_pairs(4, seed=19)
    params = list(d.parameters())
    opt = AdamW(params, lr=1e-3, weight_decay=0.0)

    def loss_value():
        return alignment_loss(pairs, d).item()

    prev = loss_value()
    for _ in range(50):
        ad.zero_grad(params)
        with ad.record() as tape:
            loss = alignment_loss(pairs, d)
        tape.backward(loss)
        opt.step()
        cur = loss_value()
        assert cur < prev, "alignment loss failed to decrease"
        prev = cur
