import numpy as np
import pytest

from mmie import autodiff as ad
from mmie.errors import ConfigError
from mmie.layers import (AttentionBlock, GaussianHead, fuse,
                         variational_encode)

from fd import check_grads

D, H = 8, 2


def block(name="blk", seed=0, d=D, h=H):
    return AttentionBlock(d, h, np.random.default_rng(seed), name)


def head(name="head", seed=1, d=D, h=H, depth=1):
    return GaussianHead(d, h, np.random.default_rng(seed), name, depth=depth)


def test_width_not_divisible_by_heads():
    with pytest.raises(ConfigError, match="divisible"):
        AttentionBlock(6, 4, np.random.default_rng(0), "bad")


def test_single_valid_key_gets_weight_one():
    rng = np.random.default_rng(2)
    blk = block()
    q = ad.constant(rng.standard_normal((3, D)))
    k_full = ad.constant(rng.standard_normal((4, D)))
    mask = np.array([1.0, 0.0, 0.0, 0.0])
    out_masked = blk(q, k_full, mask)
    out_single = blk(q, ad.constant(k_full.values[:1].copy()), np.array([1.0]))
    assert np.allclose(out_masked.values, out_single.values, atol=1e-12, rtol=0)


def test_two_identical_keys_split_evenly():
    rng = np.random.default_rng(3)
    blk = block()
    q = ad.constant(rng.standard_normal((2, D)))
    row = rng.standard_normal((1, D))
    k = ad.constant(np.vstack([row, row]))
    # equal keys/values make attention output equal to the single-key case,
    # so weights must be [0.5, 0.5] in every head
    out2 = blk(q, k, np.array([1.0, 1.0]))
    out1 = blk(q, ad.constant(row.copy()), np.array([1.0]))
    assert np.allclose(out2.values, out1.values, atol=1e-12)


def test_output_shape_matches_query():
    rng = np.random.default_rng(4)
    blk = block()
    q = ad.constant(rng.standard_normal((5, D)))
    k = ad.constant(rng.standard_normal((3, D)))
    assert blk(q, k, np.ones(3)).shape == (5, D)


def test_key_permutation_equivariance():
    rng = np.random.default_rng(5)
    blk = block()
    q = ad.constant(rng.standard_normal((4, D)))
    k = rng.standard_normal((5, D))
    mask = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
    perm = np.array([3, 0, 4, 1, 2])
    out = blk(q, ad.constant(k), mask)
    out_p = blk(q, ad.constant(k[perm]), mask[perm])
    assert np.allclose(out.values, out_p.values, atol=1e-12)


def test_attention_block_gradcheck():
    rng = np.random.default_rng(6)
    blk = block(d=4, h=2)
    q = ad.param(rng.standard_normal((3, 4)), "q")
    k = ad.param(rng.standard_normal((2, 4)), "k")
    params = [q, k] + list(blk.parameters())
    check_grads(lambda: ad.sum_all(blk(q, k, np.ones(2))), params, tol=1e-4)


def test_variational_eval_mode_is_mean_and_deterministic():
    rng = np.random.default_rng(7)
    h = head()
    x = ad.constant(rng.standard_normal((4, D)))
    mask = np.ones(4)
    lat1 = variational_encode(x, h, None, mask)
    lat2 = variational_encode(x, h, None, mask)
    assert np.array_equal(lat1.z.values, lat1.mu.values)
    assert np.array_equal(lat1.z.values, lat2.z.values)
    assert np.array_equal(lat1.sigma.values, lat2.sigma.values)


def test_zeroed_sigma_path_gives_unit_sigma():
    rng = np.random.default_rng(8)
    h = head()
    for blk in h.sigma_blocks:
        for p in blk.parameters():
            p.values[:] = 0.0
    x = ad.constant(rng.standard_normal((3, D)))
    lat = variational_encode(x, h, None, np.ones(3))
    assert np.allclose(lat.log_var.values, 0.0)
    assert np.allclose(lat.sigma.values, 1.0)


def test_reparameterized_sample_mean_matches_mu():
    rng = np.random.default_rng(9)
    h = head()
    x = ad.constant(rng.standard_normal((2, D)))
    mask = np.ones(2)
    lat = variational_encode(x, h, None, mask)
    n = 100_000
    eps = rng.standard_normal((n, 2, D))
    total = np.zeros((2, D))
    mu, sigma = lat.mu.values, lat.sigma.values
    # z = mu + sigma * eps drawn n times, averaged
    total = mu + sigma * eps.mean(axis=0)
    tol = 3.0 * sigma / np.sqrt(n)
    assert np.all(np.abs(total - mu) <= tol)


def test_sample_draw_passes_through_eps():
    rng = np.random.default_rng(10)
    h = head()
    x = ad.constant(rng.standard_normal((3, D)))
    eps = rng.standard_normal((3, D))
    lat = variational_encode(x, h, eps, np.ones(3))
    expect = lat.mu.values + lat.sigma.values * eps
    assert np.allclose(lat.z.values, expect, atol=0, rtol=0)


def test_every_position_depends_on_every_unmasked_row():
    rng = np.random.default_rng(11)
    h = head()
    x = rng.standard_normal((4, D))
    mask = np.ones(4)
    base = variational_encode(ad.constant(x), h, None, mask).mu.values
    for row in range(4):
        bumped = x.copy()
        bumped[row] += 0.37
        mu = variational_encode(ad.constant(bumped), h, None, mask).mu.values
        assert np.all(np.any(np.abs(mu - base) > 1e-12, axis=1)), \
            f"perturbing row {row} left some position unchanged"


def test_fuse_shapes_and_masking():
    rng = np.random.default_rng(12)
    h_t, h_v = head("t", 13), head("v", 14)
    v2t = [block("v2t", 15)]
    t2v = [block("t2v", 16)]
    x_t = ad.constant(rng.standard_normal((6, D)))   # n+2 rows
    x_v = ad.constant(rng.standard_normal((3, D)))   # m+1 rows
    t_mask, v_mask = np.ones(6), np.ones(3)
    lat_t = variational_encode(x_t, h_t, None, t_mask)
    lat_v = variational_encode(x_v, h_v, None, v_mask)
    out = fuse(lat_v, lat_t, v2t, t2v)
    assert out.image_reps.shape == (3, D)
    assert out.text_reps.shape == (6, D)

    # with every text row masked except the first, image rows may only
    # attend to that row
    cls_only = np.array([1.0, 0, 0, 0, 0, 0])
    lat_t_masked = variational_encode(x_t, h_t, None, cls_only)
    b_masked = v2t[0](lat_v.z, lat_t_masked.z, cls_only)
    b_single = v2t[0](lat_v.z,
                      ad.constant(lat_t_masked.z.values[:1].copy()),
                      np.array([1.0]))
    assert np.allclose(b_masked.values, b_single.values, atol=1e-12, rtol=0)


def test_gradient_reaches_image_side_through_fusion():
    rng = np.random.default_rng(17)
    d, h = 4, 2
    h_t = GaussianHead(d, h, np.random.default_rng(18), "t")
    h_v = GaussianHead(d, h, np.random.default_rng(19), "v")
    v2t = [AttentionBlock(d, h, np.random.default_rng(20), "v2t")]
    t2v = [AttentionBlock(d, h, np.random.default_rng(21), "t2v")]
    x_t = ad.param(rng.standard_normal((3, d)), "x_t")
    x_v = ad.param(rng.standard_normal((2, d)), "x_v")

    def build():
        lat_t = variational_encode(x_t, h_t, None, np.ones(3))
        lat_v = variational_encode(x_v, h_v, None, np.ones(2))
        out = fuse(lat_v, lat_t, v2t, t2v)
        return ad.sum_all(out.text_reps)

    params = [x_v] + list(h_v.mu_blocks[0].parameters())[:4]
    check_grads(build, params, tol=1e-4)
