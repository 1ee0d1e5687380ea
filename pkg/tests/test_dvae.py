"""Tokenizer / codebook / decoder behavior.

Covers: embedding permutation invariance, tokenizer graph symmetry,
quantization in both modes, the KL regularizer against a direct-summation
oracle, folding-grid construction, decoder shift composition, and tokenize
determinism.
"""

import numpy as np
import pytest

from gpm.dvae import (
    DiscreteVAE,
    MiniPointNet,
    TokenSequence,
    dvae_loss,
    folding_grid,
    format_token_line,
    kl_to_uniform,
    noiseless_posterior,
    parse_token_line,
)
from gpm.runtime import Tensor, sample_gumbel


def small_vae(seed=0):
    return DiscreteVAE(vocab_size=32, code_dim=8, embed_dim=8,
                       patch_points=8, graph_neighbors=4, conv_depth=2,
                       seed=seed)


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def test_embed_permutation_invariant():
    net = MiniPointNet(16, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    patches = rng.normal(size=(2, 3, 10, 3)).astype(np.float32)
    base = net(Tensor(patches)).data
    for trial in range(5):
        perm = np.random.default_rng(trial).permutation(10)
        out = net(Tensor(patches[:, :, perm, :])).data
        np.testing.assert_array_equal(out, base)


def test_embed_identical_patches_match():
    net = MiniPointNet(16, np.random.default_rng(0))
    patch = np.random.default_rng(2).normal(size=(8, 3)).astype(np.float32)
    patches = np.stack([patch, patch, patch])[None]  # (1, 3, 8, 3)
    out = net(Tensor(patches)).data
    np.testing.assert_array_equal(out[0, 0], out[0, 1])
    np.testing.assert_array_equal(out[0, 0], out[0, 2])


def test_logits_shape_single_patch():
    # m=1, the patch is its own sole graph neighbor
    vae = small_vae()
    h = np.random.default_rng(0).normal(size=(1, 1, 8)).astype(np.float32)
    logits = vae.token_logits(Tensor(h)).data
    assert logits.shape == (1, 1, 32)
    assert np.isfinite(logits).all()


def test_duplicated_embeddings_give_pairwise_logits():
    # doubling every patch embedding keeps the feature graph symmetric, so
    # each twin must come out of the EdgeConv stack with identical logits
    vae = small_vae()
    h = np.random.default_rng(3).normal(size=(1, 5, 8)).astype(np.float32)
    doubled = np.repeat(h, 2, axis=1)
    logits = vae.token_logits(Tensor(doubled)).data
    np.testing.assert_array_equal(logits[0, 0::2], logits[0, 1::2])


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------

def test_quantize_hard_returns_exact_code_rows():
    vae = small_vae()
    logits = Tensor(np.random.default_rng(4).normal(size=(2, 6, 32)))
    seq, codes = vae.quantize(logits, tau=1.0, mode="hard")
    np.testing.assert_array_equal(seq.tokens, np.argmax(logits.data, axis=-1))
    np.testing.assert_array_equal(codes.data, vae.codebook.data[seq.tokens])
    assert seq.soft_assignments is None


def test_quantize_hard_noise_matches_manual_draw():
    vae = small_vae()
    logits = np.random.default_rng(5).normal(size=(1, 6, 32))
    seq, _ = vae.quantize(Tensor(logits), tau=1.0, mode="hard",
                          rng=np.random.default_rng(99))
    noise = sample_gumbel(logits.shape, np.random.default_rng(99), logits.dtype)
    np.testing.assert_array_equal(seq.tokens, np.argmax(logits + noise, axis=-1))


def test_quantize_soft_dominant_logit():
    # margin 20 at tau 0.0625 puts ~all mass on the winning code
    vae = small_vae()
    logits = np.zeros((1, 3, 32))
    winners = [7, 0, 31]
    for i, w in enumerate(winners):
        logits[0, i, w] = 20.0
    _, codes = vae.quantize(Tensor(logits), tau=0.0625, mode="soft", rng=None)
    for i, w in enumerate(winners):
        np.testing.assert_allclose(codes.data[0, i], vae.codebook.data[w],
                                   atol=1e-3)


def test_quantize_soft_uniform_mixture():
    vae = small_vae()
    logits = Tensor(np.zeros((1, 4, 32)))
    seq, codes = vae.quantize(logits, tau=1.0, mode="soft", rng=None)
    np.testing.assert_allclose(seq.soft_assignments.data, 1.0 / 32, atol=1e-12)
    np.testing.assert_allclose(codes.data[0, 0], vae.codebook.data.mean(axis=0),
                               atol=1e-6)


def test_quantize_soft_convex_combination():
    vae = small_vae()
    logits = Tensor(np.random.default_rng(6).normal(size=(2, 5, 32)))
    seq, codes = vae.quantize(logits, tau=0.7, mode="soft",
                              rng=np.random.default_rng(7))
    w = seq.soft_assignments.data
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)
    np.testing.assert_allclose(codes.data, w @ vae.codebook.data, atol=1e-5)


def test_quantize_rejects_unknown_mode():
    vae = small_vae()
    with pytest.raises(ValueError, match="mode"):
        vae.quantize(Tensor(np.zeros((1, 2, 32))), tau=1.0, mode="medium")


# ---------------------------------------------------------------------------
# KL regularizer
# ---------------------------------------------------------------------------

def kl_oracle(q):
    """Direct double-precision summation, q ln q -> 0 at q = 0."""
    s = q.shape[-1]
    total = 0.0
    rows = q.reshape(-1, s)
    for row in rows:
        for p in row:
            if p > 0:
                total += p * (np.log(p) - np.log(1.0 / s))
    return total / len(rows)


def test_kl_uniform_is_zero():
    q = np.full((3, 5, 8), 1.0 / 8)
    assert abs(float(kl_to_uniform(Tensor(q)).data)) < 1e-12


def test_kl_one_hot_is_log_s():
    q = np.zeros((1, 4, 16))
    q[..., 3] = 1.0
    np.testing.assert_allclose(float(kl_to_uniform(Tensor(q)).data),
                               np.log(16.0), atol=1e-12)


def test_kl_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(10):
        raw = rng.exponential(size=(2, 6, 12))
        q = raw / raw.sum(axis=-1, keepdims=True)
        got = float(kl_to_uniform(Tensor(q)).data)
        np.testing.assert_allclose(got, kl_oracle(q), atol=1e-10)
        assert 0.0 <= got <= np.log(12.0) + 1e-12


def test_kl_bounded_with_zeros():
    # hard assignments hit the q ln q -> 0 limit
    q = np.zeros((1, 3, 4))
    q[0, :, 0] = 1.0
    got = float(kl_to_uniform(Tensor(q)).data)
    np.testing.assert_allclose(got, np.log(4.0), atol=1e-12)


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def test_loss_kl_weight_zero_is_pure_chamfer():
    rng = np.random.default_rng(9)
    a = Tensor(rng.normal(size=(10, 3)))
    b = Tensor(rng.normal(size=(12, 3)))
    q = Tensor(np.full((1, 4, 8), 1.0 / 8))
    total, cd, _ = dvae_loss(a, b, q, kl_weight=0.0)
    assert total is cd


def test_loss_perfect_recon_uniform_assignments_is_zero():
    cloud = Tensor(np.random.default_rng(10).normal(size=(16, 3)))
    q = Tensor(np.full((1, 4, 8), 1.0 / 8))
    total, cd, kl = dvae_loss(cloud, Tensor(cloud.data.copy()), q, kl_weight=0.5)
    assert float(cd.data) == 0.0
    assert abs(float(total.data)) < 1e-12


def test_loss_is_sum_of_terms():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(10, 3)))
    b = Tensor(rng.normal(size=(10, 3)))
    raw = rng.exponential(size=(1, 4, 8))
    q = Tensor(raw / raw.sum(axis=-1, keepdims=True))
    total, cd, kl = dvae_loss(a, b, q, kl_weight=0.3)
    np.testing.assert_allclose(float(total.data),
                               float(cd.data) + 0.3 * float(kl.data),
                               atol=1e-12)


def test_loss_rejects_negative_weight():
    a = Tensor(np.zeros((4, 3)))
    with pytest.raises(ValueError, match="kl_weight"):
        dvae_loss(a, a, None, kl_weight=-0.1)


def test_codebook_receives_gradient_in_soft_mode():
    vae = small_vae()
    rng = np.random.default_rng(12)
    patches = Tensor(rng.normal(size=(1, 6, 8, 3)).astype(np.float32))
    centers = rng.normal(size=(1, 6, 3)).astype(np.float32)
    recon, seq = vae.reconstruct(patches, centers, tau=1.0, mode="soft",
                                 rng=np.random.default_rng(13))
    target = Tensor(rng.normal(size=(1, 48, 3)).astype(np.float32))
    total, _, _ = dvae_loss(target, recon, seq.soft_assignments, kl_weight=0.1)
    vae.zero_grad()
    total.backward()
    assert vae.codebook.grad is not None
    assert np.abs(vae.codebook.grad).max() > 0


# ---------------------------------------------------------------------------
# folding decoder
# ---------------------------------------------------------------------------

def test_folding_grid_perfect_square():
    g = folding_grid(16)
    assert g.shape == (16, 2)
    assert g.min() == -0.5 and g.max() == 0.5
    xs = np.unique(g[:, 0])
    np.testing.assert_allclose(xs, np.linspace(-0.5, 0.5, 4))


def test_folding_grid_truncates_non_square():
    # k=5 -> 3x3 grid, keep the first five points
    g5 = folding_grid(5)
    g9 = folding_grid(9)
    assert g5.shape == (5, 2)
    np.testing.assert_array_equal(g5, g9[:5])


def test_folding_grid_single_point():
    np.testing.assert_array_equal(folding_grid(1), np.zeros((1, 2), np.float32))


def test_decode_point_count():
    vae = small_vae()
    codes = Tensor(np.random.default_rng(14).normal(size=(2, 6, 8)).astype(np.float32))
    centers = np.random.default_rng(15).normal(size=(2, 6, 3)).astype(np.float32)
    out = vae.decode(codes, centers)
    assert out.shape == (2, 6 * 8, 3)


def test_decode_shift_composition():
    vae = small_vae()
    rng = np.random.default_rng(16)
    codes = Tensor(rng.normal(size=(1, 6, 8)).astype(np.float32))
    shift = np.array([0.5, -2.0, 1.25], dtype=np.float32)

    # from zero centers the composition is bit-exact (x + 0 adds nothing)
    zero = np.zeros((1, 6, 3), dtype=np.float32)
    base = vae.decode(codes, zero).data
    shifted = vae.decode(codes, zero + shift).data
    np.testing.assert_array_equal(shifted, base + shift)

    # from generic centers it holds to float32 rounding
    centers = rng.normal(size=(1, 6, 3)).astype(np.float32)
    a = vae.decode(codes, centers + shift).data
    b = vae.decode(codes, centers).data + shift
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def test_tokenize_deterministic_and_in_range():
    vae = small_vae()
    cloud = np.random.default_rng(17).normal(size=(64, 3))
    cloud /= np.abs(cloud).max()
    seq1, ps1 = vae.tokenize(cloud, m=8, k=8, seed=5)
    seq2, ps2 = vae.tokenize(cloud, m=8, k=8, seed=5)
    np.testing.assert_array_equal(seq1.tokens, seq2.tokens)
    np.testing.assert_array_equal(ps1.centers, ps2.centers)
    assert seq1.tokens.shape == (8,)
    assert (seq1.tokens >= 0).all() and (seq1.tokens < 32).all()


def test_tokenize_rejects_wrong_patch_size():
    vae = small_vae()  # built for k=8
    cloud = np.random.default_rng(18).normal(size=(64, 3))
    with pytest.raises(ValueError):
        vae.tokenize(cloud, m=8, k=4, seed=0)


def test_noiseless_posterior_rows_normalized():
    logits = Tensor(np.random.default_rng(19).normal(size=(2, 5, 32)))
    q = noiseless_posterior(logits).data
    np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-6)
    assert (q > 0).all()


# ---------------------------------------------------------------------------
# token dump format
# ---------------------------------------------------------------------------

def test_token_line_roundtrip():
    tokens = np.array([5, 0, 255, 17])
    line = format_token_line("sphere_0003", tokens)
    assert line == "sphere_0003 4 5 0 255 17"
    cid, parsed = parse_token_line(line)
    assert cid == "sphere_0003"
    np.testing.assert_array_equal(parsed, tokens)


def test_token_line_rejects_garbage():
    with pytest.raises(ValueError):
        parse_token_line("just_an_id")


def test_token_sequence_casts_to_int64():
    seq = TokenSequence(np.array([1, 2, 3], dtype=np.int32))
    assert seq.tokens.dtype == np.int64
