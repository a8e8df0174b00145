import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cgpt.cgp_attention import (CGPHeadParams, ExactGrams, McConfig, attention_matrix_exact,
                                attention_matrix_from_grams, conditional_blocks, exact_grams, forward_exact,
                                latent_inputs, latent_samples, predictive_variance_exact,
                                predictive_variance_from_grams, regularizer_exact, regularizer_terms)
from cgpt.gp_core import standard_normals
from cgpt.kernels import BranchProjection, cross_matrix
from instances import exact_head, points
from oracles import gauss_jordan_inverse, matmul_loops, nested_mean, nested_variance


def _tied_head(seed, n=3, d=3, s=3, sigma=0.0):
    """Identical q/k branches with W_lat = W_k, so every Gram block is the same matrix."""
    rng = np.random.default_rng(seed)
    W = torch.tensor(rng.normal(size=(s, d)))
    X = torch.tensor(rng.normal(size=(n, d)) * 2.0)
    p = CGPHeadParams(BranchProjection(W, 1.0), BranchProjection(W, 1.0), torch.tensor(rng.normal(size=(s, d))), W,
                      sigma)
    return X, p


def _scalar_grams(k_q=1.0, k_qo=0.5, k_o=1.0, k_ok=0.5, k_k=1.0, s2=1.0):
    t = lambda v: torch.tensor([[v]], dtype=torch.float64)  # noqa: E731
    return ExactGrams(t(k_q), t(k_k), t(k_o), t(k_qo), t(k_ok), s2)


class TestLatentInputs:
    def test_identity(self):
        X = torch.randn(4, 3, dtype=torch.float64)
        _, p = exact_head(0, d=3, s=3)
        p.W_lat = torch.eye(3, dtype=torch.float64)
        assert torch.equal(latent_inputs(X, p), X)

    def test_zero(self):
        _, p = exact_head(1)
        assert torch.count_nonzero(latent_inputs(torch.zeros(3, 4, dtype=torch.float64), p)) == 0

    def test_matches_loop_product(self):
        X, p = exact_head(2, n=5)
        np.testing.assert_allclose(latent_inputs(X, p), matmul_loops(X.numpy(), p.W_lat.numpy().T), atol=1e-14)

    def test_shape_mismatch(self):
        _, p = exact_head(3)
        with pytest.raises(ValueError):
            latent_inputs(torch.zeros(3, 5, dtype=torch.float64), p)


class TestParams:
    def test_rejects_inconsistent_shapes(self):
        _, p = exact_head(0)
        with pytest.raises(ValueError):
            CGPHeadParams(p.branch_q, p.branch_k, torch.zeros(3, 4), p.W_lat)

    def test_rejects_negative_sigma(self):
        _, p = exact_head(0)
        with pytest.raises(ValueError):
            CGPHeadParams(p.branch_q, p.branch_k, p.W_v, p.W_lat, -0.1)

    def test_mc_config(self):
        with pytest.raises(ValueError):
            McConfig(0, 1)


class TestAttentionMatrix:
    def test_scalar(self):
        K = attention_matrix_from_grams(_scalar_grams(1.0, 1.0, 1.0, 1.0, 1.0, 1.0))
        np.testing.assert_allclose(K, [[0.25]], atol=1e-15)

    def test_single_token_model(self):
        X, p = _tied_head(0, n=1, sigma=1.0)
        np.testing.assert_allclose(attention_matrix_exact(X, p), [[0.25]], atol=1e-15)

    def test_identical_branches_give_identity(self):
        X, p = _tied_head(1)
        np.testing.assert_allclose(attention_matrix_exact(X, p), np.eye(3), atol=1e-6)

    def test_nested_monte_carlo_mean(self):
        X, p = exact_head(10, n=3, d=2, s=1, sigma=0.5, scale=1.0, sq=1.2, sk=0.9)
        z = np.random.default_rng(3).normal(size=3)
        est, se = nested_mean(*points(X, p), 1.2, 0.9, 0.25, z, 200_000, np.random.default_rng(4))
        got = attention_matrix_exact(X, p).numpy() @ z
        assert np.all(np.abs(got - est) <= 3 * se), (got, est, se)

    def test_cross_gram_reversal_and_asymmetry(self):
        X, p = exact_head(11, n=6)
        K_qk = cross_matrix(X, X, p.branch_q, p.branch_k)
        K_kq = cross_matrix(X, X, p.branch_k, p.branch_q)
        assert torch.equal(K_qk, K_kq.T)
        assert float((K_qk - K_qk.T).abs().max()) > 1e-6

    def test_tied_first_stage_symmetric(self):
        X, p = _tied_head(12, n=5, sigma=0.3)
        g = exact_grams(X, p)
        M = g.K_qo @ torch.linalg.solve(g.K_o + g.sigma2 * torch.eye(5, dtype=torch.float64), g.K_ok)
        np.testing.assert_allclose(M, M.T, atol=1e-10)


class TestForward:
    def test_single_column_composition(self):
        X, p = exact_head(20, n=4, s=1)
        r = forward_exact(X, p, McConfig(4, 0))
        g = exact_grams(X, p)
        z = (g.K_k + g.sigma2 * torch.eye(4, dtype=torch.float64)) @ (X @ p.W_v.T)
        np.testing.assert_allclose(r.V_plus, attention_matrix_exact(X, p) @ z, atol=1e-12)

    def test_deterministic(self):
        X, p = exact_head(21, n=5)
        a, b = forward_exact(X, p, McConfig(8, 3)), forward_exact(X, p, McConfig(8, 3))
        assert torch.equal(a.V_plus, b.V_plus) and torch.equal(a.U, b.U)
        assert not torch.equal(a.U, forward_exact(X, p, McConfig(8, 4)).U)

    def test_identity_configuration_returns_Z(self):
        X, p = _tied_head(22)
        r = forward_exact(X, p, McConfig(2, 0), with_regularizer=False)
        Z = exact_grams(X, p).K_k @ (X @ p.W_v.T)
        np.testing.assert_allclose(r.V_plus, Z, atol=1e-5)

    def test_regularizer_sums_output_dims(self):
        X, p = exact_head(23, n=4, s=3)
        mc = McConfig(16, 5)
        r = forward_exact(X, p, mc)
        g = exact_grams(X, p)
        Z = (g.K_k + g.sigma2 * torch.eye(4, dtype=torch.float64)) @ (X @ p.W_v.T)
        per_dim = [regularizer_exact(r.V_plus[:, a], Z[:, a], X, p, mc) for a in range(3)]
        np.testing.assert_allclose(float(r.U), float(sum(per_dim)), rtol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(24)
        _, p = exact_head(24, n=4)
        X = torch.tensor(rng.normal(size=(3, 4, 4)))
        eps = standard_normals((3, 8, 4), 9)
        r = forward_exact(X, p, McConfig(8, 0), eps=eps)
        for b in range(3):
            rb = forward_exact(X[b], p, McConfig(8, 0), eps=eps[b])
            np.testing.assert_allclose(r.V_plus[b], rb.V_plus, atol=1e-12)
            np.testing.assert_allclose(float(r.U[b]), float(rb.U), rtol=1e-10)


class TestPredictiveVariance:
    def test_large_noise_approaches_prior(self):
        X, p = exact_head(30, n=4, sigma=1e3)
        V = predictive_variance_exact(X, p)
        K_q = exact_grams(X, p).K_q
        assert float(torch.linalg.norm(V - K_q) / torch.linalg.norm(K_q)) <= 1e-3

    def test_scalar_expansion(self):
        k_q, k_qo, k_o, k_ok, k_k, s2 = 1.0, 0.5, 1.0, 0.5, 1.0, 1.0
        inner = k_q - k_qo * k_qo / (k_o + s2)  # Var[z_q | z_o]
        gain = k_qo / (k_o + s2)  # E[z_q | z_o] = gain * z_o
        var_o = k_o - k_ok * k_ok / (k_k + s2)  # Var[z_o | z_k]
        expected = inner + gain * gain * var_o
        got = predictive_variance_from_grams(_scalar_grams(k_q, k_qo, k_o, k_ok, k_k, s2))
        np.testing.assert_allclose(got, [[expected]], atol=1e-10)
        assert expected == pytest.approx(0.9296875, abs=1e-15)

    def test_nested_monte_carlo_variance(self):
        X, p = exact_head(31, n=2, d=2, s=1, sigma=0.5, scale=1.0, sq=1.3, sk=0.8)
        z = np.random.default_rng(1).normal(size=2)
        est, se = nested_variance(*points(X, p), 1.3, 0.8, 0.25, z, 500_000, np.random.default_rng(2))
        got = predictive_variance_exact(X, p).numpy()
        assert np.all(np.abs(got - est) <= 3 * se), (got, est, se)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
    def test_symmetric_psd(self, seed, sigma):
        X, p = exact_head(seed, n=5, sigma=sigma)
        V = predictive_variance_exact(X, p).numpy()
        np.testing.assert_allclose(V, V.T, atol=1e-8)
        assert np.linalg.eigvalsh(V).min() >= -1e-8


def _columns(X, p, mc):
    r = forward_exact(X, p, mc)
    g = exact_grams(X, p)
    Z = (g.K_k + g.sigma2 * torch.eye(g.n, dtype=torch.float64)) @ (X @ p.W_v.T)
    return r.V_plus[:, 0], Z[:, 0], g


class TestRegularizer:
    def test_zero_residual_sample(self):
        X, p = exact_head(40, n=3)
        mc = McConfig(1, 17)
        _, z, g = _columns(X, p, mc)
        eps = standard_normals((1, 3), mc.seed)
        zo = latent_samples(g, eps)[:, 0]
        nu = g.K_qo @ torch.linalg.solve(g.K_o + g.sigma2 * torch.eye(3, dtype=torch.float64), zo)
        R = float(regularizer_exact(nu, z, X, p, mc))
        S_q, S_k = (m.numpy() for m in conditional_blocks(g))
        m_k = g.K_ok.T.numpy() @ gauss_jordan_inverse(g.K_o.numpy() + g.sigma2 * np.eye(3)) @ zo.numpy()
        r_k = z.numpy() - m_k
        k_terms = r_k @ gauss_jordan_inverse(S_k) @ r_k + np.linalg.slogdet(S_k)[1]
        np.testing.assert_allclose(R, np.linalg.slogdet(S_q)[1] + k_terms, rtol=1e-9)

    def test_scalar_transcription(self):
        rng = np.random.default_rng(41)
        W = [torch.tensor([[w]], dtype=torch.float64) for w in rng.normal(size=4)]
        X = torch.tensor([[0.8]], dtype=torch.float64)
        sigma, sq, sk = 0.4, 1.1, 0.7
        p = CGPHeadParams(BranchProjection(W[0], sq), BranchProjection(W[1], sk), W[2], W[3], sigma)
        mc = McConfig(5, 8)
        nu, z = 0.3, -0.6
        x = 0.8
        q, k, o = W[0].item() * x, W[1].item() * x, W[3].item() * x
        k_q, k_k, k_o = sq * sq, sk * sk, 1.0
        k_qo, k_ko = sq * math.exp(-0.5 * (q - o) ** 2), sk * math.exp(-0.5 * (k - o) ** 2)
        s2 = sigma * sigma
        var_q = k_q - k_qo * k_qo / (k_o + s2)
        var_k = k_k - k_ko * k_ko / (k_o + s2)
        eps = standard_normals((5, 1), 8).numpy()[:, 0]
        total = 0.0
        for e in eps:
            zo = math.sqrt(k_o) * e
            total += (nu - k_qo * zo / (k_o + s2)) ** 2 / var_q + (z - k_ko * zo / (k_o + s2)) ** 2 / var_k
        expected = total / 5 + math.log(var_q) + math.log(var_k)
        got = regularizer_exact(torch.tensor([nu], dtype=torch.float64), torch.tensor([z], dtype=torch.float64), X, p, mc)
        np.testing.assert_allclose(float(got), expected, rtol=1e-10)

    def test_finite_and_deterministic(self):
        X, p = exact_head(42, n=6)
        nu, z, _ = _columns(X, p, McConfig(4, 0))
        a = regularizer_exact(nu, z, X, p, McConfig(32, 2))
        assert torch.isfinite(a) and torch.equal(a, regularizer_exact(nu, z, X, p, McConfig(32, 2)))

    def _sequence(self, seed):
        X, p = exact_head(seed, n=3, sigma=0.3)
        nu, z, g = _columns(X, p, McConfig(8, 0))
        eps = standard_normals((1024, 3), seed)
        vals = [float(regularizer_terms(g, nu[:, None], z[:, None], eps[: 2**k])[0]) for k in range(11)]
        return vals, g, nu, z, eps

    @pytest.mark.xfail(strict=True, reason="MC differences are random; a strictly monotone chain is not guaranteed")
    def test_successive_halving_differences_shrink_monotonically(self):
        for seed in range(3):
            d = np.abs(np.diff(self._sequence(seed)[0]))
            assert np.all(np.diff(d) < 0), d

    def test_sample_count_sequence_converges_to_limit(self):
        for seed in range(3):
            vals, g, nu, z, eps = self._sequence(seed)
            A_inv = gauss_jordan_inverse(g.K_o.numpy() + g.sigma2 * np.eye(3))
            S_q, S_k = (m.numpy() for m in conditional_blocks(g))
            limit = 0.0
            for t, K_c, S in ((nu.numpy(), g.K_qo.numpy(), S_q), (z.numpy(), g.K_ok.T.numpy(), S_k)):
                G = K_c @ A_inv
                cov_m = G @ g.K_o.numpy() @ G.T
                S_inv = gauss_jordan_inverse(S)
                limit += t @ S_inv @ t + np.trace(S_inv @ cov_m) + np.linalg.slogdet(S)[1]
            # per-sample terms give the MC standard error at each count
            per = [float(regularizer_terms(g, nu[:, None], z[:, None], eps[i: i + 1])[0]) for i in range(1024)]
            sd = np.std(per, ddof=1)
            for k, v in enumerate(vals):
                assert abs(v - limit) <= 4 * sd / math.sqrt(2**k) + 1e-9, (seed, k, v, limit)
            assert abs(vals[-1] - limit) < abs(vals[0] - limit) or abs(vals[0] - limit) < sd
