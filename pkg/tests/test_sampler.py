import numpy as np
import pytest

from farmer.gmm import GmmParams, log_softmax_np, standard_gaussian
from farmer.sampler import (
    CfgConfig,
    guided_token,
    naive_cfg_gmm,
    propose,
    resample_informative,
    resample_redundant,
    unguided_config,
    weigh,
)


def gaussian(mu, sigma):
    return GmmParams(np.zeros(1), [[mu]], [[sigma]])


class TestConfig:
    def test_paper_operating_point_largest_model(self):
        cfg = CfgConfig(w=1.5, s_c=5, s_u=5, t_pi=1.0, t_sigma=1.0,
                        t_pi_v=0.1, t_sigma_v=1.0, t_s=1.1)
        assert cfg.w == 1.5 and cfg.s_c == 5 and cfg.s_u == 5

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            CfgConfig(w=-0.5)
        with pytest.raises(ValueError):
            CfgConfig(s_c=0, s_u=0)
        with pytest.raises(ValueError):
            CfgConfig(t_pi=0.0)
        with pytest.raises(ValueError):
            CfgConfig(t_sigma=-1.0)
        with pytest.raises(ValueError):
            CfgConfig(redundant_multiplier=0)


class TestPropose:
    def test_no_unconditional_candidates(self):
        cfg = CfgConfig(s_c=4, s_u=0)
        cands, is_cond = propose(gaussian(0, 1), gaussian(1, 1), cfg, np.random.default_rng(0))
        assert len(cands) == 4 and is_cond.all()

    def test_pool_size_five_plus_five(self):
        cfg = CfgConfig(s_c=5, s_u=5)
        cands, is_cond = propose(gaussian(0, 1), gaussian(1, 1), cfg, np.random.default_rng(1))
        assert len(cands) == 10
        assert is_cond.sum() == 5 and (~is_cond).sum() == 5
        assert is_cond[:5].all()  # conditional candidates come first

    def test_seeded_determinism(self):
        cfg = CfgConfig(s_c=3, s_u=2)
        a, _ = propose(gaussian(0, 1), gaussian(1, 1), cfg, np.random.default_rng(2))
        b, _ = propose(gaussian(0, 1), gaussian(1, 1), cfg, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)

    def test_dims_mismatch_rejected(self):
        with pytest.raises(ValueError):
            propose(standard_gaussian(2), standard_gaussian(3), CfgConfig(), np.random.default_rng(0))


class TestWeigh:
    def test_zero_guidance_pure_conditional_is_uniform(self):
        cfg = CfgConfig(w=0.0, s_c=6, s_u=0)
        cands, is_cond = propose(gaussian(0, 1), gaussian(0, 1), cfg, np.random.default_rng(3))
        log_w = weigh(cands, is_cond, gaussian(0, 1), gaussian(0, 1), cfg)
        np.testing.assert_allclose(log_w, np.full(6, -np.log(6)), atol=1e-12)

    def test_weights_always_normalize(self):
        rng = np.random.default_rng(4)
        for w in (0.0, 0.7, 2.5):
            cfg = CfgConfig(w=w, s_c=4, s_u=4, t_s=1.3)
            g_c, g_u = gaussian(1.0, 0.8), gaussian(-0.5, 1.2)
            cands, is_cond = propose(g_c, g_u, cfg, rng)
            log_w = weigh(cands, is_cond, g_c, g_u, cfg)
            assert np.exp(log_w).sum() == pytest.approx(1.0, abs=1e-6)
            assert (np.exp(log_w) >= 0).all()

    def test_hand_case_unit_gaussians(self):
        # G_c = N(1,1), G_u = N(0,1), w=1, conditional candidate z=1:
        # delta = log p_c(1) - log p_u(1) = 0.5, raw log-weight = t_s * 0.5
        t_s = 1.1
        cfg = CfgConfig(w=1.0, s_c=1, s_u=1, t_s=t_s)
        cands = np.array([[1.0], [0.0]])
        is_cond = np.array([True, False])
        log_w = weigh(cands, is_cond, gaussian(1, 1), gaussian(0, 1), cfg)
        # candidate 2 (unconditional, z=0): delta = -0.5, multiplier w+1=2
        raw = np.array([1.0 * 0.5 * t_s, 2.0 * (-0.5) * t_s])
        expect = raw - np.log(np.exp(raw).sum())
        np.testing.assert_allclose(log_w, expect, atol=1e-12)

    def test_t_s_multiplies_before_normalization(self):
        cfg1 = CfgConfig(w=1.0, s_c=2, s_u=2, t_s=1.0)
        cfg2 = CfgConfig(w=1.0, s_c=2, s_u=2, t_s=2.0)
        rng = np.random.default_rng(5)
        g_c, g_u = gaussian(1.0, 0.7), gaussian(0.0, 1.0)
        cands, is_cond = propose(g_c, g_u, cfg1, rng)
        lw1 = weigh(cands, is_cond, g_c, g_u, cfg1)
        lw2 = weigh(cands, is_cond, g_c, g_u, cfg2)
        # doubling t_s doubles the raw log-weights; lw1 differs from the raw
        # weights only by the normalizer, which log-softmax cancels
        np.testing.assert_allclose(lw2, log_softmax_np(2.0 * lw1), atol=1e-9)


class TestResample:
    def test_single_candidate_always_selected(self):
        cands = np.array([[3.3]])
        out = resample_informative(cands, np.zeros(1), np.random.default_rng(6))
        assert out[0] == 3.3

    def test_uniform_frequencies(self):
        m, trials = 5, 100_000
        cands = np.arange(m, dtype=float)[:, None]
        log_w = np.full(m, -np.log(m))
        rng = np.random.default_rng(7)
        picks = np.array([resample_informative(cands, log_w, rng)[0] for _ in range(trials)])
        freq = np.bincount(picks.astype(int), minlength=m) / trials
        sigma = np.sqrt((1 / m) * (1 - 1 / m) / trials)
        assert np.abs(freq - 1 / m).max() < 3 * sigma + 1e-9

    def test_degenerate_weight_always_wins(self):
        cands = np.array([[0.0], [1.0], [2.0]])
        log_w = np.log(np.array([1e-300, 1.0 - 2e-300, 1e-300]))
        log_w = log_softmax_np(log_w)
        rng = np.random.default_rng(8)
        for _ in range(50):
            assert resample_informative(cands, log_w, rng)[0] == 1.0

    def test_unnormalized_weights_rejected(self):
        with pytest.raises(ValueError, match="normalized"):
            resample_informative(np.zeros((2, 1)), np.array([0.0, 0.0]), np.random.default_rng(0))

    def test_redundant_n1_matches_informative_semantics(self):
        cands = np.array([[0.0], [1.0], [2.0], [3.0]])
        log_w = np.full(4, -np.log(4.0))
        a = resample_redundant(cands, log_w, 1, np.random.default_rng(9))
        b = resample_informative(cands, log_w, np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b)

    def test_redundant_pool_scaling(self):
        cfg = CfgConfig(s_c=5, s_u=5, redundant_multiplier=4)
        cands, _ = propose(gaussian(0, 1), gaussian(0, 1), cfg, np.random.default_rng(10),
                           count_scale=cfg.redundant_multiplier)
        assert len(cands) == 40

    def test_all_equal_candidates_give_equal_tokens(self):
        cands = np.full((6, 2), 1.25)
        log_w = np.full(6, -np.log(6.0))
        out = resample_redundant(cands, log_w, 5, np.random.default_rng(11))
        np.testing.assert_array_equal(out, np.full((5, 2), 1.25))


def grid_law(g_c, g_u, w, grid):
    """Brute-force grid normalization of p_c^(1+w) / p_u^w."""
    log_p = (1 + w) * g_c.log_prob(grid[:, None]) - w * g_u.log_prob(grid[:, None])
    log_p -= log_p.max()
    p = np.exp(log_p)
    return p / p.sum()


def empirical_tv(draws, g_c, g_u, w, lo, hi, bins):
    fine = np.linspace(lo, hi, 4001)
    target_fine = grid_law(g_c, g_u, w, fine)
    edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.digitize(fine, edges) - 1, 0, bins - 1)
    target = np.bincount(which, weights=target_fine, minlength=bins)
    hist = np.histogram(draws, bins=edges)[0] / len(draws)
    return 0.5 * np.abs(hist - target).sum()


class TestTargetLaw:
    def test_resampled_distribution_converges_to_guided_law(self):
        # moderate pool for the unit suite; the acceptance run uses 4096+4096
        g_c = GmmParams(np.log([0.5, 0.5]), [[-1.0], [1.5]], [[0.6], [0.4]])
        g_u = GmmParams(np.log([0.7, 0.3]), [[0.0], [1.0]], [[1.0], [0.8]])
        w = 1.0
        cfg = CfgConfig(w=w, s_c=512, s_u=512)
        rng = np.random.default_rng(12)
        draws = np.array([guided_token(g_c, g_u, cfg, rng)[0] for _ in range(4000)])
        tv = empirical_tv(draws, g_c, g_u, w, -4.0, 4.0, 24)
        assert tv < 0.08, f"TV {tv}"

    def test_unguided_point_matches_plain_ancestral_law(self):
        g_c = GmmParams(np.log([0.4, 0.6]), [[-1.2], [0.9]], [[0.5], [0.7]])
        g_u = gaussian(0.0, 1.0)
        cfg = unguided_config(CfgConfig(s_c=5, s_u=5))
        rng = np.random.default_rng(13)
        draws = np.array([guided_token(g_c, g_u, cfg, rng)[0] for _ in range(20_000)])
        direct = g_c.sample(np.random.default_rng(14), size=20_000)[:, 0]
        edges = np.linspace(-4, 4, 25)
        h1 = np.histogram(draws, bins=edges)[0] / len(draws)
        h2 = np.histogram(direct, bins=edges)[0] / len(direct)
        assert 0.5 * np.abs(h1 - h2).sum() < 0.05

    def test_unit_temperatures_bit_identical_to_untempered_path(self):
        # hand-rolled untempered propose/weigh/resample against the cfg path
        g_c = GmmParams(np.log([0.3, 0.7]), [[0.5], [2.0]], [[0.6], [0.9]])
        g_u = gaussian(0.0, 1.1)
        cfg = CfgConfig(w=0.8, s_c=4, s_u=3, t_pi=1.0, t_sigma=1.0,
                        t_pi_v=1.0, t_sigma_v=1.0, t_s=1.0)
        token = guided_token(g_c, g_u, cfg, np.random.default_rng(15))

        rng = np.random.default_rng(15)
        cands = np.concatenate([g_c.sample(rng, size=4), g_u.sample(rng, size=3)])
        delta = g_c.log_prob(cands) - g_u.log_prob(cands)
        mult = np.array([cfg.w] * 4 + [cfg.w + 1.0] * 3)
        log_w = log_softmax_np(mult * delta)
        idx = rng.choice(7, p=np.exp(log_w))
        np.testing.assert_array_equal(token, cands[idx])


class TestNaiveCfg:
    def test_interpolates_log_weights(self):
        g_c = GmmParams(np.log([0.6, 0.4]), [[0.0], [1.0]], [[1.0], [1.0]])
        g_u = GmmParams(np.log([0.4, 0.6]), [[0.0], [1.0]], [[1.0], [1.0]])
        guided = naive_cfg_gmm(g_c, g_u, w=1.0)
        raw = g_c.log_weights + 1.0 * (g_c.log_weights - g_u.log_weights)
        np.testing.assert_allclose(guided.log_weights, log_softmax_np(raw), atol=1e-12)
        np.testing.assert_array_equal(guided.means, g_c.means)
