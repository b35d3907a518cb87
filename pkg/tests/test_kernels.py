"""
混合核模块测试
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from errors import ContractError, ParameterError, SupportError
from kernels import (BetaBase, BetaBlock, BetaParams, CategoricalBlock, CategoricalParams, ComponentParams,
                     DirichletBase, GammaBase, LogitNormalParams, LogNormalShiftParams, MixtureModel,
                     NIGBase, NIWBase, NormalParams, PoissonMarkBlock, SarmanovBase, SarmanovBlock,
                     SarmanovParams, Transform, TruncPoissonParams, UniformBase, UniformScaleBlock,
                     UniformScaleParams, beta_cdf, beta_pdf, build_block, build_model, conjugate_posterior_draw,
                     log_poisson_tail, logit_normal_pdf, marginal_likelihood, mark_kernel_pdf, rho_bounds,
                     sarmanov_beta_pdf, trunc_poisson_cdf, trunc_poisson_logpmf, trunc_poisson_mean,
                     uniform_scale_pdf)
from point_data import MarkDescriptor, MarkSchema


REAL_SCHEMA = MarkSchema((MarkDescriptor('y', 'continuous', support='real'),))
SHIFTED_SCHEMA = MarkSchema((MarkDescriptor('deaths', 'continuous', support='shifted', offset=9.5),))


class TestBetaKernel:
    def test_limit_at_zero(self):
        # Beta(1, 10) 在 0 处的密度为 10
        assert_allclose(beta_pdf(1e-12, 1.0 / 11.0, 11.0), 10.0, rtol=1e-6)

    def test_uniform_case(self):
        assert_allclose(beta_pdf([0.1, 0.5, 0.9], 0.5, 2.0), [1.0, 1.0, 1.0])

    def test_rejects_bad_parameters(self):
        with pytest.raises(ParameterError):
            beta_pdf(0.5, 1.0, 2.0)
        with pytest.raises(ParameterError):
            beta_pdf(0.5, 0.5, 0.0)
        with pytest.raises(ParameterError):
            beta_pdf(1.5, 0.5, 2.0)

    def test_cdf_matches_quadrature(self):
        for t in (0.1, 0.37, 0.8):
            v, _ = integrate.quad(lambda s: float(beta_pdf(s, 0.3, 7.0)), 0.0, t)
            assert_allclose(beta_cdf(t, 0.3, 7.0), v, rtol=1e-8)


class TestSarmanov:
    def test_rho_bounds_at_center(self):
        lo, hi = rho_bounds(0.5, 0.5)
        assert_allclose([lo, hi], [-4.0, 4.0])

    def test_rho_bounds_near_corner(self):
        lo, hi = rho_bounds(0.9, 0.9)
        assert_allclose([lo, hi], [-1.0 / 0.81, 1.0 / 0.09])
        assert lo == pytest.approx(-1.2346, abs=1e-4)
        assert hi == pytest.approx(11.111, abs=1e-3)

    def test_zero_rho_is_product(self):
        p = SarmanovParams(np.array([0.3, 0.6]), np.array([4.0, 9.0]), 0.0)
        x = np.array([[0.2, 0.7], [0.5, 0.5]])
        expected = beta_pdf(x[:, 0], 0.3, 4.0) * beta_pdf(x[:, 1], 0.6, 9.0)
        assert_allclose(sarmanov_beta_pdf(x, p), expected)

    def test_rho_outside_bounds(self):
        p = SarmanovParams(np.array([0.5, 0.5]), np.array([4.0, 4.0]), 4.5)
        with pytest.raises(ParameterError):
            sarmanov_beta_pdf(np.array([[0.5, 0.5]]), p)

    def test_integrates_to_one(self):
        p = SarmanovParams(np.array([0.4, 0.6]), np.array([5.0, 6.0]), 2.0)
        v, _ = integrate.dblquad(lambda x2, x1: float(sarmanov_beta_pdf(np.array([[x1, x2]]), p)[0]),
                                 0.0, 1.0, 0.0, 1.0)
        assert_allclose(v, 1.0, atol=1e-6)

    def test_marginal_is_beta(self):
        p = SarmanovParams(np.array([0.4, 0.6]), np.array([5.0, 6.0]), -3.0)
        v, _ = integrate.quad(lambda x2: float(sarmanov_beta_pdf(np.array([[0.3, x2]]), p)[0]), 0.0, 1.0)
        assert_allclose(v, beta_pdf(0.3, 0.4, 5.0), rtol=1e-7)

    def test_sampling_keeps_marginals(self, rng):
        mu = np.array([0.3, 0.6])
        tau = np.array([5.0, 5.0])
        rho = 0.5 * rho_bounds(*mu)[1]
        block = SarmanovBlock(SarmanovBase())
        locs, _ = block.sample(SarmanovParams(mu, tau, rho), 20000, rng)
        assert abs(locs[0].mean() - 0.3) < 0.01
        assert abs(locs[1].mean() - 0.6) < 0.01
        var = mu * (1 - mu) / (tau + 1)
        cov = np.cov(locs[0], locs[1])[0, 1]
        assert abs(cov - rho * var[0] * var[1]) < 8e-4

    @pytest.mark.slow
    def test_metropolis_recovers_means(self, rng):
        mu = np.array([0.3, 0.6])
        tau = np.array([10.0, 10.0])
        block = SarmanovBlock(SarmanovBase((2.0, 2.0), (10.0, 10.0)))
        locs, _ = block.sample(SarmanovParams(mu, tau, 0.5 * rho_bounds(*mu)[1]), 400, rng)
        x = np.column_stack([locs[0], locs[1]])
        hyper = block.init_hyper()
        p = SarmanovParams(np.array([0.5, 0.5]), np.array([5.0, 5.0]), 0.0)
        trace = []
        for _ in range(8000):
            p, _ = block.metropolis(p, x, None, hyper, 0.03, rng)
            lo, hi = rho_bounds(*p.mu)
            assert lo < p.rho < hi
            trace.append(p.mu)
        assert_allclose(np.mean(trace[4000:], axis=0), x.mean(axis=0), atol=0.03)


class TestUniformScale:
    def test_density(self):
        assert uniform_scale_pdf(0.3, 0.5) == pytest.approx(2.0)
        assert uniform_scale_pdf(0.7, 0.5) == 0.0

    def test_mirrored(self):
        assert uniform_scale_pdf(0.7, 0.5, 'nondecreasing') == pytest.approx(2.0)
        assert uniform_scale_pdf(0.3, 0.5, 'nondecreasing') == 0.0

    def test_theta_range(self):
        with pytest.raises(ParameterError):
            uniform_scale_pdf(0.3, 1.5)

    @pytest.mark.slow
    def test_metropolis_stays_above_last_event(self, rng):
        block = UniformScaleBlock(UniformBase(1.0, 1.0))
        x = rng.uniform(0.0, 0.6, size=(100, 1))
        hyper = block.init_hyper()
        p = UniformScaleParams(0.8)
        trace = []
        for _ in range(3000):
            p, _ = block.metropolis(p, x, None, hyper, 0.05, rng)
            trace.append(p.theta)
        # 后验 ∝ θ^{-n} 于 (max t, 1)，集中在最后一个事件之上
        assert min(trace) > x.max()
        assert abs(np.mean(trace[1000:]) - x.max()) < 0.02

    def test_mirrored_metropolis_stays_below_first_event(self, rng):
        block = UniformScaleBlock(UniformBase(1.0, 1.0), direction='nondecreasing')
        x = rng.uniform(0.5, 1.0, size=(30, 1))
        p = UniformScaleParams(0.9, 'nondecreasing')
        for _ in range(200):
            p, _ = block.metropolis(p, x, None, block.init_hyper(), 0.1, rng)
            assert 1.0 - p.theta < x.min()


class TestTruncatedPoisson:
    @pytest.mark.parametrize('rate', [2.0, 9.99, 10.0, 30.0])
    def test_tail_matches_scipy(self, rate):
        assert_allclose(log_poisson_tail(10, rate), np.log(stats.poisson.sf(9, rate)), atol=1e-9)

    def test_tail_for_tiny_rate(self):
        r = 1e-3
        expected = stats.poisson.logpmf(10, r) + np.log1p(r / 11 + r ** 2 / (11 * 12))
        assert_allclose(log_poisson_tail(10, r), expected, rtol=1e-12)

    @pytest.mark.parametrize('rate', [3.0, 60.0])
    def test_normalized(self, rate):
        y = np.arange(10, 400)
        assert_allclose(np.exp(trunc_poisson_logpmf(y, rate, 10)).sum(), 1.0, atol=1e-10)

    def test_mass_at_bound(self):
        expected = stats.poisson.pmf(10, 5.0) / stats.poisson.sf(9, 5.0)
        assert_allclose(np.exp(trunc_poisson_logpmf(10, 5.0, 10)), expected, rtol=1e-10)
        assert np.exp(trunc_poisson_logpmf(10, 5.0, 10)) == pytest.approx(0.5697, abs=1e-4)

    def test_below_bound_is_zero(self):
        assert trunc_poisson_logpmf(9, 3.0, 10) == -np.inf

    def test_cdf_matches_cumulative_sum(self):
        y = np.arange(10, 16)
        pmf = np.exp(trunc_poisson_logpmf(y, 12.0, 10))
        assert_allclose(trunc_poisson_cdf(15, 12.0, 10), pmf.sum(), rtol=1e-12)
        assert trunc_poisson_cdf(9, 12.0, 10) == 0.0

    def test_mean(self):
        y = np.arange(10, 500)
        pmf = np.exp(trunc_poisson_logpmf(y, 60.0, 10))
        assert_allclose(trunc_poisson_mean(60.0, 10), np.sum(y * pmf), rtol=1e-10)
        assert trunc_poisson_mean(4.0) == 4.0

    def test_mark_kernel_rejects_below_bound(self):
        with pytest.raises(SupportError):
            mark_kernel_pdf(5, TruncPoissonParams(3.0, 10))

    def test_sampling_respects_bound(self, rng):
        block = PoissonMarkBlock(GammaBase(1.0, 1.0 / 60.0), 0, 10)
        _, marks = block.sample(TruncPoissonParams(3.0, 10), 2000, rng)
        assert marks[0].min() >= 10
        assert abs(marks[0].mean() - trunc_poisson_mean(3.0, 10)) < 0.05


class TestMarkKernels:
    def test_categorical(self):
        assert mark_kernel_pdf(1, CategoricalParams(np.array([0.3, 0.7]))) == pytest.approx(0.7)

    def test_normal(self):
        assert mark_kernel_pdf(0.0, NormalParams(0.0, 1.0)) == pytest.approx(1.0 / np.sqrt(2 * np.pi))

    def test_shifted_lognormal_normalized(self):
        p = LogNormalShiftParams(1.0, 0.5, 9.5)
        v, _ = integrate.quad(lambda y: float(mark_kernel_pdf(y, p)), 9.5, np.inf)
        assert_allclose(v, 1.0, atol=1e-8)

    def test_transform_outside_support(self):
        w, lj = Transform('log', 9.5).forward(np.array([9.0, 10.5]))
        assert np.isnan(w[0]) and np.isnan(lj[0])
        assert_allclose(w[1], 0.0)

    def test_logit_normal_at_center(self):
        # φ(0) · 1/(0.5·0.5)
        v = logit_normal_pdf(np.array([[0.5]]), np.array([0.0]), np.array([[1.0]]))
        assert_allclose(v, [4.0 / np.sqrt(2 * np.pi)])
        assert v[0] == pytest.approx(1.595769, abs=1e-6)


class TestConjugate:
    def test_niw_posterior_mean(self, rng):
        base = NIWBase(delta=[0.0, 0.0], kappa=1.0, nu=5.0, omega=np.eye(2))
        obs = rng.normal(size=(20, 2)) + np.array([1.0, -1.0])
        n = obs.shape[0]
        xbar = obs.mean(axis=0)
        kn = 1.0 + n
        dn = n * xbar / kn
        scatter = (obs - xbar).T @ (obs - xbar)
        psin = 2.0 * np.eye(2) + scatter + (n / kn) * np.outer(xbar, xbar)
        expected_cov = psin / (10.0 + n - 2 - 1)

        draws = [conjugate_posterior_draw(obs, base, rng) for _ in range(4000)]
        assert_allclose(np.mean([p.cov for p in draws], axis=0), expected_cov, atol=0.02)
        assert_allclose(np.mean([p.mean for p in draws], axis=0), dn, atol=0.02)

    def test_nig_returns_normal(self, rng):
        p = conjugate_posterior_draw(np.array([0.1, 0.4]), NIGBase(), rng)
        assert isinstance(p, NormalParams)
        assert p.phi > 0

    def test_non_conjugate_requests(self, rng):
        with pytest.raises(ContractError):
            conjugate_posterior_draw([0.5], BetaBase(), rng)
        with pytest.raises(ContractError):
            conjugate_posterior_draw([12], GammaBase(1.0, 1.0 / 60.0), rng, bound=10)

    def test_nig_marginal_is_student_t(self):
        base = NIGBase(delta=0.5, kappa=0.2, nu=3.0, omega=2.0)
        assert_allclose(marginal_likelihood(1.3, base), stats.t.pdf(1.3, 6.0, loc=0.5, scale=2.0), rtol=1e-10)

    def test_dirichlet_marginal(self):
        assert marginal_likelihood(1, DirichletBase(np.array([0.5, 0.5]))) == pytest.approx(0.5)

    def test_dirichlet_posterior_mean(self, rng):
        base = DirichletBase(np.array([1.0, 1.0]))
        draws = [conjugate_posterior_draw([0, 0, 0, 1], base, rng).q for _ in range(20000)]
        # Dirichlet(1 + 3, 1 + 1)
        assert_allclose(np.mean(draws, axis=0), [2.0 / 3.0, 1.0 / 3.0], atol=0.01)

    def test_gamma_poisson_marginal_normalized(self):
        base = GammaBase(1.0, 1.0 / 60.0)
        total = sum(marginal_likelihood(y, base) for y in range(3000))
        assert_allclose(total, 1.0, atol=1e-8)

    @pytest.mark.slow
    def test_truncated_marginal_normalized(self):
        base = GammaBase(1.0, 1.0 / 60.0)
        total = sum(marginal_likelihood(y, base, bound=10) for y in range(10, 1500))
        assert_allclose(total, 1.0, atol=1e-6)
        assert marginal_likelihood(9, base, bound=10) == 0.0


class TestBlocks:
    def test_beta_scale_update(self, rng):
        block = BetaBlock(BetaBase(2.0, 20.0, (1.0, 0.05)))
        params = [BetaParams(np.array([0.5]), np.array([2.0]))]
        hyper = block.init_hyper()
        draws = [block.update_hyper(params, hyper, rng)['scale'][0] for _ in range(20000)]
        # ga(1 + 2, 0.05 + 1/2)
        assert abs(np.mean(draws) - 3.0 / 0.55) < 0.1

    def test_normal_omega_update(self, rng):
        block = build_block({'family': 'normal', 'mark': 'y',
                             'base': {'delta': 0, 'kappa': 1, 'nu': 2, 'omega': 1, 'omega_prior': [1, 1]}},
                            REAL_SCHEMA)
        params = [NormalParams(0.0, 1.0), NormalParams(0.0, 2.0)]
        hyper = block.init_hyper()
        draws = [block.update_hyper(params, hyper, rng)['omega'][0, 0] for _ in range(10000)]
        # ga(1 + 2·2, 1 + 1 + 1/2)
        assert abs(np.mean(draws) - 2.0) < 0.04

    @pytest.mark.parametrize('d', [2, 3])
    def test_multivariate_omega_update(self, rng, d):
        prior_B = 0.5 * np.eye(d) + 0.1
        block = build_block({'family': 'logit_normal', 'dims': list(range(d)),
                             'base': {'delta': [0.0] * d, 'kappa': 1.0, 'nu': 3.0, 'omega': np.eye(d).tolist(),
                                      'omega_prior': [2.0, prior_B.tolist()]}}, MarkSchema())
        covs = [0.5 * np.eye(d) + 0.2, np.diag(np.arange(1.0, d + 1.0))]
        params = [LogitNormalParams(np.zeros(d), c) for c in covs]
        hyper = block.init_hyper()
        draws = np.array([block.update_hyper(params, hyper, rng)['omega'] for _ in range(10000)])
        # W(2 + 2·3, B + Σ_1^{-1} + Σ_2^{-1})，E[Ω] = a·B^{-1}
        post_a = 2.0 + 2 * 3.0
        post_B = prior_B + sum(np.linalg.inv(c) for c in covs)
        assert_allclose(draws.mean(axis=0), post_a * np.linalg.inv(post_B), atol=0.05)
        s = np.linalg.inv(2.0 * post_B)
        assert_allclose(draws[:, 0, 0].var(), 2.0 * post_a * 2.0 * s[0, 0] ** 2, rtol=0.1)

    def test_location_cdf_matches_quadrature(self):
        block = build_block({'family': 'logit_normal', 'dims': [0],
                             'base': {'delta': [0.0], 'kappa': 1.0, 'nu': 2.0, 'omega': [[1.0]]}}, MarkSchema())
        p = LogitNormalParams(np.array([0.3]), np.array([[0.5]]))
        v, _ = integrate.quad(lambda t: float(logit_normal_pdf(np.array([[t]]), p.mean, p.cov)[0]), 0.0, 0.4)
        assert_allclose(float(block.location_cdf(p, 0.4, 0)), v, rtol=1e-8)

    def test_marginal_over_mark_is_location_marginal(self):
        block = build_block({'family': 'logit_normal', 'dims': [0], 'marks': ['deaths'],
                             'base': {'delta': [0.0, 2.5], 'kappa': 0.1, 'nu': 3.0,
                                      'omega': [[0.3, 0.0], [0.0, 0.15]]}}, SHIFTED_SCHEMA)
        hyper = block.init_hyper()
        x = np.array([[0.3]])

        # 在 w = log(y - 9.5) 尺度上积分
        def joint(w):
            y = np.array([[9.5 + np.exp(w)]])
            return float(np.exp(block.log_marginal(x, y, hyper)[0] + w))

        v, _ = integrate.quad(joint, -40.0, 40.0, points=[2.5], limit=200)
        loc_only = float(np.exp(block.log_marginal(x, np.array([[10.0]]), hyper, marks_used=())[0]))
        assert_allclose(v, loc_only, rtol=1e-6)

    @pytest.mark.slow
    def test_beta_metropolis_finds_mean(self, rng):
        block = BetaBlock(BetaBase(2.0, 20.0))
        x = rng.beta(6.0, 14.0, size=(500, 1))
        hyper = block.init_hyper()
        p = BetaParams(np.array([0.5]), np.array([10.0]))
        trace = []
        for _ in range(4000):
            p, _ = block.metropolis(p, x, None, hyper, 0.1, rng)
            trace.append(p.mu[0])
        assert abs(np.mean(trace[2000:]) - x.mean()) < 0.02


class TestMixtureModel:
    def test_dimension_covered_twice(self):
        with pytest.raises(ContractError):
            MixtureModel([BetaBlock(BetaBase(), (0,)), BetaBlock(BetaBase(), (0,))], 1, MarkSchema())

    def test_categorical_on_continuous_mark(self):
        with pytest.raises(ContractError):
            MixtureModel([BetaBlock(BetaBase(), (0,)), CategoricalBlock(DirichletBase(np.ones(2)), 0, 2)],
                         1, REAL_SCHEMA)

    def test_unknown_family(self):
        with pytest.raises(ParameterError):
            build_block({'family': 'gamma'}, MarkSchema())

    def test_wishart_degrees_of_freedom(self):
        with pytest.raises(ParameterError):
            NIWBase(delta=[0.0, 0.0, 0.0], kappa=1.0, nu=0.9, omega=np.eye(3))

    def test_kernel_without_marks(self, rng):
        model = build_model([{'family': 'beta', 'dims': [0]},
                             {'family': 'normal', 'mark': 'y'}], 1, REAL_SCHEMA)
        params = ComponentParams((BetaParams(np.array([0.4]), np.array([5.0])), NormalParams(1.0, 2.0)))
        x = np.array([[0.2], [0.6]])
        y = np.array([[0.0], [3.0]])
        full = model.log_kernel(x, y, params)
        loc = model.log_kernel(x, y, params, marks_used=())
        assert_allclose(loc, np.log(beta_pdf(x[:, 0], 0.4, 5.0)))
        assert_allclose(full - loc, np.log(mark_kernel_pdf(y[:, 0], NormalParams(1.0, 2.0))))

    def test_params_serialization(self):
        params = ComponentParams((BetaParams(np.array([0.4]), np.array([5.0])), TruncPoissonParams(3.0, 10)))
        back = ComponentParams.from_dict(params.to_dict())
        assert back.to_dict() == params.to_dict()
