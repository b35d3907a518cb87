"""
截断随机测度模块测试
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dp_sampler import ChainState
from errors import ParameterError
from kernels import BetaParams, ComponentParams, build_model
from point_data import MarkSchema
from random_measure import (choose_truncation, draw_GL, expected_stick_mass, from_weights, stick_break,
                            stick_mass)


def beta_model():
    return build_model([{'family': 'beta', 'dims': [0], 'base': {'shape': 2, 'scale': 20}}], 1, MarkSchema())


def beta_state(counts, alpha):
    thetas = [ComponentParams((BetaParams(np.array([0.2 + 0.1 * j]), np.array([10.0])),))
              for j in range(len(counts))]
    s = np.repeat(np.arange(len(counts)), counts)
    return ChainState(s=s, thetas=thetas, alpha=alpha, hyper=beta_model().init_hyper())


class TestStickBreaking:
    def test_two_breaks(self):
        assert_allclose(stick_break([0.5, 0.5]), [0.5, 0.25, 0.25])

    def test_near_one_fraction(self):
        p = stick_break([1.0 - 1e-12, 0.3])
        assert p.sum() == pytest.approx(1.0, abs=1e-15)
        assert p[0] == pytest.approx(1.0)

    def test_rejects_closed_endpoints(self):
        with pytest.raises(ParameterError):
            stick_break([0.0, 0.5])

    def test_expected_mass(self, rng):
        zeta = rng.beta(1.0, 1.0, size=(100000, 20))
        assert abs(stick_mass(zeta).mean() - expected_stick_mass(1.0, 20)) < 1e-3


class TestTruncation:
    def test_fixed_alpha(self):
        assert choose_truncation(alpha=1.0, tolerance=1e-6) == 20

    def test_loose_tolerance(self):
        assert choose_truncation(alpha=1.0, tolerance=0.5) == 1

    def test_gamma_prior_alpha(self, rng):
        level = choose_truncation(alpha_prior=(2.0, 1.0), tolerance=1e-6, rng=rng)
        assert 50 <= level <= 130

    def test_needs_alpha_or_prior(self):
        with pytest.raises(ParameterError):
            choose_truncation()


class TestDrawGL:
    def test_weights_sum_to_one(self, rng):
        state = beta_state([5, 3], 1.0)
        mixture = draw_GL(state, beta_model(), 25, rng)
        assert mixture.stick_count == 25
        assert len(mixture.atoms) == 27
        assert np.all(mixture.weights >= 0)
        assert abs(mixture.weights.sum() - 1.0) < 1e-12

    def test_empty_state(self, rng):
        state = ChainState(s=np.zeros(0, dtype=int), thetas=[], alpha=1.0, hyper=beta_model().init_hyper())
        mixture = draw_GL(state, beta_model(), 10, rng)
        assert_allclose(mixture.q, [1.0])
        assert abs(mixture.weights.sum() - 1.0) < 1e-12

    def test_tiny_alpha(self, rng):
        mixture = draw_GL(beta_state([4], 1e-10), beta_model(), 5, rng)
        assert mixture.q[0] < 1e-6
        assert np.all(np.isfinite(mixture.weights))

    def test_cluster_weight_expectation(self, rng):
        state = beta_state([3, 1], 1.0)
        model = beta_model()
        q = np.array([draw_GL(state, model, 2, rng).q for _ in range(2000)])
        assert abs(q[:, 1].mean() - 0.6) < 0.02
        assert abs(q[:, 0].mean() - 0.2) < 0.02

    def test_level_must_be_positive(self, rng):
        with pytest.raises(ParameterError):
            draw_GL(beta_state([2], 1.0), beta_model(), 0, rng)

    def test_from_weights(self):
        atoms = [ComponentParams((BetaParams(np.array([0.5]), np.array([2.0])),))] * 2
        assert_allclose(from_weights(atoms, [0.4, 0.6]).weights, [0.4, 0.6])
        with pytest.raises(ParameterError):
            from_weights(atoms, [0.4, 0.4])
