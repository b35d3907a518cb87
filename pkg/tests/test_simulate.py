"""
模拟模块测试
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from errors import ContractError, DominationError, ParameterError
from kernels import BetaParams, ComponentParams, NormalParams, build_model
from point_data import MarkDescriptor, MarkSchema, ObservationWindow
from random_measure import single_atom
from simulate import (SECTION51_BOUND, SECTION51_SCHEMA, SECTION51_TOTAL, SimSpec, homogeneous_intensity,
                      section51_intensity, section51_marks, simulate_from_mixture, simulate_marks,
                      simulate_nhpp, simulate_section51)


class TestThinning:
    def test_constant_rate_mean(self, rng):
        spec = SimSpec(homogeneous_intensity(50.0), 50.0)
        counts = [simulate_nhpp(spec, rng).N for _ in range(2000)]
        assert abs(np.mean(counts) - 50.0) < 3 * np.sqrt(50.0 / 2000)

    def test_sub_window_dispersion(self, rng):
        spec = SimSpec(homogeneous_intensity(100.0), 100.0)
        counts = np.array([np.sum(simulate_nhpp(spec, rng).locations[:, 0] < 0.5) for _ in range(2000)])
        assert abs(counts.mean() - 50.0) < 1.0
        assert 0.85 < counts.var() / counts.mean() < 1.15

    def test_zero_intensity(self, rng):
        spec = SimSpec(homogeneous_intensity(0.0), 10.0)
        assert simulate_nhpp(spec, rng).N == 0

    def test_bound_must_be_positive(self, rng):
        with pytest.raises(ParameterError):
            simulate_nhpp(SimSpec(homogeneous_intensity(1.0), 0.0), rng)

    def test_domination(self, rng):
        with pytest.raises(DominationError):
            simulate_nhpp(SimSpec(homogeneous_intensity(20.0), 10.0), rng)

    def test_spatial(self, rng):
        spec = SimSpec(homogeneous_intensity(30.0), 30.0, window=ObservationWindow.unit(2))
        pattern = simulate_nhpp(spec, rng)
        assert pattern.locations.shape[1] == 2
        assert np.all((pattern.locations > 0) & (pattern.locations < 1))

    def test_marks_follow_generator(self, rng):
        marks = simulate_marks(np.array([[0.2], [0.4]]), lambda t, r: 10 * t, rng)
        assert_allclose(marks, [[2.0], [4.0]])


class TestSyntheticExperiment:
    def test_total_intensity(self):
        v, _ = integrate.quad(lambda t: float(section51_intensity(t)[0]), 0.0, 1.0, points=[0.01, 0.1])
        assert_allclose(v, SECTION51_TOTAL, rtol=1e-8)

    def test_supremum_at_origin(self):
        assert_allclose(section51_intensity(1e-12)[0], SECTION51_BOUND, rtol=1e-6)
        assert np.all(section51_intensity(np.linspace(0.0, 1.0, 1001)) <= SECTION51_BOUND)

    def test_marks_at_right_end(self, rng):
        marks = section51_marks(np.ones(20000), rng)
        assert np.all(marks[:, 0] == 1.0)
        assert abs(marks[:, 1].mean() - 4.0) < 0.05

    def test_marks_at_left_end(self, rng):
        marks = section51_marks(np.full(20000, 1e-9), rng)
        assert np.all(marks[:, 0] == 0.0)
        assert abs(marks[:, 1].mean() + 10.0) < 0.05

    def test_binary_mark_probability(self, rng):
        t = rng.uniform(0.45, 0.55, size=100000)
        marks = section51_marks(t, rng)
        assert abs(marks[:, 0].mean() - 0.25) < 0.01

    def test_seeded_pattern(self):
        a = simulate_section51(7)
        b = simulate_section51(7)
        assert_allclose(a.locations, b.locations)
        assert_allclose(a.marks, b.marks)
        assert 400 <= a.N <= 600
        assert a.schema == SECTION51_SCHEMA


class TestFromMixture:
    def test_event_count(self, rng):
        schema = MarkSchema((MarkDescriptor('y', 'continuous'),))
        model = build_model([{'family': 'beta', 'dims': [0]}, {'family': 'normal', 'mark': 'y'}], 1, schema)
        mixture = single_atom(ComponentParams((BetaParams(np.array([0.3]), np.array([8.0])),
                                               NormalParams(1.0, 1.0))))
        counts = [simulate_from_mixture(mixture, model, 40.0, ObservationWindow.unit(1), schema, rng).N
                  for _ in range(500)]
        assert abs(np.mean(counts) - 40.0) < 1.0

    def test_sorted_in_time(self, rng):
        model = build_model([{'family': 'beta', 'dims': [0]}], 1, MarkSchema())
        mixture = single_atom(ComponentParams((BetaParams(np.array([0.5]), np.array([2.0])),)))
        pattern = simulate_from_mixture(mixture, model, 100.0, ObservationWindow.unit(1), MarkSchema(), rng)
        assert np.all(np.diff(pattern.locations[:, 0]) >= 0)

    def test_unmodeled_marks(self, rng):
        schema = MarkSchema((MarkDescriptor('y', 'continuous'),))
        model = build_model([{'family': 'beta', 'dims': [0]}], 1, schema)
        mixture = single_atom(ComponentParams((BetaParams(np.array([0.5]), np.array([2.0])),)))
        with pytest.raises(ContractError):
            simulate_from_mixture(mixture, model, 10.0, ObservationWindow.unit(1), schema, rng)
