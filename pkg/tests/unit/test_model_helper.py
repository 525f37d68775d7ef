import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from errors import ParameterError  # noqa: E402
from mesh_helper import EdgeTag  # noqa: E402
from model_helper import (BoundaryConditionSet, Constraint, NitscheParameters, PhysicalParameters,  # noqa: E402
                          SourceTerms, bjs_beta, boundary_set_physical, boundary_set_test1, boundary_set_test2,
                          channel_source_terms, divergence_from_pseudo, fracture_source_terms, pseudo_coefficients,
                          pseudo_from_physical, reconstruct_pressure)
from model_helper import test1_sources as manufactured_sources  # noqa: E402


class TestPseudoPressures:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_round_trip_identities(self):
        """(p_p, div U) -> (xi, eta) -> (p_p, div U) recovers both for random parameters."""
        rng = np.random.default_rng(7)
        for _ in range(1000):
            params = PhysicalParameters(mu_f=1.0, mu_p=1.0, lambda_p=rng.uniform(0.0, 1e4),
                                        s0=rng.uniform(1e-6, 1.0), alpha=rng.uniform(0.1, 2.0))
            c = pseudo_coefficients(params)
            p_p, phi = rng.uniform(-10.0, 10.0, size=2)
            xi, eta = pseudo_from_physical(p_p, phi, params)
            assert reconstruct_pressure(xi, eta, c) == pytest.approx(p_p, rel=1e-9, abs=1e-9)
            assert divergence_from_pseudo(xi, eta, c) == pytest.approx(phi, rel=1e-9, abs=1e-9)

    def test_channel_benchmark_coefficients(self):
        """alpha = 1, lambda_p = 4.28e6, s0 = 5e-6 give D = 22.4."""
        c = pseudo_coefficients(PhysicalParameters.channel_benchmark())
        assert c.k1 == pytest.approx(1.0 / 22.4)
        assert c.k2 == pytest.approx(4.28e6 / 22.4)
        assert c.k3 == pytest.approx(5e-6 / 22.4)
        assert c.k2 > c.k1 > c.k3

    def test_arrays_are_accepted(self):
        c = pseudo_coefficients(PhysicalParameters.channel_benchmark())
        xi = np.array([1.0, 2.0])
        eta = np.array([0.5, -0.5])
        np.testing.assert_allclose(reconstruct_pressure(xi, eta, c), c.k1 * xi + c.k2 * eta)

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_degenerate_denominator(self):
        """alpha = 0 together with lambda_p = 0 leaves the reformulation undefined."""
        params = PhysicalParameters(mu_f=1.0, mu_p=1.0, lambda_p=0.0, s0=1e-3, alpha=0.0)
        with pytest.raises(ParameterError):
            pseudo_coefficients(params)


class TestPhysicalParameters:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_scalar_conductivity_shorthand(self):
        params = PhysicalParameters(mu_f=1.0, mu_p=1.0, lambda_p=1.0, s0=0.1, alpha=1.0, conductivity=2.0)
        assert params.conductivity == (2.0, 0.0, 2.0)
        np.testing.assert_allclose(params.conductivity_inverse, 0.5 * np.eye(2))

    def test_bjs_beta(self):
        """beta = alpha mu_f sqrt(3) / sqrt(tr K) with K = mu_f k."""
        params = PhysicalParameters.fracture()
        expected = 1.0 * 1e-3 * math.sqrt(3.0) / math.sqrt(1e-3 * 2e-8)
        assert bjs_beta(params) == pytest.approx(expected)

    def test_fracture_parameters(self):
        params = PhysicalParameters.fracture()
        assert params.beta == pytest.approx(3.47e3)
        assert params.conductivity == (1e-8, 0.0, 1e-8)

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    @pytest.mark.parametrize("changes", [
        {"mu_f": 0.0}, {"mu_p": -1.0}, {"s0": 0.0}, {"lambda_p": -1.0}, {"alpha": -0.5},
        {"beta": -1.0}, {"conductivity": (1.0, 2.0, 1.0)}, {"mu_f": float("nan")},
    ])
    def test_invalid_values(self, changes):
        values = dict(mu_f=1.0, mu_p=1.0, lambda_p=1.0, s0=0.1, alpha=1.0)
        values.update(changes)
        with pytest.raises(ParameterError):
            PhysicalParameters(**values)

    def test_parameter_error_is_value_error(self):
        with pytest.raises(ValueError):
            PhysicalParameters(mu_f=-1.0, mu_p=1.0, lambda_p=1.0, s0=0.1, alpha=1.0)


class TestNitscheParameters:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_defaults(self):
        nitsche = NitscheParameters()
        assert nitsche.gamma_f == 1500.0
        assert nitsche.varsigma == 1
        assert nitsche.coupling and not nitsche.use_bjs

    def test_decoupled(self):
        nitsche = NitscheParameters.decoupled()
        assert not nitsche.coupling
        assert nitsche.gamma_f == 0.0
        assert nitsche.varsigma == -1

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_bad_varsigma(self):
        with pytest.raises(ParameterError):
            NitscheParameters(varsigma=2)

    def test_zero_penalty_needs_coupling_off(self):
        with pytest.raises(ParameterError):
            NitscheParameters(gamma_f=0.0)


class TestSources:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_manufactured_sources_shapes(self):
        params = PhysicalParameters.channel_benchmark()
        x = np.linspace(0.0, 1.0, 5)
        y = np.linspace(-1.0, 1.0, 5)
        f, g, h, s = manufactured_sources(x, y, 0.0, params)
        assert f.shape == (2, 5)
        assert h.shape == (2, 5)
        np.testing.assert_allclose(g, -2.0 * math.pi)
        assert s.shape == (5,)

    def test_manufactured_values(self):
        """At x = 1/2, y = 0, t = 0 the closed forms reduce to simple numbers."""
        params = PhysicalParameters.channel_benchmark()
        f, _, h, s = manufactured_sources(0.5, 0.0, 0.0, params)
        assert f[0] == pytest.approx(math.pi * math.cos(math.pi / 2) + math.pi * params.mu_f)
        assert f[1] == pytest.approx(0.0)
        assert h[0] == pytest.approx(params.alpha * math.pi * math.cos(math.pi / 2), abs=1e-12)
        assert s == pytest.approx((params.s0 - 0.75 * math.pi ** 2) - 2.0 * math.pi)

    def test_channel_source_terms_wrap(self):
        params = PhysicalParameters.channel_benchmark()
        sources = channel_source_terms(params, p_in=lambda t: 3.0)
        assert sources.name == "test1"
        assert not sources.is_zero
        assert sources.p_in(1.0) == 3.0
        np.testing.assert_allclose(sources.g(np.zeros(3), np.zeros(3), 0.5), -2.0 * math.pi * math.cos(math.pi / 2))

    def test_fracture_injection_density(self):
        sources = fracture_source_terms(fluid_area=5.0, rate=25.0)
        np.testing.assert_allclose(sources.g(np.zeros((2, 3)), np.zeros((2, 3)), 0.0), 5.0)
        assert sources.f(np.zeros(4), np.zeros(4), 0.0).shape == (2, 4)

    def test_zero_sources(self):
        sources = SourceTerms()
        assert sources.is_zero
        assert sources.p_in(2.0) == 0.0
        assert np.all(sources.h(np.ones(3), np.ones(3), 0.0) == 0.0)

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_fracture_needs_area(self):
        with pytest.raises(ParameterError):
            fracture_source_terms(fluid_area=0.0)


class TestBoundaryConditions:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_channel_benchmark_set(self):
        bcs = boundary_set_test1()
        assert bcs.treatment(EdgeTag.FLUID_OUT, "p_f") is Constraint.ALL
        assert bcs.treatment(EdgeTag.POROUS_EXT, "eta") is Constraint.ALL
        assert bcs.treatment(EdgeTag.INTERFACE, "v") is Constraint.NATURAL
        assert bcs.has_pressure_dirichlet()
        assert not bcs.needs_pressure_gauge()

    def test_traction_free_top(self):
        bcs = boundary_set_test1("traction_free")
        assert bcs.treatment(EdgeTag.FLUID_EXT, "v") is Constraint.NATURAL

    def test_fracture_set_needs_gauge(self):
        """Walls all around the fluid and no pressure data leave p_f floating."""
        bcs = boundary_set_test2()
        assert bcs.treatment(EdgeTag.POROUS_IN, "q") is Constraint.NORMAL
        assert bcs.treatment(EdgeTag.POROUS_EXT, "U") is Constraint.NORMAL
        assert bcs.needs_pressure_gauge()

    def test_physical_set_has_open_boundary(self):
        bcs = boundary_set_physical()
        assert bcs.traction_tags == (EdgeTag.FLUID_IN,)
        assert not bcs.needs_pressure_gauge()

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_missing_tag(self):
        with pytest.raises(ParameterError):
            BoundaryConditionSet({EdgeTag.FLUID_IN: {"v": Constraint.ALL, "p_f": Constraint.NATURAL}})

    def test_normal_constraint_on_scalar(self):
        treatments = dict(boundary_set_test1().treatments)
        treatments[EdgeTag.POROUS_EXT] = {"U": "all", "xi": "normal", "q": "all", "eta": "all"}
        with pytest.raises(ParameterError):
            BoundaryConditionSet(treatments)

    def test_unknown_fluid_ext_option(self):
        with pytest.raises(ParameterError):
            boundary_set_test1("slip")
