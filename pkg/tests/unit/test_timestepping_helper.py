import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from assembly_helper import FIELD_ORDER, STEP2, BlockLayout, SubProblemSystem, build_problem  # noqa: E402
from errors import SolverError, UsageError  # noqa: E402
from fem_helper import SparseSystem  # noqa: E402
from mesh_helper import Region, build_channel_mesh  # noqa: E402
from model_helper import (NitscheParameters, SourceTerms, boundary_set_test1, boundary_set_test2,  # noqa: E402
                          channel_source_terms, fracture_source_terms)
from timestepping_helper import (StokesBiotSolver, _solve, discrete_energy, energy_ledger,  # noqa: E402
                                 interface_mismatch, make_state, physical_energy, run_trajectory, zero_state)

RUN_SLOW = os.getenv("SBN_RUN_SLOW", "").lower() in ("1", "true", "yes")


def _fluid_push():
    """Unit body force on the fluid, nothing else."""
    return SourceTerms(f=lambda x, y, t: np.stack([np.ones_like(x), np.zeros_like(x)]), name="fluid_push")


def _fields(problem, **values):
    fields = {name: np.zeros(problem.spaces.size(name)) for name in FIELD_ORDER}
    for name, value in values.items():
        fields[name] = np.full(problem.spaces.size(name), value)
    return fields


class TestSolutionState:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_pressure_is_derived(self, make_problem):
        problem = make_problem()
        state = make_state(problem, 0, 0.0, _fields(problem, xi=2.0, eta=3.0))
        c = problem.coeffs
        np.testing.assert_allclose(state.p_p, c.k1 * 2.0 + c.k2 * 3.0)

    def test_arrays_are_read_only(self, make_problem):
        problem = make_problem()
        state = zero_state(problem)
        with pytest.raises(ValueError):
            state.v[0] = 1.0
        assert state.is_finite
        assert state.max_residual == 0.0

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_shape_mismatch(self, make_problem):
        problem = make_problem()
        fields = _fields(problem)
        fields["q"] = np.zeros(3)
        with pytest.raises(UsageError):
            make_state(problem, 0, 0.0, fields)


class TestIntegrators:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    @pytest.mark.parametrize("scheme", ["decoupled", "monolithic"])
    def test_zero_data_stays_zero(self, make_problem, scheme):
        """Zero loads and zero initial data give the zero solution at every level."""
        problem = make_problem()
        trajectory = run_trajectory(problem, 1e-3, 3, scheme)
        assert len(trajectory) == 4
        assert trajectory[-1].n == 3
        assert trajectory[-1].t == pytest.approx(3e-3)
        for state in trajectory:
            for name in FIELD_ORDER:
                assert not np.any(state.get(name))

    def test_displacement_rate_is_stored(self, make_problem, benchmark_params):
        problem = make_problem(sources=channel_source_terms(benchmark_params))
        trajectory = run_trajectory(problem, 1e-3, 2)
        prev, last = trajectory[-2], trajectory[-1]
        np.testing.assert_allclose(last.dU_dt, (last.U - prev.U) / 1e-3)
        assert set(last.residuals) == {"step1_displacement", "step2_darcy", "step3_stokes"}
        assert last.max_residual < 1e-8

    def test_schemes_agree_without_coupling(self, make_problem):
        """With the interface switched off and no porous loads the splitting is exact."""
        problem = make_problem(nitsche=NitscheParameters.decoupled(), sources=_fluid_push())
        decoupled = run_trajectory(problem, 1e-2, 2, "decoupled")[-1]
        monolithic = run_trajectory(problem, 1e-2, 2, "monolithic")[-1]
        assert np.abs(decoupled.v).max() > 0.0
        for name in FIELD_ORDER:
            scale = max(np.abs(monolithic.get(name)).max(), 1e-30)
            assert np.abs(decoupled.get(name) - monolithic.get(name)).max() <= 1e-8 * scale

    def test_on_step_callback(self, make_problem):
        calls = []
        StokesBiotSolver(make_problem()).run(1e-3, 2, on_step=lambda prev, new: calls.append((prev.n, new.n)))
        assert calls == [(0, 1), (1, 2)]

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_unknown_scheme(self, make_problem):
        problem = make_problem()
        with pytest.raises(UsageError):
            StokesBiotSolver(problem).advance(zero_state(problem), 1e-3, "implicit")

    def test_solver_error_names_step(self):
        """A singular sub-problem is reported with the name of its step."""
        system = SparseSystem(sp.csr_matrix((2, 2)), np.zeros(2))
        sub = SubProblemSystem(STEP2, system, BlockLayout(("q",), (2,)), np.zeros(0, dtype=np.int64))
        with pytest.raises(SolverError) as excinfo:
            _solve(sub)
        assert excinfo.value.step == STEP2
        assert str(excinfo.value).startswith(STEP2 + ": ")


class TestEnergy:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_pseudo_pressure_energy(self, make_problem):
        """E = k3 |Omega_p| / 2 for xi = 1 and everything else zero."""
        problem = make_problem()
        state = make_state(problem, 0, 0.0, _fields(problem, xi=1.0))
        assert discrete_energy(problem, state) == pytest.approx(0.5 * problem.coeffs.k3, rel=1e-12)

    def test_physical_energy(self, make_problem):
        """xi = 1 means p_p = k1; the storage energy is s0 k1^2 |Omega_p| / 2."""
        problem = make_problem()
        state = make_state(problem, 0, 0.0, _fields(problem, xi=1.0))
        expected = 0.5 * problem.params.s0 * problem.coeffs.k1 ** 2
        assert physical_energy(problem, state) == pytest.approx(expected, rel=1e-12)

    def test_rigid_translation_has_no_elastic_energy(self, make_problem):
        """Only round-off is left, relative to mu_p |U|^2, and it never goes negative."""
        problem = make_problem()
        state = make_state(problem, 0, 0.0, _fields(problem, U=0.3))
        scale = problem.params.mu_p * float(state.U @ state.U)
        energy = discrete_energy(problem, state)
        assert 0.0 <= energy <= 1e-10 * scale
        assert 0.0 <= physical_energy(problem, state) <= 1e-10 * scale

    def test_interface_mismatch(self, make_problem):
        """v = (0, 1) with still porous fields leaves a unit normal jump on a unit interface."""
        problem = make_problem()
        fields = _fields(problem)
        n = problem.spaces["v"].n_scalar
        fields["v"][n:] = 1.0
        normal, tangent = interface_mismatch(problem, make_state(problem, 1, 1e-3, fields))
        assert normal == pytest.approx(1.0, rel=1e-12)
        assert tangent == pytest.approx(0.0, abs=1e-14)

    def test_ledger_for_zero_run(self, make_problem):
        problem = make_problem()
        ledger = energy_ledger(problem, run_trajectory(problem, 1e-3, 2))
        assert [row.n for row in ledger.rows] == [1, 2]
        assert ledger.all_finite
        assert not ledger.growth_steps and not ledger.blowup_steps
        assert ledger.conditions["k2_gt_k1"]
        assert not ledger.conditions["k3_gt_k1"]
        frame = ledger.to_frame()
        assert list(frame["energy"]) == [0.0, 0.0]
        assert "ratio" in frame.columns

    def test_porous_balance_closes(self, make_problem, channel_mesh):
        """Fluid injected into a closed porous block is stored: the eta balance has no residual."""
        problem = make_problem(bcs=boundary_set_test2(),
                               sources=fracture_source_terms(channel_mesh.region_area(Region.FLUID)))
        trajectory = run_trajectory(problem, 1e-2, 2)
        ledger = energy_ledger(problem, trajectory)
        mass = problem.matrix("mass_eta")
        for row, prev, state in zip(ledger.rows, trajectory[:-1], trajectory[1:]):
            storage = float(np.ones(mass.shape[0]) @ (mass @ (state.eta - prev.eta))) / 1e-2
            assert abs(row.porous_balance) <= 1e-6 * (1.0 + abs(storage))
        assert np.abs(trajectory[-1].q).max() > 0.0

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_empty_trajectory(self, make_problem):
        with pytest.raises(UsageError):
            energy_ledger(make_problem(), [])


@pytest.mark.skipif(not RUN_SLOW, reason="set SBN_RUN_SLOW=1 to run the long energy run")
class TestEnergyAcceptance:
    def test_channel_benchmark_energy(self, benchmark_params):
        """Ten steps of the channel benchmark on the coarsest mesh: finite, nonnegative, no blow-up."""
        problem = build_problem(build_channel_mesh(5, 5), benchmark_params, NitscheParameters(), boundary_set_test1(),
                                channel_source_terms(benchmark_params), threads=0)
        ledger = energy_ledger(problem, run_trajectory(problem, 1e-4, 10))
        assert ledger.all_finite
        assert all(row.energy >= 0.0 for row in ledger.rows)
        assert not ledger.blowup_steps
