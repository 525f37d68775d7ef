"""
Timestepping Helper for the Stokes-Biot simulator

This module advances the discrete solution in time with either the
loosely-coupled scheme (step 1 -> step 2 -> step 3 per time level) or the
monolithic scheme, and keeps the energy ledger of a trajectory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from assembly_helper import (FIELD_ORDER, MONOLITHIC, STEP1, STEP2, STEP3, Problem, SubProblemSystem,
                             assemble_monolithic, assemble_step1, assemble_step2, assemble_step3, load_vector,
                             traction_vector)
from errors import SolverError, UsageError
from fem_helper import SolveResult, solve_sparse
from model_helper import reconstruct_pressure

logger = logging.getLogger(__name__)

SCHEMES = ("decoupled", "monolithic")
BLOWUP_FACTOR = 1e6


# ---------------------------------------------------------------------------
# Solution state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolutionState:
    """Discrete fields at time level n.

    ``dU_dt`` is the backward difference (U^n - U^{n-1}) / dt, zero at n = 0;
    it is kept so that one stored level is enough for the lagged interface data.
    ``p_p`` is derived from xi and eta and never set directly.
    """

    n: int
    t: float
    v: NDArray[np.float64]
    p_f: NDArray[np.float64]
    U: NDArray[np.float64]
    xi: NDArray[np.float64]
    q: NDArray[np.float64]
    eta: NDArray[np.float64]
    dU_dt: NDArray[np.float64]
    p_p: NDArray[np.float64]
    residuals: Mapping[str, float] = field(default_factory=dict)

    def get(self, name: str) -> NDArray[np.float64]:
        return getattr(self, name)

    @property
    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(self.get(name))) for name in FIELD_ORDER + ("dU_dt",))

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


def make_state(problem: Problem, n: int, t: float, fields: Mapping[str, NDArray[np.float64]],
               dU_dt: Optional[NDArray[np.float64]] = None,
               residuals: Optional[Mapping[str, float]] = None) -> SolutionState:
    """Freeze a set of field vectors into a SolutionState, deriving p_p."""
    arrays = {}
    for name in FIELD_ORDER:
        array = np.array(fields[name], dtype=np.float64)
        if array.shape != (problem.spaces.size(name),):
            raise UsageError(f"field {name} has shape {array.shape}, expected ({problem.spaces.size(name)},)")
        arrays[name] = array
    arrays["dU_dt"] = np.zeros_like(arrays["U"]) if dU_dt is None else np.array(dU_dt, dtype=np.float64)
    arrays["p_p"] = reconstruct_pressure(arrays["xi"], arrays["eta"], problem.coeffs)
    for array in arrays.values():
        array.setflags(write=False)
    return SolutionState(n=n, t=float(t), residuals=dict(residuals or {}), **arrays)


def zero_state(problem: Problem, t: float = 0.0) -> SolutionState:
    return make_state(problem, 0, t, {name: np.zeros(problem.spaces.size(name)) for name in FIELD_ORDER})


# ---------------------------------------------------------------------------
# Integrators
# ---------------------------------------------------------------------------

def _solve(sub: SubProblemSystem) -> SolveResult:
    try:
        return solve_sparse(sub.system)
    except SolverError as e:
        raise SolverError(str(e), pivot=e.pivot, step=sub.which) from e


class StokesBiotSolver:
    """Time integrators bound to one Problem."""

    def __init__(self, problem: Problem):
        self.problem = problem

    def advance_decoupled(self, state_prev: SolutionState, dt: float) -> SolutionState:
        """One time level of the loosely-coupled scheme.

        Raises:
            SolverError: naming the failing step.
        """
        problem = self.problem
        step1 = assemble_step1(problem, state_prev, dt)
        result1 = _solve(step1)
        first = step1.layout.split(result1.solution)

        step2 = assemble_step2(problem, state_prev, first["xi"], dt)
        result2 = _solve(step2)
        second = step2.layout.split(result2.solution)

        step3 = assemble_step3(problem, state_prev, first["U"], second["q"], dt)
        result3 = _solve(step3)
        third = step3.layout.split(result3.solution)

        fields = {**first, **second, **third}
        residuals = {STEP1: result1.residual, STEP2: result2.residual, STEP3: result3.residual}
        return self._finish(state_prev, dt, fields, residuals)

    def advance_monolithic(self, state_prev: SolutionState, dt: float) -> SolutionState:
        """One time level of the fully coupled scheme."""
        system = assemble_monolithic(self.problem, state_prev, dt)
        result = _solve(system)
        return self._finish(state_prev, dt, system.layout.split(result.solution), {MONOLITHIC: result.residual})

    def advance(self, state_prev: SolutionState, dt: float, scheme: str = "decoupled") -> SolutionState:
        if scheme == "decoupled":
            return self.advance_decoupled(state_prev, dt)
        if scheme == "monolithic":
            return self.advance_monolithic(state_prev, dt)
        raise UsageError(f"unknown scheme '{scheme}' (expected one of {', '.join(SCHEMES)})")

    def _finish(self, state_prev: SolutionState, dt: float, fields: Dict[str, NDArray[np.float64]],
                residuals: Dict[str, float]) -> SolutionState:
        dU_dt = (fields["U"] - state_prev.U) / dt
        state = make_state(self.problem, state_prev.n + 1, state_prev.t + dt, fields, dU_dt, residuals)
        if not state.is_finite:
            raise SolverError(f"non-finite fields at step {state.n}")
        return state

    def run(self, dt: float, n_steps: int, scheme: str = "decoupled", initial: Optional[SolutionState] = None,
            on_step: Optional[Callable[[SolutionState, SolutionState], None]] = None) -> List[SolutionState]:
        """Advance ``n_steps`` levels; returns the trajectory including the initial state."""
        if n_steps < 0:
            raise UsageError(f"number of steps must be nonnegative, got {n_steps}")
        state = initial if initial is not None else zero_state(self.problem)
        trajectory = [state]
        for _ in range(n_steps):
            new = self.advance(state, dt, scheme)
            logger.info(f"step {new.n}: t={new.t:.6g}, residual={new.max_residual:.2e}")
            if on_step is not None:
                on_step(state, new)
            trajectory.append(new)
            state = new
        return trajectory


def run_trajectory(problem: Problem, dt: float, n_steps: int, scheme: str = "decoupled",
                   initial: Optional[SolutionState] = None) -> List[SolutionState]:
    return StokesBiotSolver(problem).run(dt, n_steps, scheme, initial)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def _quadratic(matrix, x: NDArray[np.float64]) -> float:
    """x^T A x for a positive semi-definite A; round-off below zero is clamped."""
    return max(float(x @ (matrix @ x)), 0.0)


def discrete_energy(problem: Problem, state: SolutionState) -> float:
    """1/2 (2 mu_p ||D(U)||^2 + k3 ||xi||^2 + k2 ||eta||^2) over the porous region."""
    c = problem.coeffs
    mass = problem.matrix("mass_xi")
    return 0.5 * (2.0 * problem.params.mu_p * _quadratic(problem.matrix("strain_U"), state.U)
                  + c.k3 * _quadratic(mass, state.xi) + c.k2 * _quadratic(mass, state.eta))


def physical_energy(problem: Problem, state: SolutionState) -> float:
    """1/2 (2 mu_p ||D(U)||^2 + lambda_p ||div U||^2 + s0 ||p_p||^2) in the original variables."""
    p = problem.params
    return 0.5 * (2.0 * p.mu_p * _quadratic(problem.matrix("strain_U"), state.U)
                  + p.lambda_p * _quadratic(problem.matrix("divdiv_U"), state.U)
                  + p.s0 * _quadratic(problem.matrix("mass_xi"), state.p_p))


def interface_mismatch(problem: Problem, state: SolutionState) -> Tuple[float, float]:
    """L2(interface) norms of (v - d_tU - q).n and (v - d_tU).tau."""
    traces = problem.interface
    if len(traces.edges) == 0:
        return 0.0, 0.0

    def trace(name: str, kind: str, x: NDArray[np.float64]) -> NDArray[np.float64]:
        X = traces[name]
        return np.einsum("eqk,ek->eq", getattr(X, kind), x[X.dofs])

    normal = trace("v", "normal", state.v) - trace("U", "normal", state.dU_dt) - trace("q", "normal", state.q)
    tangent = trace("v", "tangent", state.v) - trace("U", "tangent", state.dU_dt)
    w = traces.weights
    return math.sqrt(float(np.sum(w * normal ** 2))), math.sqrt(float(np.sum(w * tangent ** 2)))


def _source_norm2(problem: Problem, name: str, source, t: float) -> float:
    volume = problem.volume(name)
    values = np.asarray(source(volume.points[..., 0], volume.points[..., 1], t), dtype=np.float64)
    if values.ndim == volume.weights.ndim + 1:
        values = np.sum(values ** 2, axis=0)
    else:
        values = values ** 2
    return float(np.sum(volume.weights * values))


@dataclass(frozen=True)
class LedgerRow:
    n: int
    t: float
    energy: float
    physical_energy: float
    dissipation_v: float
    dissipation_q: float
    mismatch_n: float
    mismatch_t: float
    load: float
    load_norm2: float
    fluid_balance: float
    porous_balance: float
    residual: float
    cumulative_lhs: float
    cumulative_rhs: float
    growth: bool
    blowup: bool


@dataclass
class EnergyLedger:
    """Per-step energy, dissipation, interface mismatch and load bookkeeping.

    cumulative_lhs = E^n + dt * sum(2 mu_f ||D(v)||^2 + k^-1 ||q||^2 + gamma_f mu_f / h mismatches^2)
    cumulative_rhs = E^0 + dt * sum(||f||^2 + ||g||^2 + ||h||^2 + ||s||^2)
    """

    rows: List[LedgerRow] = field(default_factory=list)
    conditions: Dict[str, bool] = field(default_factory=dict)
    initial_energy: float = 0.0

    @property
    def all_finite(self) -> bool:
        return all(math.isfinite(value) for row in self.rows for value in
                   (row.energy, row.physical_energy, row.dissipation_v, row.dissipation_q,
                    row.mismatch_n, row.mismatch_t, row.load, row.residual))

    @property
    def growth_steps(self) -> List[int]:
        return [row.n for row in self.rows if row.growth]

    @property
    def blowup_steps(self) -> List[int]:
        return [row.n for row in self.rows if row.blowup]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([vars(row) for row in self.rows], columns=list(LedgerRow.__dataclass_fields__))
        frame["ratio"] = frame["cumulative_lhs"] / frame["cumulative_rhs"].where(frame["cumulative_rhs"] > 0)
        return frame


class EnergyMonitor:
    """Builds an EnergyLedger one step at a time."""

    def __init__(self, problem: Problem, initial: SolutionState, dt: float):
        self.problem = problem
        self.dt = dt
        c = problem.coeffs
        self.loads_zero = problem.sources.is_zero and float(problem.sources.p_in(initial.t)) == 0.0
        self.ledger = EnergyLedger(
            conditions={
                "k2_gt_k1": c.k2 > c.k1,
                "k3_gt_k1": c.k3 > c.k1,
                "dt_lt_h": dt < problem.mesh.h_max,
            },
            initial_energy=discrete_energy(problem, initial),
        )
        self._previous_energy = self.ledger.initial_energy
        self._first_nonzero = self.ledger.initial_energy if self.ledger.initial_energy > 0 else None
        self._lhs_sum = 0.0
        self._rhs_sum = 0.0
        self._penalty = problem.nitsche.gamma_f * problem.params.mu_f / max(problem.mesh.h_max, 1e-300)

    def record(self, prev: SolutionState, state: SolutionState) -> LedgerRow:
        problem, dt, t = self.problem, state.t - prev.t, state.t
        sources = problem.sources
        energy = discrete_energy(problem, state)
        dissipation_v = 2.0 * problem.params.mu_f * _quadratic(problem.matrix("strain_v"), state.v)
        dissipation_q = _quadratic(problem.matrix("kinv_q"), state.q)
        mismatch_n, mismatch_t = interface_mismatch(problem, state)

        f = load_vector(problem, "v", sources.f, t) + traction_vector(problem, t)
        g = load_vector(problem, "p_f", sources.g, t)
        h = load_vector(problem, "U", sources.h, t)
        s = load_vector(problem, "eta", sources.s, t)
        load = float(f @ state.v + g @ state.p_f + h @ state.dU_dt + s @ state.p_p)
        load_norm2 = sum(_source_norm2(problem, name, source, t)
                         for name, source in (("v", sources.f), ("p_f", sources.g), ("U", sources.h),
                                              ("eta", sources.s)))

        ones_p = np.ones(problem.spaces.size("p_f"))
        ones_eta = np.ones(problem.spaces.size("eta"))
        fluid_balance = float(state.v @ (problem.matrix("div_v_p") @ ones_p)) - float(g.sum())
        porous_balance = (float(ones_eta @ (problem.matrix("mass_eta") @ (state.eta - prev.eta))) / dt
                          + float(state.q @ (problem.matrix("div_q_eta") @ ones_eta)) - float(s.sum()))

        self._lhs_sum += dt * (dissipation_v + dissipation_q + self._penalty * (mismatch_n ** 2 + mismatch_t ** 2))
        self._rhs_sum += dt * load_norm2
        growth = self.loads_zero and energy > self._previous_energy * (1.0 + 1e-12) + 1e-300
        if self._first_nonzero is None and energy > 0:
            self._first_nonzero = energy
        blowup = (not math.isfinite(energy)) or (
            self._first_nonzero is not None and energy > BLOWUP_FACTOR * self._first_nonzero)
        if growth:
            logger.warning(f"Energy grew at step {state.n} with zero loads: {self._previous_energy:.6e} -> {energy:.6e}")
        if blowup:
            logger.warning(f"Energy blow-up at step {state.n}: E={energy:.6e}")
        self._previous_energy = energy

        row = LedgerRow(
            n=state.n, t=t, energy=energy, physical_energy=physical_energy(problem, state),
            dissipation_v=dissipation_v, dissipation_q=dissipation_q,
            mismatch_n=mismatch_n, mismatch_t=mismatch_t, load=load, load_norm2=load_norm2,
            fluid_balance=fluid_balance, porous_balance=porous_balance, residual=state.max_residual,
            cumulative_lhs=energy + self._lhs_sum, cumulative_rhs=self.ledger.initial_energy + self._rhs_sum,
            growth=growth, blowup=blowup,
        )
        self.ledger.rows.append(row)
        return row


def energy_ledger(problem: Problem, trajectory: Sequence[SolutionState]) -> EnergyLedger:
    """Ledger rows for every step of a trajectory (the first state is the initial level)."""
    if not trajectory:
        raise UsageError("empty trajectory")
    dt = trajectory[1].t - trajectory[0].t if len(trajectory) > 1 else 0.0
    monitor = EnergyMonitor(problem, trajectory[0], dt)
    for prev, state in zip(trajectory[:-1], trajectory[1:]):
        monitor.record(prev, state)
    return monitor.ledger
