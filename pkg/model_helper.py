"""
Model Helper for the Stokes-Biot simulator

This module holds the physical and interface-coupling parameters, the
pseudo-pressure change of variables

    xi  = alpha * p_p - lambda_p * phi,      eta = s0 * p_p + alpha * phi,
    p_p = k1 * xi + k2 * eta,                phi = k1 * eta - k3 * xi,

with k1 = alpha / D, k2 = lambda_p / D, k3 = s0 / D and D = alpha^2 + lambda_p * s0,
the manufactured source terms of the benchmark scenarios and the boundary
condition sets applied to the tagged mesh edges.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from errors import ParameterError
from mesh_helper import BOUNDARY_TAGS, EdgeTag, Region

logger = logging.getLogger(__name__)

FLUID_FIELDS = ("v", "p_f")
POROUS_FIELDS = ("U", "xi", "q", "eta")
VECTOR_FIELDS = ("v", "U", "q")

# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalParameters:
    """Model constants.

    ``conductivity`` is the symmetric hydraulic conductivity tensor given as
    (kxx, kxy, kyy); the permeability is K = mu_f * k.
    """

    mu_f: float
    mu_p: float
    lambda_p: float
    s0: float
    alpha: float
    conductivity: Tuple[float, float, float] = (1.0, 0.0, 1.0)
    beta: float = 0.0

    def __post_init__(self):
        k = tuple(float(c) for c in np.atleast_1d(np.asarray(self.conductivity, dtype=np.float64)).ravel())
        if len(k) == 1:
            k = (k[0], 0.0, k[0])
        if len(k) != 3:
            raise ParameterError("conductivity must be a scalar or (kxx, kxy, kyy)")
        object.__setattr__(self, "conductivity", k)
        for name in ("mu_f", "mu_p", "lambda_p", "s0", "alpha", "beta"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.mu_f <= 0 or self.mu_p <= 0:
            raise ParameterError(f"viscosity and shear modulus must be positive (mu_f={self.mu_f}, mu_p={self.mu_p})")
        if self.lambda_p < 0:
            raise ParameterError(f"lambda_p must be nonnegative, got {self.lambda_p}")
        if self.s0 <= 0:
            raise ParameterError(f"s0 must be positive, got {self.s0}")
        # alpha = 0 is the uncoupled elasticity limit; it is degenerate only together with lambda_p = 0.
        if self.alpha < 0:
            raise ParameterError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta < 0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        eigenvalues = np.linalg.eigvalsh(self.conductivity_matrix)
        if eigenvalues.min() <= 0:
            raise ParameterError(f"conductivity must be positive definite, eigenvalues {eigenvalues}")

    @property
    def conductivity_matrix(self) -> NDArray[np.float64]:
        kxx, kxy, kyy = self.conductivity
        return np.array([[kxx, kxy], [kxy, kyy]])

    @property
    def conductivity_inverse(self) -> NDArray[np.float64]:
        matrix = self.conductivity_matrix
        if abs(np.linalg.det(matrix)) <= 0.0:
            raise ParameterError("conductivity tensor is singular")
        return np.linalg.inv(matrix)

    @classmethod
    def channel_benchmark(cls) -> "PhysicalParameters":
        """Parameters of the manufactured channel benchmark."""
        return cls(mu_f=0.01, mu_p=1e8, lambda_p=4.28e6, s0=5e-6, alpha=1.0, conductivity=(1.0, 0.0, 1.0))

    @classmethod
    def fracture(cls) -> "PhysicalParameters":
        """Parameters of the fluid-filled fracture scenario."""
        return cls(mu_f=1e-3, mu_p=2.92e8, lambda_p=1.94e10, s0=6.9e-5, alpha=1.0,
                   conductivity=(1e-8, 0.0, 1e-8), beta=3.47e3)


@dataclass(frozen=True)
class PseudoPressureCoefficients:
    k1: float
    k2: float
    k3: float


@dataclass(frozen=True)
class NitscheParameters:
    """Interface coupling and stabilization weights.

    ``coupling=False`` switches every interface operator off (gamma_f may then
    be 0); ``pseudo_stabilization`` enables the gamma_q gradient terms on xi
    and eta.
    """

    gamma_f: float = 1500.0
    varsigma: int = 1
    gamma_stab: float = 1.0
    gamma_stab_prime: float = 0.0
    gamma_q: float = 1e-3
    use_bjs: bool = False
    coupling: bool = True
    pseudo_stabilization: bool = False

    def __post_init__(self):
        if self.varsigma not in (-1, 0, 1):
            raise ParameterError(f"varsigma must be -1, 0 or 1, got {self.varsigma}")
        if self.coupling and not self.gamma_f > 0:
            raise ParameterError(f"gamma_f must be positive, got {self.gamma_f}")
        if self.gamma_f < 0:
            raise ParameterError(f"gamma_f must be nonnegative, got {self.gamma_f}")
        for name in ("gamma_stab", "gamma_stab_prime", "gamma_q"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @classmethod
    def decoupled(cls) -> "NitscheParameters":
        """Interface terms switched off (gamma_f = 0, varsigma = -1)."""
        return cls(gamma_f=0.0, varsigma=-1, gamma_stab=0.0, gamma_stab_prime=0.0, coupling=False)


# ---------------------------------------------------------------------------
# Pseudo-pressure algebra
# ---------------------------------------------------------------------------

def pseudo_coefficients(params: PhysicalParameters) -> PseudoPressureCoefficients:
    """Derived coefficients (k1, k2, k3) of the pseudo-pressure reformulation.

    Raises:
        ParameterError: alpha^2 + lambda_p * s0 = 0.
    """
    denominator = params.alpha ** 2 + params.lambda_p * params.s0
    if not denominator > 0:
        raise ParameterError("degenerate parameters: alpha^2 + lambda_p * s0 = 0")
    return PseudoPressureCoefficients(params.alpha / denominator, params.lambda_p / denominator,
                                      params.s0 / denominator)


def pseudo_from_physical(p_p, phi, params: PhysicalParameters):
    """(p_p, div U) -> (xi, eta)."""
    xi = params.alpha * np.asarray(p_p) - params.lambda_p * np.asarray(phi)
    eta = params.s0 * np.asarray(p_p) + params.alpha * np.asarray(phi)
    return xi, eta


def reconstruct_pressure(xi, eta, c: PseudoPressureCoefficients):
    """p_p = k1 * xi + k2 * eta, pointwise."""
    return c.k1 * np.asarray(xi) + c.k2 * np.asarray(eta)


def divergence_from_pseudo(xi, eta, c: PseudoPressureCoefficients):
    """phi = k1 * eta - k3 * xi, pointwise."""
    return c.k1 * np.asarray(eta) - c.k3 * np.asarray(xi)


def bjs_beta(params: PhysicalParameters) -> float:
    """Slip resistance alpha * mu_f * sqrt(3) / sqrt(tr K) with K = mu_f * k."""
    trace = params.mu_f * (params.conductivity[0] + params.conductivity[2])
    if not trace > 0:
        raise ParameterError(f"permeability trace must be positive, got {trace}")
    return params.alpha * params.mu_f * math.sqrt(3.0) / math.sqrt(trace)


# ---------------------------------------------------------------------------
# Source terms
# ---------------------------------------------------------------------------

VectorSource = Callable[[NDArray[np.float64], NDArray[np.float64], float], NDArray[np.float64]]
ScalarSource = Callable[[NDArray[np.float64], NDArray[np.float64], float], NDArray[np.float64]]


def _zero_scalar(x, y, t):
    return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)


def _zero_vector(x, y, t):
    return np.zeros((2,) + np.broadcast(np.asarray(x), np.asarray(y)).shape)


def _zero_time(t):
    return 0.0


@dataclass(frozen=True)
class SourceTerms:
    """Body force f and fluid source g on the fluid region, body force h and
    fluid source s on the porous region, and the inflow pressure p_in(t).

    Vector sources return arrays shaped (2, ...) matching the point arrays.
    """

    f: VectorSource = _zero_vector
    g: ScalarSource = _zero_scalar
    h: VectorSource = _zero_vector
    s: ScalarSource = _zero_scalar
    p_in: Callable[[float], float] = _zero_time
    name: str = "zero"

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def test1_sources(x, y, t: float, params: PhysicalParameters):
    """Manufactured sources (f, g, h, s) of the channel benchmark at (x, y, t)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pi = math.pi
    et = math.exp(t)
    cos_half = np.cos(pi * y / 2.0)
    sin_half = np.sin(pi * y / 2.0)
    f = np.stack([
        pi * et * cos_half * np.cos(pi * x) + pi * params.mu_f * np.cos(y) * math.cos(pi * t),
        -(pi / 2.0) * et * np.sin(pi * x) * sin_half,
    ])
    h = np.stack([
        params.alpha * pi * et * cos_half * np.cos(pi * x) + params.mu_p * np.cos(y) * math.sin(pi * t),
        -(pi / 2.0) * params.alpha * et * np.sin(pi * x) * sin_half,
    ])
    shape = np.broadcast(x, y).shape
    g = np.full(shape, -2.0 * pi * math.cos(pi * t))
    s = (params.s0 - 0.75 * pi ** 2) * et * np.sin(pi * x) * cos_half - 2.0 * params.alpha * pi * math.cos(pi * t)
    return f, g, h, np.broadcast_to(s, shape).copy()


def channel_source_terms(params: PhysicalParameters, p_in: Optional[Callable[[float], float]] = None) -> SourceTerms:
    """SourceTerms wrapping the manufactured channel sources."""
    return SourceTerms(
        f=lambda x, y, t: test1_sources(x, y, t, params)[0],
        g=lambda x, y, t: test1_sources(x, y, t, params)[1],
        h=lambda x, y, t: test1_sources(x, y, t, params)[2],
        s=lambda x, y, t: test1_sources(x, y, t, params)[3],
        p_in=p_in or _zero_time,
        name="test1",
    )


def fracture_source_terms(fluid_area: float, rate: float = 25.0) -> SourceTerms:
    """Uniform injection of total ``rate`` spread over the fluid region."""
    if not fluid_area > 0:
        raise ParameterError(f"fluid area must be positive, got {fluid_area}")
    density = rate / fluid_area
    return SourceTerms(g=lambda x, y, t: np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, density),
                       name="test2")


# ---------------------------------------------------------------------------
# Boundary conditions
# ---------------------------------------------------------------------------

class Constraint(str, Enum):
    """Treatment of one field on one tagged edge set."""

    NATURAL = "natural"
    ALL = "all"
    NORMAL = "normal"


@dataclass(frozen=True)
class BoundaryConditionSet:
    """Per-tag, per-field treatments plus natural data.

    Every boundary tag lists a Constraint for every field living on its
    region; the interface carries none (it is handled by the coupling terms).
    ``traction_tags`` are the fluid tags receiving the inflow traction -p_in n.
    """

    treatments: Mapping[EdgeTag, Mapping[str, Constraint]]
    traction_tags: Tuple[EdgeTag, ...] = (EdgeTag.FLUID_IN,)
    name: str = "custom"

    def __post_init__(self):
        frozen: Dict[EdgeTag, Mapping[str, Constraint]] = {}
        for tag in BOUNDARY_TAGS:
            fields = FLUID_FIELDS if tag.region is Region.FLUID else POROUS_FIELDS
            given = dict(self.treatments.get(tag, {}))
            unknown = set(given) - set(fields)
            if unknown:
                raise ParameterError(f"{tag.value}: fields {sorted(unknown)} do not live on the {tag.region.value} region")
            missing = set(fields) - set(given)
            if missing:
                raise ParameterError(f"{tag.value}: no treatment for {sorted(missing)}")
            for name, constraint in given.items():
                constraint = Constraint(constraint)
                if constraint is Constraint.NORMAL and name not in VECTOR_FIELDS:
                    raise ParameterError(f"{tag.value}: a normal constraint needs a vector field, got {name}")
                given[name] = constraint
            frozen[tag] = MappingProxyType(given)
        if self.treatments.get(EdgeTag.INTERFACE):
            raise ParameterError("the interface takes no strong conditions")
        object.__setattr__(self, "treatments", MappingProxyType(frozen))

    def treatment(self, tag: EdgeTag, field_name: str) -> Constraint:
        if EdgeTag(tag) is EdgeTag.INTERFACE:
            return Constraint.NATURAL
        return self.treatments[EdgeTag(tag)].get(field_name, Constraint.NATURAL)

    def has_pressure_dirichlet(self) -> bool:
        return any(self.treatment(tag, "p_f") is Constraint.ALL for tag in BOUNDARY_TAGS)

    def needs_pressure_gauge(self) -> bool:
        """True when p_f is only defined up to a constant: no pressure data and
        no open (natural velocity) fluid boundary."""
        fluid_tags = [tag for tag in BOUNDARY_TAGS if tag.region is Region.FLUID]
        open_boundary = any(self.treatment(tag, "v") is Constraint.NATURAL for tag in fluid_tags)
        return not self.has_pressure_dirichlet() and not open_boundary


def _porous(U=Constraint.ALL, xi=Constraint.ALL, q=Constraint.ALL, eta=Constraint.ALL) -> Dict[str, Constraint]:
    return {"U": U, "xi": xi, "q": q, "eta": eta}


def _fluid(v=Constraint.ALL, p_f=Constraint.NATURAL) -> Dict[str, Constraint]:
    return {"v": v, "p_f": p_f}


def boundary_set_test1(fluid_ext_bc: str = "noslip") -> BoundaryConditionSet:
    """Channel benchmark: porous fields zero on the porous boundary, walls on
    the fluid in/out sides, p_f pinned to 0 on fluid_out."""
    if fluid_ext_bc not in ("noslip", "traction_free"):
        raise ParameterError(f"fluid_ext_bc must be noslip or traction_free, got {fluid_ext_bc}")
    ext = Constraint.ALL if fluid_ext_bc == "noslip" else Constraint.NATURAL
    return BoundaryConditionSet({
        EdgeTag.FLUID_IN: _fluid(),
        EdgeTag.FLUID_OUT: _fluid(p_f=Constraint.ALL),
        EdgeTag.FLUID_EXT: _fluid(v=ext),
        EdgeTag.POROUS_IN: _porous(),
        EdgeTag.POROUS_OUT: _porous(),
        EdgeTag.POROUS_EXT: _porous(),
    }, name="test1")


def boundary_set_test2() -> BoundaryConditionSet:
    """Fracture in a poroelastic block: U.n = 0 and q.n = 0 on the porous
    boundary, walls on the fluid boundary (pressure fixed by a gauge pin)."""
    porous = _porous(U=Constraint.NORMAL, xi=Constraint.NATURAL, q=Constraint.NORMAL, eta=Constraint.NATURAL)
    return BoundaryConditionSet({
        EdgeTag.FLUID_IN: _fluid(),
        EdgeTag.FLUID_OUT: _fluid(),
        EdgeTag.FLUID_EXT: _fluid(),
        EdgeTag.POROUS_IN: porous,
        EdgeTag.POROUS_OUT: porous,
        EdgeTag.POROUS_EXT: porous,
    }, name="test2")


def boundary_set_physical() -> BoundaryConditionSet:
    """Channel driven by an inflow traction: -p_in n on fluid_in, zero traction
    on fluid_out, no-slip wall on top, clamped porous in/out sides with
    q.n = 0, and p_p = 0 (xi = eta = 0) on the porous bottom."""
    side = _porous(xi=Constraint.NATURAL, q=Constraint.NORMAL, eta=Constraint.NATURAL)
    return BoundaryConditionSet({
        EdgeTag.FLUID_IN: _fluid(v=Constraint.NATURAL),
        EdgeTag.FLUID_OUT: _fluid(v=Constraint.NATURAL),
        EdgeTag.FLUID_EXT: _fluid(),
        EdgeTag.POROUS_IN: side,
        EdgeTag.POROUS_OUT: side,
        EdgeTag.POROUS_EXT: _porous(q=Constraint.NATURAL),
    }, traction_tags=(EdgeTag.FLUID_IN,), name="physical")
