"""
Symplectic integrators written as partitioned kick/drift tables.

    VV    velocity Verlet, one kick-drift-kick stage
    CSS4  Calvo and Sanz-Serna fourth-order partitioned method, five kicks
    KL8   seventeen-stage symmetric eighth-order composition of VV (Kahan and Li)

Coefficients live in mpmath at 50 digits and are rounded once, either to
double or to a double-double (hi, lo) pair, when a substep table is built.
Compositions of VV are flattened into one table with adjacent half kicks
merged.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, NamedTuple, Optional, Sequence, Tuple

import mpmath
import numpy as np

from ..exceptions import ConfigError, DimensionError, NonFiniteStateError
from ..models.config import IntegratorSpec, Precision, Scheme
from ..models.phase import PhaseState
from . import kernels
from .hamiltonian import HamiltonianSystem, trajectory_error

logger = logging.getLogger(__name__)

mpmath.mp.dps = 50

_EXACT = mpmath.mpf("1e-40")


@dataclass(frozen=True)
class SplittingCoefficients:
    """
    kicks[i] and drifts[i] are b_i and a_i: stage i is p -= b_i h grad U, then
    q += a_i h M^-1 p. `stages` holds the VV composition weights when the
    method is one.
    """

    kicks: Tuple[mpmath.mpf, ...]
    drifts: Tuple[mpmath.mpf, ...]
    order: int
    source: str
    stages: Optional[Tuple[mpmath.mpf, ...]] = None

    def __post_init__(self):
        if not self.kicks or len(self.kicks) != len(self.drifts):
            raise ConfigError(f"{self.source}: kick and drift tables must be non-empty and of equal length")
        for name, table in (("kick", self.kicks), ("drift", self.drifts)):
            if abs(mpmath.fsum(table) - 1) > _EXACT:
                raise ConfigError(f"{self.source}: {name} coefficients must sum to one")

    @property
    def n_forces(self) -> int:
        """Force evaluations per step."""
        return sum(1 for a in self.drifts if a != 0)

    def tables(self, h: float) -> Tuple[np.ndarray, np.ndarray]:
        return (np.array([float(b) for b in self.kicks]) * h,
                np.array([float(a) for a in self.drifts]) * h)


def composition(stages: Sequence[mpmath.mpf], order: int, source: str) -> SplittingCoefficients:
    """Palindromic composition of VV steps gamma_i h as one kick/drift table."""
    stages = tuple(mpmath.mpf(g) for g in stages)
    s = len(stages)
    for i in range(s // 2):
        if abs(stages[i] - stages[s - 1 - i]) > _EXACT:
            raise ConfigError(f"{source}: composition is not palindromic")
    kicks = [stages[0] / 2] + [(stages[i] + stages[i + 1]) / 2 for i in range(s - 1)] + [stages[-1] / 2]
    drifts = list(stages) + [mpmath.mpf(0)]
    return SplittingCoefficients(tuple(kicks), tuple(drifts), order, source, stages)


def _symmetric(half: Sequence[str]) -> Tuple[mpmath.mpf, ...]:
    """Palindrome from the leading coefficients; the middle one closes the sum to 1."""
    head = [mpmath.mpf(x) for x in half]
    middle = 1 - 2 * mpmath.fsum(head)
    return tuple(head + [middle] + head[::-1])


#Calvo & Sanz-Serna (1993); the last kick is recomputed so the kicks sum to one
_CSS4_DRIFTS = ("0.205177661542290", "0.403021281604210", "-0.12092087633891", "0.512721933192410", "0")
_CSS4_KICKS = ("0.061758858135626", "0.338978026553643", "0.614791307175578", "-0.140548014659373")


def _css4() -> SplittingCoefficients:
    kicks = [mpmath.mpf(b) for b in _CSS4_KICKS]
    kicks.append(1 - mpmath.fsum(kicks))
    drifts = [mpmath.mpf(a) for a in _CSS4_DRIFTS]
    return SplittingCoefficients(tuple(kicks), tuple(drifts), 4, "Calvo-Sanz-Serna order 4")


#Kahan & Li (1997), s17odr8a; the centre stage is recomputed from the rest
_KL8_HEAD = (
    "0.13020248308889008087881763",
    "0.56116298177510838456196441",
    "-0.38947496264484728640807860",
    "0.15884190655515560089621075",
    "-0.39590389413323757733623154",
    "0.18453964097831570709183254",
    "0.25837438768632204729397911",
    "0.29501172360931029887096624",
)

COEFFICIENTS = {
    Scheme.VV: composition((mpmath.mpf(1),), 2, "velocity Verlet"),
    Scheme.CSS4: _css4(),
    Scheme.KL8: composition(_symmetric(_KL8_HEAD), 8, "Kahan-Li s17odr8a"),
}


@dataclass(frozen=True, eq=False)
class DDPhaseState:
    """Double-double phase state: value = hi + lo componentwise."""

    p_hi: np.ndarray
    p_lo: np.ndarray
    q_hi: np.ndarray
    q_lo: np.ndarray

    @classmethod
    def from_state(cls, u: PhaseState) -> "DDPhaseState":
        zeros = np.zeros(u.d)
        return cls(np.array(u.p), zeros, np.array(u.q), zeros.copy())

    def to_state(self) -> PhaseState:
        #hi is the round-to-nearest double of a normalized pair
        return PhaseState(self.p_hi, self.q_hi)

    def difference_norm(self, other: "DDPhaseState") -> float:
        dp = (self.p_hi - other.p_hi) + (self.p_lo - other.p_lo)
        dq = (self.q_hi - other.q_hi) + (self.q_lo - other.q_lo)
        return float(np.sqrt(np.sum(dp ** 2) + np.sum(dq ** 2)))


class SubstepTable(NamedTuple):
    kick_hi: np.ndarray
    kick_lo: np.ndarray
    drift_hi: np.ndarray
    drift_lo: np.ndarray


def _split_exact(values) -> Tuple[np.ndarray, np.ndarray]:
    hi, lo = [], []
    for exact in values:
        top = float(exact)
        hi.append(top)
        lo.append(float(exact - mpmath.mpf(top)))
    hi = np.array(hi)
    lo = np.array(lo)
    hi.flags.writeable = False
    lo.flags.writeable = False
    return hi, lo


@lru_cache(maxsize=64)
def substep_table(scheme: Scheme, h: str) -> SubstepTable:
    """(hi, lo) of b_i * h and a_i * h for every stage."""
    step = IntegratorSpec(scheme=scheme, h=h).step_mp
    coeffs = COEFFICIENTS[scheme]
    return SubstepTable(*_split_exact(b * step for b in coeffs.kicks),
                        *_split_exact(a * step for a in coeffs.drifts))


def step_count(dt: float, spec: IntegratorSpec) -> int:
    if dt <= 0:
        raise ConfigError(f"interval length must be positive, got {dt}")
    ratio = mpmath.mpf(dt) / spec.step_mp
    n = int(mpmath.nint(ratio))
    if n < 1 or abs(ratio - n) > mpmath.mpf("1e-9") * n:
        raise ConfigError(f"dt={dt} is not an integer multiple of h={spec.h}")
    return n


def _run_double(system: HamiltonianSystem, u: PhaseState, kicks: np.ndarray, drifts: np.ndarray,
                nsteps: int) -> PhaseState:
    p, q = kernels.advance_double(system.kind, system.params, system.inv_mass,
                                  np.array(u.p), np.array(u.q), kicks, drifts, nsteps)
    return PhaseState(p, q)


def _run_dd(system: HamiltonianSystem, u: DDPhaseState, table: SubstepTable, nsteps: int) -> DDPhaseState:
    out = kernels.advance_dd(system.kind, system.params, system.inv_mass,
                             u.p_hi, u.p_lo, u.q_hi, u.q_lo, *table, nsteps)
    return DDPhaseState(*out)


def _check(system: HamiltonianSystem, u: PhaseState):
    if u.d != system.d:
        raise DimensionError(f"state has d={u.d}, system has d={system.d}")


def step_vv(system: HamiltonianSystem, u: PhaseState, h: float) -> PhaseState:
    """One kick-drift-kick step."""
    _check(system, u)
    if h <= 0:
        raise ConfigError("step size must be positive")
    h = float(h)
    return _run_double(system, u, np.array([0.5 * h, 0.5 * h]), np.array([h, 0.0]), 1)


def step_composition(system: HamiltonianSystem, u: PhaseState, h: float,
                     coeffs: SplittingCoefficients) -> PhaseState:
    _check(system, u)
    if h <= 0:
        raise ConfigError("step size must be positive")
    return _run_double(system, u, *coeffs.tables(float(h)), 1)


def advance(system: HamiltonianSystem, u: PhaseState, dt: float, spec: IntegratorSpec) -> PhaseState:
    """Apply the scheme dt/h times. Double-double runs are rounded back to double."""
    _check(system, u)
    nsteps = step_count(dt, spec)
    table = substep_table(spec.scheme, spec.h)
    if spec.precision == Precision.DD:
        return _run_dd(system, DDPhaseState.from_state(u), table, nsteps).to_state()
    return _run_double(system, u, table.kick_hi, table.drift_hi, nsteps)


def advance_dd(system: HamiltonianSystem, u: DDPhaseState, dt: float, spec: IntegratorSpec) -> DDPhaseState:
    """Same as advance, but keeps the double-double pair across calls."""
    nsteps = step_count(dt, spec)
    return _run_dd(system, u, substep_table(spec.scheme, spec.h), nsteps)


def sequential(system: HamiltonianSystem, u0: PhaseState, dt: float, spec: IntegratorSpec,
               steps: int) -> List[PhaseState]:
    """[u0, F u0, F^2 u0, ...]; extended precision carries over between intervals."""
    states = [u0]
    current = DDPhaseState.from_state(u0) if spec.precision == Precision.DD else u0
    for n in range(steps):
        try:
            if spec.precision == Precision.DD:
                current = advance_dd(system, current, dt, spec)
                states.append(current.to_state())
            else:
                current = advance(system, current, dt, spec)
                states.append(current)
        except NonFiniteStateError:
            raise NonFiniteStateError(f"{spec.label} produced a non-finite state at step {n + 1}", index=n + 1)
    return states


@dataclass
class OrderFit:
    slope: float
    steps: List[float]
    errors: List[float]
    excluded: List[float] = field(default_factory=list)


def empirical_order(system: HamiltonianSystem, u0: PhaseState, scheme: Scheme, h_list: Sequence[str],
                    t_short: float = 1.0, precision: Precision = Precision.DOUBLE,
                    reference_refinement: int = 2) -> OrderFit:
    """
    Least-squares slope of log(error) against log(h) at t_short. The reference
    is KL8 in double-double at the smallest h divided by 2^reference_refinement.
    Errors at the round-off floor are dropped and reported in `excluded`.
    """
    if len(h_list) < 3:
        raise ConfigError("empirical order needs at least three step sizes")
    specs = [IntegratorSpec(scheme=scheme, h=h, precision=precision) for h in h_list]
    steps = [s.step for s in specs]
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ConfigError("step sizes must be strictly decreasing")
    ref_spec = specs[-1].refined(reference_refinement)
    reference = advance_dd(system, DDPhaseState.from_state(u0), t_short, ref_spec)
    scale = max(1.0, float(np.linalg.norm(reference.to_state().as_vector())))
    floor = (1e-28 if precision == Precision.DD else 1e-13) * scale

    used_h, errors, excluded = [], [], []
    for spec in specs:
        if precision == Precision.DD:
            err = advance_dd(system, DDPhaseState.from_state(u0), t_short, spec).difference_norm(reference)
        else:
            err = trajectory_error(advance(system, u0, t_short, spec), reference.to_state())
        if not math.isfinite(err) or err <= floor:
            logger.info(f"order fit: dropping h={spec.h}, error {err:.3e} at round-off floor")
            excluded.append(spec.step)
            continue
        used_h.append(spec.step)
        errors.append(err)
    if len(used_h) < 2:
        raise ConfigError("fewer than two step sizes above the round-off floor")
    slope = float(np.polyfit(np.log(used_h), np.log(errors), 1)[0])
    logger.info(f"order fit {scheme.value}: slope {slope:.3f} over {len(used_h)} points")
    return OrderFit(slope=slope, steps=used_h, errors=errors, excluded=excluded)


def fitted_spec(spec: IntegratorSpec, dt: float) -> IntegratorSpec:
    """
    The largest step h' <= spec.h with dt / h' integral. Used where h is a
    resolution bound rather than an exact step (sampler flows).
    """
    ratio = mpmath.mpf(dt) / spec.step_mp
    n = int(mpmath.nint(ratio))
    if n >= 1 and abs(ratio - n) <= mpmath.mpf("1e-9") * n:
        return spec
    n = int(mpmath.ceil(ratio))
    h = mpmath.mpf(dt) / n
    logger.debug(f"step {spec.h} does not divide {dt}; using {n} steps of {float(h):.6e}")
    return IntegratorSpec(scheme=spec.scheme, h=mpmath.nstr(h, 40), precision=spec.precision)
