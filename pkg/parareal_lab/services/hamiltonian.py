"""
Separable Hamiltonian systems H(p, q) = 1/2 p^T M^-1 p + U(q) with diagonal M,
their energy transforms and the error/energy metrics used everywhere else.
"""
import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import least_squares

from ..exceptions import ConfigError, ConvergenceError, DimensionError, NumericalError, UnsupportedTransformError
from ..models.config import DEFAULT_PINV_MAX_ITER, DEFAULT_PINV_TOL, InitialCondition, SystemConfig
from ..models.phase import PhaseState, check_same_dim
from . import kernels

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class HamiltonianSystem:
    """Base descriptor. Subclasses set `kind` for the compiled kernels."""

    kind: int = -1
    name: str = "system"
    has_energy_transform: bool = False

    def __init__(self, mass_diag):
        mass = np.array(mass_diag, dtype=np.float64)
        if mass.ndim != 1 or mass.size < 1:
            raise DimensionError("mass diagonal must be a non-empty vector")
        if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
            raise ConfigError("masses must be strictly positive")
        mass.flags.writeable = False
        self.mass_diag = mass
        self.inv_mass = 1.0 / mass
        self.inv_mass.flags.writeable = False

    @property
    def d(self) -> int:
        return self.mass_diag.shape[0]

    @property
    def params(self) -> np.ndarray:
        return np.zeros(1)

    @property
    def lambda_dim(self) -> int:
        return 0

    def _check(self, q: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=np.float64)
        if q.shape != (self.d,):
            raise DimensionError(f"expected positions of length {self.d}, got {q.shape}")
        return q

    def potential(self, q) -> float:
        return float(kernels.potential(self.kind, self.params, self._check(q)))

    def grad_potential(self, q) -> np.ndarray:
        out = np.empty(self.d)
        kernels.grad_potential(self.kind, self.params, self._check(q), out)
        return out

    def kinetic(self, p) -> float:
        p = np.asarray(p, dtype=np.float64)
        return 0.5 * float(np.dot(p * self.inv_mass, p))

    def lambda_momentum(self, p: np.ndarray) -> np.ndarray:
        return p / np.sqrt(2.0 * self.mass_diag)

    def momentum_from_lambda(self, v: np.ndarray) -> np.ndarray:
        return v * np.sqrt(2.0 * self.mass_diag)

    def lambda_positions(self, q: np.ndarray) -> np.ndarray:
        raise UnsupportedTransformError(f"{self.name} has no energy transform")

    def lambda_positions_jacobian(self, q: np.ndarray) -> np.ndarray:
        raise UnsupportedTransformError(f"{self.name} has no energy transform")

    def positions_from_lambda(self, target: np.ndarray, warm_q: np.ndarray,
                              tol: float, max_iter: int) -> Tuple[np.ndarray, float, bool]:
        """Returns (q, residual, converged)."""
        raise UnsupportedTransformError(f"{self.name} has no energy transform")

    def describe(self) -> dict:
        return {"system": self.name, "d": self.d}


class FpuSystem(HamiltonianSystem):
    """
    Chain of 2m unit masses, stiff linear springs (frequency omega) inside each
    pair and soft quartic springs between pairs and to the walls:

        H = 1/2 |p|^2 + omega^2/4 sum_i (q_2i - q_2i-1)^2 + sum_i (q_2i+1 - q_2i)^4

    with fixed walls q_0 = q_2m+1 = 0.
    """

    kind = kernels.SYSTEM_FPU
    name = "fpu"
    has_energy_transform = True

    def __init__(self, m: int, omega: float):
        if m < 1:
            raise ConfigError("fpu needs m >= 1")
        if omega <= 0:
            raise ConfigError("fpu needs omega > 0")
        super().__init__(np.ones(2 * m))
        self.m = m
        self.omega = float(omega)
        self._params = np.array([self.omega])

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def lambda_dim(self) -> int:
        return 4 * self.m + 1

    def _soft_elongations(self, q: np.ndarray) -> np.ndarray:
        padded = np.concatenate([[0.0], q, [0.0]])
        #pairs (q_2i, q_2i+1) for i = 0..m
        return padded[1::2] - padded[0::2]

    def lambda_positions(self, q: np.ndarray) -> np.ndarray:
        stiff = 0.5 * self.omega * (q[1::2] - q[0::2])
        soft = self._soft_elongations(q) ** 2
        return np.concatenate([stiff, soft])

    def lambda_positions_jacobian(self, q: np.ndarray) -> np.ndarray:
        m = self.m
        jac = np.zeros((2 * m + 1, 2 * m))
        half_w = 0.5 * self.omega
        for i in range(m):
            jac[i, 2 * i + 1] = half_w
            jac[i, 2 * i] = -half_w
        r = self._soft_elongations(q)
        for i in range(m + 1):
            if i < m:
                jac[m + i, 2 * i] = 2.0 * r[i]
            if i > 0:
                jac[m + i, 2 * i - 1] = -2.0 * r[i]
        return jac

    def positions_from_lambda(self, target, warm_q, tol, max_iter):
        def residual(q):
            return self.lambda_positions(q) - target

        start_res = float(np.linalg.norm(residual(warm_q)))
        if start_res <= tol:
            return warm_q.copy(), start_res, True
        result = least_squares(
            residual,
            warm_q,
            jac=self.lambda_positions_jacobian,
            method="lm",
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=max_iter * (2 * self.m + 1),
        )
        q = result.x
        res = float(np.linalg.norm(residual(q))) if np.all(np.isfinite(q)) else math.inf
        if not res <= start_res:
            logger.debug(f"lm did not improve on warm start ({res:.3e} vs {start_res:.3e})")
            return warm_q.copy(), start_res, start_res <= tol
        if res > tol:
            logger.debug(f"lm stopped at residual {res:.3e} (status {result.status}, {result.nfev} evaluations)")
        return q, res, res <= tol

    def describe(self) -> dict:
        return {"system": self.name, "m": self.m, "omega": self.omega, "d": self.d}


class HarmonicSystem(HamiltonianSystem):
    """H = 1/2 p^T M^-1 p + k/2 |q|^2. Its energy transform is linear."""

    kind = kernels.SYSTEM_HARMONIC
    name = "harmonic"
    has_energy_transform = True

    def __init__(self, d: int = 1, stiffness: float = 1.0, mass: float = 1.0):
        if stiffness <= 0:
            raise ConfigError("harmonic stiffness must be positive")
        super().__init__(np.full(d, float(mass)))
        self.stiffness = float(stiffness)
        self._params = np.array([self.stiffness])

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def lambda_dim(self) -> int:
        return 2 * self.d

    def lambda_positions(self, q):
        return math.sqrt(0.5 * self.stiffness) * q

    def lambda_positions_jacobian(self, q):
        return math.sqrt(0.5 * self.stiffness) * np.eye(self.d)

    def positions_from_lambda(self, target, warm_q, tol, max_iter):
        return target / math.sqrt(0.5 * self.stiffness), 0.0, True

    def describe(self) -> dict:
        return {"system": self.name, "d": self.d, "stiffness": self.stiffness, "mass": float(self.mass_diag[0])}


class FreeParticle(HamiltonianSystem):
    """U = 0. Its energy vector would be the momentum block alone, which cannot be inverted for q."""

    kind = kernels.SYSTEM_FREE
    name = "free"

    def __init__(self, d: int = 1, mass: float = 1.0):
        super().__init__(np.full(d, float(mass)))


def build_system(config: SystemConfig) -> HamiltonianSystem:
    if config.system == "fpu":
        return FpuSystem(config.m, config.omega)
    if config.system == "harmonic":
        return HarmonicSystem(config.d, config.stiffness, config.mass)
    return FreeParticle(config.d, config.mass)


def fpu_test_state(m: int, omega: float) -> PhaseState:
    """Canonical start: one excited stiff spring, energy 2 + 3/omega^2 + 1/(2 omega^4) for m = 3."""
    if m < 1:
        raise ConfigError("fpu needs m >= 1")
    p = np.zeros(2 * m)
    q = np.zeros(2 * m)
    p[1] = SQRT2
    q[0] = (1.0 - 1.0 / omega) / SQRT2
    q[1] = (1.0 + 1.0 / omega) / SQRT2
    return PhaseState(p, q)


def initial_state(system: HamiltonianSystem, initial: InitialCondition) -> PhaseState:
    if initial.kind == "explicit":
        u = PhaseState.from_vector(initial.u)
        check_same_dim(u, PhaseState.zeros(system.d))
        return u
    if not isinstance(system, FpuSystem):
        raise ConfigError(f"initial condition '{initial.kind}' is only defined for fpu")
    u = fpu_test_state(system.m, system.omega)
    if initial.kind == "ood":
        return PhaseState(SQRT2 * u.p, u.q)
    return u


def _check_state(system: HamiltonianSystem, u: PhaseState):
    if u.d != system.d:
        raise DimensionError(f"state has d={u.d}, system has d={system.d}")


def hamiltonian(system: HamiltonianSystem, u: PhaseState) -> float:
    _check_state(system, u)
    return system.kinetic(u.p) + system.potential(u.q)


def hamiltonian_vector_field(system: HamiltonianSystem, u: PhaseState) -> Tuple[np.ndarray, np.ndarray]:
    """(dq/dt, dp/dt) = (M^-1 p, -grad U(q))."""
    _check_state(system, u)
    return u.p * system.inv_mass, -system.grad_potential(u.q)


def energy_transform(system: HamiltonianSystem, u: PhaseState) -> np.ndarray:
    """Lambda(u); its squared norm is H(u)."""
    _check_state(system, u)
    if not system.has_energy_transform:
        raise UnsupportedTransformError(f"{system.name} has no energy transform")
    return np.concatenate([system.lambda_momentum(u.p), system.lambda_positions(u.q)])


def energy_transform_jacobian(system: HamiltonianSystem, u: PhaseState) -> np.ndarray:
    _check_state(system, u)
    if not system.has_energy_transform:
        raise UnsupportedTransformError(f"{system.name} has no energy transform")
    d = system.d
    jac_q = system.lambda_positions_jacobian(u.q)
    jac = np.zeros((d + jac_q.shape[0], 2 * d))
    jac[:d, :d] = np.diag(1.0 / np.sqrt(2.0 * system.mass_diag))
    jac[d:, d:] = jac_q
    return jac


def energy_transform_pinv(system: HamiltonianSystem, target: np.ndarray, warm_start: PhaseState,
                          tol: float = DEFAULT_PINV_TOL,
                          max_iter: int = DEFAULT_PINV_MAX_ITER) -> Tuple[PhaseState, float]:
    """
    Recover a state from an energy vector. The momentum block is inverted
    exactly; positions solve min |Lambda_2(q) - target_q| by Levenberg-Marquardt
    seeded at warm_start.q. Returns (state, residual). The residual never
    exceeds the warm start's.

    Raises ConvergenceError (carrying the best iterate and its residual)
    whenever the residual stays above tol, whether the solver hit its
    evaluation cap or settled on a stationary point outside the image of Lambda.
    """
    _check_state(system, warm_start)
    if not system.has_energy_transform:
        raise UnsupportedTransformError(f"{system.name} has no energy transform")
    if tol <= 0:
        raise ConfigError("pseudo-inverse tolerance must be positive")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (system.lambda_dim,):
        raise DimensionError(f"energy vector must have length {system.lambda_dim}, got {target.shape}")
    d = system.d
    p = system.momentum_from_lambda(target[:d])
    q, residual, converged = system.positions_from_lambda(target[d:], np.array(warm_start.q), tol, max_iter)
    best = PhaseState(p, q)
    if not converged:
        raise ConvergenceError(
            f"pseudo-inverse stopped at residual {residual:.3e} above tolerance {tol:.1e}",
            best=best,
            residual=residual,
        )
    return best, residual


def trajectory_error(u: PhaseState, u_ref: PhaseState) -> float:
    check_same_dim(u, u_ref)
    return float(np.sqrt(np.sum((u.p - u_ref.p) ** 2) + np.sum((u.q - u_ref.q) ** 2)))


def relative_energy_error(h: float, h_ref: float) -> float:
    """|h - h_ref| / |h_ref|, NaN when the reference energy is zero."""
    if h_ref == 0.0:
        return math.nan
    return abs(h - h_ref) / abs(h_ref)


def energy_error(system: HamiltonianSystem, u: PhaseState, u_ref: PhaseState) -> float:
    h_ref = hamiltonian(system, u_ref)
    if h_ref == 0.0:
        raise NumericalError("relative energy error is undefined: reference energy is zero")
    return relative_energy_error(hamiltonian(system, u), h_ref)


def stiff_spring_energies(system: FpuSystem, u: PhaseState) -> np.ndarray:
    """
    I_j = 1/2 (ydot_j^2 + omega^2 y_j^2) with y_j = (q_2j - q_2j-1)/sqrt 2 and
    ydot_j the same difference of momenta, for j = 1..m, then the total.
    """
    if not isinstance(system, FpuSystem):
        raise UnsupportedTransformError("stiff spring energies are defined for fpu only")
    _check_state(system, u)
    y = (u.q[1::2] - u.q[0::2]) / SQRT2
    ydot = (u.p[1::2] - u.p[0::2]) / SQRT2
    energies = 0.5 * (ydot ** 2 + system.omega ** 2 * y ** 2)
    return np.append(energies, energies.sum())


def energy_errors(system: HamiltonianSystem, states, h_ref: Optional[float] = None) -> np.ndarray:
    """
    Relative energy error of each state against h_ref (default: the first
    state's energy). All entries are NaN when that energy is zero.
    """
    energies = np.array([hamiltonian(system, s) for s in states])
    h0 = energies[0] if h_ref is None else h_ref
    return np.array([relative_energy_error(h, h0) for h in energies])
