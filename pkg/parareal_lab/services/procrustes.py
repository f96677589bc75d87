import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.linalg import LinAlgError, svd

from ..exceptions import ConvergenceError, DimensionError, NonFiniteStateError, NumericalError
from ..models.config import DEFAULT_PINV_MAX_ITER, DEFAULT_PINV_TOL
from ..models.phase import PhaseState
from .hamiltonian import HamiltonianSystem, energy_transform, energy_transform_pinv

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AlignmentData:
    """Columns f_n = Lambda(fine output), g_n = Lambda(coarse output)."""

    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=np.float64)
        G = np.array(self.G, dtype=np.float64)
        if F.ndim != 2 or F.shape != G.shape:
            raise DimensionError(f"alignment matrices must share a 2-d shape, got {F.shape} and {G.shape}")
        if F.shape[1] < 1:
            raise DimensionError("alignment needs at least one column")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
            raise NonFiniteStateError("alignment data has non-finite columns")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)

    @classmethod
    def from_states(cls, system: HamiltonianSystem, fine: List[PhaseState],
                    coarse: List[PhaseState]) -> "AlignmentData":
        F = np.column_stack([energy_transform(system, u) for u in fine])
        G = np.column_stack([energy_transform(system, u) for u in coarse])
        return cls(F, G)

    @property
    def lambda_dim(self) -> int:
        return self.F.shape[0]


def alignment_residual(data: AlignmentData, omega: np.ndarray) -> float:
    """sum_n |f_n - omega g_n|^2"""
    return float(np.sum((data.F - omega @ data.G) ** 2))


@dataclass
class PhaseCorrector:
    omega: np.ndarray
    residual_before: float = 0.0
    residual_after: float = 0.0
    min_singular_value: float = 0.0
    full_rank: bool = True
    stats: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, lambda_dim: int) -> "PhaseCorrector":
        return cls(omega=np.eye(lambda_dim))

    def diagnostics(self) -> dict:
        return {
            "residual_before": self.residual_before,
            "residual_after": self.residual_after,
            "min_singular_value": self.min_singular_value,
            "full_rank": self.full_rank,
            **self.stats,
        }


def solve_procrustes(data: AlignmentData) -> PhaseCorrector:
    """
    Orthogonal omega minimizing sum_n |f_n - omega g_n|^2: omega = U V^T from
    the SVD of F G^T. Reflections are allowed. A rank-deficient F G^T still
    yields a minimizer; it is flagged, not rejected.
    """
    correlation = data.F @ data.G.T
    try:
        U, s, Vt = svd(correlation)
    except (LinAlgError, ValueError) as e:
        raise NumericalError(f"svd of the alignment correlation failed: {e}")
    omega = U @ Vt
    rank_tol = s[0] * max(correlation.shape) * np.finfo(np.float64).eps if s.size else 0.0
    full_rank = bool(s.size and s[-1] > rank_tol)
    corrector = PhaseCorrector(
        omega=omega,
        residual_before=alignment_residual(data, np.eye(data.lambda_dim)),
        residual_after=alignment_residual(data, omega),
        min_singular_value=float(s[-1]) if s.size else 0.0,
        full_rank=full_rank,
    )
    if not full_rank:
        logger.warning(f"alignment correlation is rank deficient (min singular value {corrector.min_singular_value:.3e}); "
                       f"omega is a non-unique minimizer")
    return corrector


def apply_corrector(corrector: PhaseCorrector, system: HamiltonianSystem, u: PhaseState,
                    pinv_tol: float = DEFAULT_PINV_TOL,
                    pinv_max_iter: int = DEFAULT_PINV_MAX_ITER) -> Tuple[PhaseState, float]:
    """Psi(u) = Lambda^+(omega Lambda(u)) warm-started at u. Returns (state, pseudo-inverse residual)."""
    target = corrector.omega @ energy_transform(system, u)
    return energy_transform_pinv(system, target, warm_start=u, tol=pinv_tol, max_iter=pinv_max_iter)


def apply_corrector_lenient(corrector: PhaseCorrector, system: HamiltonianSystem, u: PhaseState,
                            pinv_tol: float, pinv_max_iter: int) -> Tuple[PhaseState, float, bool]:
    """As apply_corrector, but a non-converged pseudo-inverse hands back its best iterate."""
    try:
        out, residual = apply_corrector(corrector, system, u, pinv_tol, pinv_max_iter)
        return out, residual, True
    except ConvergenceError as e:
        if e.best is None:
            raise
        return e.best, e.residual, False
