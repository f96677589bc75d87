"""
Parareal engine.

Plain mode:
    u_{n+1}^{k+1} = C u_n^{k+1} + (F u_n^k - C u_n^k)

Procrustes mode replaces both coarse terms by Psi^k C with Psi^k = Lambda^+ Omega^k Lambda,
where Omega^k aligns the current row's coarse outputs with its fine outputs.

Row 0 is the sequential coarse trajectory and rows 1..K are corrected, so a
run with K iterations has K + 1 rows. The fine (and coarse) evaluations of one
iteration go through the worker pool; the correction sweep is sequential.
"""
import logging
import time
from functools import partial
from typing import List, Optional, Sequence

import numpy as np

from ..exceptions import ConfigError, DimensionError, NonFiniteStateError, NumericalError, WorkerError
from ..models.config import PararealConfig
from ..models.phase import PhaseState, is_finite_vector
from ..models.tableau import PararealTableau
from .hamiltonian import HamiltonianSystem, hamiltonian, relative_energy_error, trajectory_error
from .procrustes import AlignmentData, PhaseCorrector, apply_corrector_lenient, solve_procrustes
from .solvers import Solver, WorkerPool, build_solver, fine_sweep

logger = logging.getLogger(__name__)


def _correct(corrector: PhaseCorrector, system: HamiltonianSystem, tol: float, max_iter: int,
             u: PhaseState):
    return apply_corrector_lenient(corrector, system, u, tol, max_iter)


def _combine(base: PhaseState, correction_new: PhaseState, correction_old: PhaseState,
             k: int, n: int) -> PhaseState:
    """base + (new - old); identical coarse inputs give back `base` bitwise."""
    vec = base.as_vector() + (correction_new.as_vector() - correction_old.as_vector())
    if not is_finite_vector(vec):
        raise NonFiniteStateError(f"non-finite state at iteration {k}, interval {n}", iteration=k, index=n)
    return PhaseState.from_vector(vec)


def _step(solver: Solver, u: PhaseState, k: int, n: int) -> PhaseState:
    try:
        return solver.step(u)
    except NonFiniteStateError:
        raise NonFiniteStateError(f"{solver.label} produced a non-finite state at iteration {k}, interval {n}",
                                  iteration=k, index=n)


def _pooled(system: HamiltonianSystem, pool: WorkerPool, solver: Solver, states: Sequence[PhaseState],
            k: int, what: str) -> List[PhaseState]:
    try:
        return fine_sweep(system, states, solver, pool=pool)
    except WorkerError as e:
        if isinstance(e.__cause__, NonFiniteStateError):
            raise NonFiniteStateError(f"{what} produced a non-finite state at iteration {k}, interval {e.index}",
                                      iteration=k, index=e.index) from e
        raise


def parareal_run(system: HamiltonianSystem, u0: PhaseState, config: PararealConfig,
                 reference: Optional[Sequence[PhaseState]] = None,
                 coarse: Optional[Solver] = None, fine: Optional[Solver] = None,
                 workers: Optional[int] = None) -> PararealTableau:
    """
    Run K parareal iterations over N intervals of length config.dt.

    `coarse` and `fine` override the solvers named in the config. When a
    reference trajectory (N + 1 states) is given, per-cell trajectory errors
    (up to the trust horizon) and energy errors are attached to the tableau.
    """
    if u0.d != system.d:
        raise DimensionError(f"initial state has d={u0.d}, system has d={system.d}")
    if reference is not None and len(reference) != config.N + 1:
        raise ConfigError(f"reference must have N + 1 = {config.N + 1} states, got {len(reference)}")
    coarse = coarse or build_solver(system, config.dt, config.coarse)
    fine = fine or build_solver(system, config.dt, config.fine)
    if config.mode == "procrustes" and not system.has_energy_transform:
        raise ConfigError(f"procrustes mode needs an energy transform, {system.name} has none")

    N, K = config.N, config.K
    tableau = PararealTableau(N=N, K=K, mode=config.mode)
    for k in range(K + 1):
        tableau[k, 0] = u0
    for n in range(N):
        tableau[0, n + 1] = _step(coarse, tableau[0, n], 0, n)
    logger.info(f"parareal {config.mode}: N={N} K={K} coarse={coarse.label} fine={fine.label}")

    with WorkerPool(workers) as pool:
        for k in range(K):
            started = time.perf_counter()
            row = tableau.row(k)[:N]
            f = _pooled(system, pool, fine, row, k, "fine solver")
            g = _pooled(system, pool, coarse, row, k, "coarse solver")
            stats = {"iteration": k + 1}

            if config.mode == "plain":
                for n in range(N):
                    c = _step(coarse, tableau[k + 1, n], k + 1, n)
                    tableau[k + 1, n + 1] = _combine(f[n], c, g[n], k + 1, n + 1)
            else:
                corrector = solve_procrustes(AlignmentData.from_states(system, f, g))
                tableau.correctors.append(corrector)
                correct = partial(_correct, corrector, system, config.pinv_tol, config.pinv_max_iter)
                psi_g = pool.map(correct, g)
                unconverged = sum(1 for _, _, ok in psi_g if not ok)
                if unconverged and config.pinv_policy == "strict":
                    raise NumericalError(f"pseudo-inverse did not converge for {unconverged} coarse outputs of row {k}")
                residuals = [res for _, res, _ in psi_g]
                for n in range(N):
                    c = _step(coarse, tableau[k + 1, n], k + 1, n)
                    psi_c, res, ok = correct(c)
                    residuals.append(res)
                    unconverged += 0 if ok else 1
                    if not ok and config.pinv_policy == "strict":
                        raise NumericalError(
                            f"pseudo-inverse did not converge at iteration {k + 1}, interval {n} "
                            f"(residual {res:.3e})"
                        )
                    tableau[k + 1, n + 1] = _combine(f[n], psi_c, psi_g[n][0], k + 1, n + 1)
                if unconverged:
                    logger.warning(f"iteration {k + 1}: accepted {unconverged} pseudo-inverse results above tolerance")
                stats.update(corrector.diagnostics())
                stats.update({"unconverged": unconverged, "max_pinv_residual": float(max(residuals, default=0.0))})

            stats["seconds"] = time.perf_counter() - started
            tableau.pinv_stats.append(stats)
            logger.info(f"parareal iteration {k + 1}/{K} done in {stats['seconds']:.2f}s")

    if reference is not None:
        attach_reference(system, tableau, reference, config.trust_horizon)
    return tableau


def attach_reference(system: HamiltonianSystem, tableau: PararealTableau, reference: Sequence[PhaseState],
                     n_trust: int) -> PararealTableau:
    """Fill the metric grids: trajectory errors for n <= n_trust, energy errors everywhere."""
    shape = (tableau.K + 1, tableau.N + 1)
    traj = np.full(shape, np.nan)
    energy = np.full(shape, np.nan)
    ref_energy = [hamiltonian(system, u) for u in reference]
    for k in range(tableau.K + 1):
        for n in range(tableau.N + 1):
            u = tableau[k, n]
            if n <= n_trust:
                traj[k, n] = trajectory_error(u, reference[n])
            energy[k, n] = relative_energy_error(hamiltonian(system, u), ref_energy[n])
    tableau.traj_error = traj
    tableau.energy_error = energy
    tableau.n_trust = n_trust
    for k in range(tableau.K + 1):
        logger.info(f"row {k}: max traj err {np.nanmax(traj[k]):.3e}, max energy err {np.nanmax(energy[k]):.3e}")
    return tableau


def sequential_trajectory(solver: Solver, u0: PhaseState, steps: int) -> List[PhaseState]:
    """[u0, F u0, ..., F^steps u0]; integrators keep double-double state between intervals."""
    if hasattr(solver, "trajectory"):
        return solver.trajectory(u0, steps)
    states = [u0]
    for n in range(steps):
        states.append(_step(solver, states[-1], 0, n))
    return states


def max_exactness_error(tableau: PararealTableau, fine_trajectory: Sequence[PhaseState]) -> float:
    """Largest trajectory error against the sequential fine run over cells n <= k."""
    worst = 0.0
    for k in range(tableau.K + 1):
        for n in range(min(k, tableau.N) + 1):
            worst = max(worst, trajectory_error(tableau[k, n], fine_trajectory[n]))
    return worst
