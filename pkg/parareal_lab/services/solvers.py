"""
Solver handles: anything that advances a PhaseState by one interval dt.

Parareal, sampling and the commands only see this interface, so a trained
network drops in wherever an integrator does. Handles are picklable and are
shipped to worker processes as-is.
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from ..exceptions import DimensionError, PararealLabError, WorkerError
from ..models.config import IntegratorSpec, NNSolverSpec, SolverSpec
from ..models.phase import PhaseState
from . import integrators
from .hamiltonian import HamiltonianSystem

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Solver:
    label = "solver"

    def __init__(self, system: HamiltonianSystem, dt: float):
        self.system = system
        self.dt = dt

    def step(self, u: PhaseState) -> PhaseState:
        raise NotImplementedError

    def __call__(self, u: PhaseState) -> PhaseState:
        return self.step(u)

    def __repr__(self):
        return f"<{type(self).__name__}({self.label}, dt={self.dt})>"


class IntegratorSolver(Solver):
    def __init__(self, system: HamiltonianSystem, dt: float, spec: IntegratorSpec):
        super().__init__(system, dt)
        self.spec = spec
        #validates dt/h up front
        integrators.step_count(dt, spec)
        self.label = spec.label

    def step(self, u: PhaseState) -> PhaseState:
        return integrators.advance(self.system, u, self.dt, self.spec)

    def trajectory(self, u0: PhaseState, steps: int) -> List[PhaseState]:
        return integrators.sequential(self.system, u0, self.dt, self.spec, steps)


class CallableSolver(Solver):
    """Wraps a plain function; used for oracle maps in tests and composed maps."""

    def __init__(self, system: HamiltonianSystem, dt: float, fn: Callable[[PhaseState], PhaseState],
                 label: str = "callable"):
        super().__init__(system, dt)
        self.fn = fn
        self.label = label

    def step(self, u: PhaseState) -> PhaseState:
        return self.fn(u)


def build_solver(system: HamiltonianSystem, dt: float, spec: SolverSpec) -> Solver:
    if isinstance(spec, NNSolverSpec):
        from .surrogate import NNSolver
        return NNSolver.from_checkpoint(system, dt, spec.checkpoint)
    return IntegratorSolver(system, dt, spec)


def default_workers() -> int:
    return int(os.getenv("PARAREAL_WORKERS", "1"))


class WorkerPool:
    """
    Ordered map over a process pool that lives as long as the `with` block.
    One worker (or a single item) runs in-process. Results come back in input
    order whatever the worker count.
    """

    def __init__(self, workers: Optional[int] = None):
        self.workers = max(1, workers if workers is not None else default_workers())
        self._executor: Optional[ProcessPoolExecutor] = None

    def __enter__(self) -> "WorkerPool":
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, *exc):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        return False

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
        items = list(items)
        if self._executor is None or len(items) <= 1:
            return [_guarded(fn, item, index) for index, item in enumerate(items)]
        futures = [self._executor.submit(fn, item) for item in items]
        results = []
        for index, future in enumerate(futures):
            try:
                results.append(future.result())
            except PararealLabError as e:
                for pending in futures[index + 1:]:
                    pending.cancel()
                raise WorkerError(f"item {index}: {e.detail}", index) from e
            except Exception as e:
                for pending in futures[index + 1:]:
                    pending.cancel()
                logger.error(f"worker failed on item {index}: {e}")
                raise WorkerError(f"item {index}: {e}", index) from e
        return results


def _guarded(fn, item, index):
    try:
        return fn(item)
    except WorkerError:
        raise
    except PararealLabError as e:
        raise WorkerError(f"item {index}: {e.detail}", index) from e
    except Exception as e:
        logger.error(f"solve failed on item {index}: {e}")
        raise WorkerError(f"item {index}: {e}", index) from e


def fine_sweep(system: HamiltonianSystem, states: Sequence[PhaseState], fine: Solver,
               parallelism: Optional[int] = None, pool: Optional[WorkerPool] = None) -> List[PhaseState]:
    """Apply `fine` to every state. Bitwise independent of the worker count."""
    for s in states:
        if s.d != system.d:
            raise DimensionError(f"state of dimension {s.d} in a d={system.d} sweep")
    if pool is not None:
        return pool.map(fine.step, states)
    with WorkerPool(parallelism) as own:
        return own.map(fine.step, states)


def reference_spec(solver: SolverSpec, override: Optional[IntegratorSpec] = None) -> IntegratorSpec:
    """Reference map: the override, else KL8 in double-double one dyadic level below the solver's step."""
    if override is not None:
        return override
    if isinstance(solver, IntegratorSpec):
        return solver.refined(1)
    return IntegratorSpec(scheme="kl8", h="2^-15", precision="dd")
