import logging
import statistics
import time
from pathlib import Path

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig
from ..services.hamiltonian import build_system, energy_error, initial_state, trajectory_error
from ..services.solvers import IntegratorSolver, build_solver
from .outputs import RunManifest, RunRecorder, write_table

logger = logging.getLogger(__name__)


def median_runtime(solver, u0, calls: int) -> float:
    #first call compiles
    solver.step(u0)
    timings = []
    for _ in range(calls):
        started = time.perf_counter()
        solver.step(u0)
        timings.append(time.perf_counter() - started)
    return statistics.median(timings)


def cmd_bench(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    """One-interval accuracy against the reference map and median wall-clock per solver."""
    cfg = config.bench
    recorder = RunRecorder("bench", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        u0 = initial_state(system, cfg.initial)
        with recorder.phase("reference"):
            reference = IntegratorSolver(system, cfg.dt, cfg.reference).step(u0)

        rows = []
        for spec in cfg.solvers:
            solver = build_solver(system, cfg.dt, spec)
            with recorder.phase(solver.label):
                u1 = solver.step(u0)
                seconds = median_runtime(solver, u0, cfg.calls)
            rows.append([solver.label, trajectory_error(u1, reference), energy_error(system, u1, reference), seconds])
            logger.info(f"bench {solver.label}: traj err {rows[-1][1]:.3e}, energy err {rows[-1][2]:.3e}, "
                        f"median {seconds * 1e3:.3f}ms")

        write_table(recorder.path("bench.csv"), ["solver", "traj_err", "rel_energy_err", "median_seconds"], rows,
                    [f"one interval dt = {cfg.dt} against {cfg.reference.label}, median over {cfg.calls} calls",
                     "median_seconds is wall-clock and varies between runs"])
        return recorder.finish()
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"bench failed: {e}")
        raise PararealLabError(f"bench failed: {e}") from e
