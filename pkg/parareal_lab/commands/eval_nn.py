import logging
import statistics
import time
from pathlib import Path

import numpy as np

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig
from ..services.checkpoint import load_checkpoint
from ..services.hamiltonian import build_system, initial_state
from ..services.solvers import IntegratorSolver
from ..services.surrogate import forward, rollout
from .outputs import RunManifest, RunRecorder, write_table, write_trajectory

logger = logging.getLogger(__name__)


def cmd_eval_nn(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    """Roll a checkpoint out from each configured initial condition and compare with the reference map."""
    cfg = config.eval
    recorder = RunRecorder("eval-nn", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        model, header = load_checkpoint(cfg.checkpoint)
        reference_solver = IntegratorSolver(system, cfg.dt, cfg.reference)
        n_trust = cfg.n_trust if cfg.n_trust is not None else cfg.steps
        summary = []

        for initial in cfg.initial:
            name = initial.kind
            u0 = initial_state(system, initial)
            with recorder.phase(f"reference_{name}"):
                reference = reference_solver.trajectory(u0, cfg.steps)
            with recorder.phase(f"rollout_{name}"):
                result = rollout(model, u0, cfg.steps, reference, system, n_trust)
            write_trajectory(recorder.path(f"rollout_{name}.csv"), result.states, cfg.dt)
            write_table(recorder.path(f"errors_{name}.csv"), ["n", "t", "traj_err", "rel_energy_err"],
                        ([n, n * cfg.dt, t, e] for n, (t, e) in enumerate(zip(result.traj_error, result.energy_error))),
                        [f"trajectory errors up to n = {n_trust}"] +
                        ([f"rollout truncated at step {result.truncated_at}"] if result.truncated_at else []))

            timings = []
            for _ in range(cfg.timing_calls):
                started = time.perf_counter()
                forward(model, u0)
                timings.append(time.perf_counter() - started)
            median = statistics.median(timings)
            recorder.timings[f"inference_median_{name}"] = median
            summary.append([name, float(np.nanmax(result.energy_error)), result.truncated_at or -1])
            logger.info(f"eval-nn {name}: max energy error {summary[-1][1]:.3e}, median inference {median * 1e6:.1f}us")

        write_table(recorder.path("summary.csv"), ["initial", "max_rel_energy_err", "truncated_at"], summary,
                    [f"ResNet({header['L']}, {header['n']}) against {cfg.reference.label}"])
        return recorder.finish()
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"eval-nn failed: {e}")
        raise PararealLabError(f"eval-nn failed: {e}") from e
