import logging
from pathlib import Path

import numpy as np

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig
from ..services.hamiltonian import FpuSystem, build_system, initial_state, stiff_spring_energies
from ..services.parareal import parareal_run
from ..services.solvers import IntegratorSolver, reference_spec
from .outputs import RunManifest, RunRecorder, write_log10_grid, write_matrix, write_table, write_trajectory

logger = logging.getLogger(__name__)

#per-iteration fields written to iteration_stats.csv
STAT_FIELDS = ["iteration", "residual_before", "residual_after", "min_singular_value", "full_rank",
               "unconverged", "max_pinv_residual"]


def cmd_parareal(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    """
    Parareal run with log10 error grids against the reference map, stiff-spring
    energy profiles for every iteration row and, in procrustes mode, the
    alignment matrices.
    """
    cfg = config.parareal
    recorder = RunRecorder("parareal", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        u0 = initial_state(system, cfg.initial)

        reference = None
        if cfg.compare_reference:
            ref_spec = reference_spec(cfg.fine, cfg.reference)
            logger.info(f"parareal: reference {ref_spec.label} over {cfg.N} intervals")
            with recorder.phase("reference"):
                reference = IntegratorSolver(system, cfg.dt, ref_spec).trajectory(u0, cfg.N)

        with recorder.phase("parareal"):
            tableau = parareal_run(system, u0, cfg, reference=reference, workers=config.workers)
        for stats in tableau.pinv_stats:
            recorder.timings[f"iteration_{stats['iteration']}"] = stats["seconds"]

        if reference is not None:
            write_log10_grid(recorder.path("tableau_traj_err.csv"), tableau.log10_grid("traj"),
                             f"trajectory error (n <= {tableau.n_trust})")
            write_log10_grid(recorder.path("tableau_energy_err.csv"), tableau.log10_grid("energy"),
                             "relative energy error")
            write_trajectory(recorder.path("reference.csv"), reference, cfg.dt)

        write_trajectory(recorder.path(f"trajectory_k{cfg.K}.csv"), tableau.final_row, cfg.dt)

        if isinstance(system, FpuSystem):
            header = ["n", "t"] + [f"I{j + 1}" for j in range(system.m)] + ["I_total"]
            for k in range(cfg.K + 1):
                write_table(recorder.path(f"stiff_energies_k{k}.csv"), header,
                            ([n, n * cfg.dt, *stiff_spring_energies(system, u)]
                             for n, u in enumerate(tableau.row(k))))

        if cfg.mode == "procrustes":
            write_table(recorder.path("iteration_stats.csv"), STAT_FIELDS,
                        ([stats.get(name, float("nan")) for name in STAT_FIELDS] for stats in tableau.pinv_stats))
            if cfg.dump_correctors:
                #omega_k{k} is fitted on row k - 1 and builds row k, the iteration column of iteration_stats.csv
                for k, corrector in enumerate(tableau.correctors, start=1):
                    write_matrix(recorder.path(f"correctors/omega_k{k}.csv"), corrector.omega,
                                 comments=[f"orthogonal corrector of iteration {k}",
                                           f"fitted on tableau row {k - 1}, applied to build row {k}"])

        if tableau.energy_error is not None:
            final = tableau.energy_error[cfg.K]
            logger.info(f"parareal: row {cfg.K} max relative energy error {float(np.nanmax(final)):.3e}")
        return recorder.finish()
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"parareal failed: {e}")
        raise PararealLabError(f"parareal failed: {e}") from e
