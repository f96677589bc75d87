import logging
from pathlib import Path

import numpy as np

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig, Precision
from ..services.hamiltonian import (FpuSystem, build_system, energy_errors, hamiltonian, initial_state,
                                    stiff_spring_energies, trajectory_error)
from ..services.solvers import IntegratorSolver, reference_spec
from .outputs import RunManifest, RunRecorder, write_table, write_trajectory

logger = logging.getLogger(__name__)


def _reference_errors(system, states, reference, n_trust):
    rows = []
    for n, (u, ref) in enumerate(zip(states, reference)):
        traj = trajectory_error(u, ref) if n <= n_trust else float("nan")
        h_ref = hamiltonian(system, ref)
        rows.append([n, traj, abs(hamiltonian(system, u) - h_ref) / abs(h_ref)])
    return rows


def cmd_simulate(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    """Sequential run of one solver with per-step energy, stiff-spring and optional reference metrics."""
    sim = config.simulate
    recorder = RunRecorder("sim", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        u0 = initial_state(system, sim.initial)
        solver = IntegratorSolver(system, sim.dt, sim.solver)
        logger.info(f"sim: {solver.label}, dt={sim.dt}, {sim.steps} steps, {system.name}")

        with recorder.phase("integrate"):
            states = solver.trajectory(u0, sim.steps)
        write_trajectory(recorder.path("trajectory.csv"), states, sim.dt)

        energies = [hamiltonian(system, u) for u in states]
        errors = energy_errors(system, states)
        write_table(recorder.path("energy_error.csv"), ["n", "t", "H", "rel_energy_err"],
                    ([n, n * sim.dt, h, e] for n, (h, e) in enumerate(zip(energies, errors))))
        logger.info(f"sim: max relative energy error {float(np.max(errors)):.3e}")

        if isinstance(system, FpuSystem):
            header = ["n", "t"] + [f"I{j + 1}" for j in range(system.m)] + ["I_total"]
            write_table(recorder.path("stiff_energies.csv"), header,
                        ([n, n * sim.dt, *stiff_spring_energies(system, u)] for n, u in enumerate(states)))

        if sim.compare_reference or sim.compare_precision:
            ref_spec = reference_spec(sim.solver, sim.reference)
            with recorder.phase("reference"):
                reference = IntegratorSolver(system, sim.dt, ref_spec).trajectory(u0, sim.steps)
            n_trust = sim.steps if sim.n_trust is None else sim.n_trust
            if sim.compare_reference:
                write_table(recorder.path("reference_error.csv"), ["n", "traj_err", "rel_energy_err"],
                            _reference_errors(system, states, reference, n_trust),
                            [f"reference: {ref_spec.label}", f"trajectory errors up to n = {n_trust}"])
            if sim.compare_precision:
                runs = {}
                with recorder.phase("precision"):
                    for precision in (Precision.DOUBLE, Precision.DD):
                        spec = sim.solver.model_copy(update={"precision": precision})
                        runs[precision] = _reference_errors(
                            system, IntegratorSolver(system, sim.dt, spec).trajectory(u0, sim.steps), reference, n_trust)
                double, dd = runs[Precision.DOUBLE], runs[Precision.DD]
                write_table(recorder.path("precision_comparison.csv"),
                            ["n", "traj_err_double", "traj_err_dd", "energy_err_double", "energy_err_dd"],
                            ([a[0], a[1], b[1], a[2], b[2]] for a, b in zip(double, dd)),
                            [f"{sim.solver.scheme.value} h={sim.solver.h} against {ref_spec.label}"])
        return recorder.finish()
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"sim failed: {e}")
        raise PararealLabError(f"sim failed: {e}") from e
