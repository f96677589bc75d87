import logging
from pathlib import Path

import numpy as np

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig
from ..services.hamiltonian import build_system, hamiltonian, initial_state
from ..services.sampling import build_training_set, min_distance_diagnostic, sample, write_dataset
from ..services.solvers import IntegratorSolver
from .outputs import RunManifest, RunRecorder, write_table

logger = logging.getLogger(__name__)


def cmd_sample(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    cfg = config.sampler
    recorder = RunRecorder("sample", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        with recorder.phase("sample"):
            D0 = sample(system, cfg, workers=config.workers)
        H0 = D0.config["H0"]
        shifts = np.array([hamiltonian(system, u) - H0 for u in D0.states])
        logger.info(f"sample: {len(D0)} states, mean H - H0 = {shifts.mean():.3e} (sd {shifts.std():.3e})")

        d = system.d
        header = ["group", "step"] + [f"p{i + 1}" for i in range(d)] + [f"q{i + 1}" for i in range(d)] + ["H_minus_H0"]
        write_table(recorder.path("samples.csv"), header,
                    ([g, s, *u.as_vector(), dh] for (g, s), u, dh in zip(D0.provenance, D0.states, shifts)),
                    [f"{cfg.algo} sampler, H0 = {H0!r}"])

        if cfg.S > 0:
            fine = IntegratorSolver(system, cfg.target_dt, cfg.target_solver)
            with recorder.phase("targets"):
                dataset = build_training_set(D0, fine, cfg.S, workers=config.workers)
            write_dataset(recorder.path("dataset.csv"), dataset, config.snapshot())

        if cfg.reference_steps:
            u0 = initial_state(system, config.simulate.initial)
            with recorder.phase("min_distance"):
                reference = IntegratorSolver(system, cfg.target_dt, cfg.target_solver).trajectory(u0, cfg.reference_steps)
                distances = min_distance_diagnostic(reference, D0)
            write_table(recorder.path("min_distance.csv"), ["n", "t", "min_distance"],
                        ([n, n * cfg.target_dt, r] for n, r in enumerate(distances)))
        return recorder.finish()
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"sample failed: {e}")
        raise PararealLabError(f"sample failed: {e}") from e
