import logging
from pathlib import Path

from ..exceptions import PararealLabError
from ..models.config import ExperimentConfig
from ..services.checkpoint import save_checkpoint
from ..services.hamiltonian import build_system
from ..services.sampling import build_training_set, read_dataset, sample
from ..services.solvers import IntegratorSolver
from ..services.surrogate import evaluate_loss, train
from .outputs import RunManifest, RunRecorder, write_table

logger = logging.getLogger(__name__)


def cmd_train(config: ExperimentConfig, output_dir: Path, registry: bool = True) -> RunManifest:
    """Train a ResNet surrogate on a dataset file, or on a set sampled in this run."""
    cfg = config.train
    recorder = RunRecorder("train", output_dir, config.snapshot(), registry)
    try:
        system = build_system(config.system)
        if cfg.dataset:
            dataset = read_dataset(cfg.dataset)
            dt = dataset.header.get("dt", config.sampler.target_dt)
        else:
            sampler = config.sampler.model_copy(update={"S": max(config.sampler.S, cfg.S)})
            fine = IntegratorSolver(system, sampler.target_dt, sampler.target_solver)
            with recorder.phase("sample"):
                dataset = build_training_set(sample(system, sampler, workers=config.workers), fine, sampler.S,
                                             workers=config.workers)
            dt = sampler.target_dt

        L, n = cfg.layers
        with recorder.phase("train"):
            result = train(system, dataset, (L, n), cfg)
        final_loss = evaluate_loss(result.model, dataset, cfg.S, cfg.metric, system)
        logger.info(f"train: loss {result.initial_loss:.4e} -> {final_loss:.4e}"
                    f"{' (stopped early)' if result.stopped_early else ''}")

        write_table(recorder.path("history.csv"), ["epoch", "loss"], enumerate(result.history),
                    [f"ResNet({L}, {n}), metric {cfg.metric}, S = {cfg.S}, initial loss {result.initial_loss!r}"])
        save_checkpoint(recorder.path("model.ckpt"), result.model, train_config=cfg.model_dump(mode="json"), dt=dt,
                        extra={"initial_loss": result.initial_loss, "final_loss": final_loss,
                               "stopped_early": result.stopped_early, "samples": len(dataset)})
        return recorder.finish(status="stopped_early" if result.stopped_early else "ok")
    except PararealLabError:
        raise
    except Exception as e:
        logger.error(f"train failed: {e}")
        raise PararealLabError(f"train failed: {e}") from e
