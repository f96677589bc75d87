import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from . import __version__
from .commands import COMMANDS
from .commands.outputs import resolve_output_dir
from .exceptions import ConfigError, NumericalError, PararealLabError
from .models.config import ExperimentConfig, load_experiment_config
from .services.surrogate import set_torch_threads

load_dotenv()

logger = logging.getLogger("parareal_lab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=os.getenv("APP_NAME", "parareal-lab"),
        description="Parallel-in-time experiments on Hamiltonian lattices",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("config", help="experiment file (.toml or .json)")
        cmd.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--workers", type=int, default=None, help="worker processes")
        cmd.add_argument("--log-level", default=os.getenv("PARAREAL_LOG_LEVEL", "info"))
        cmd.add_argument("--no-registry", action="store_true", help="do not record the run in the registry")
    return parser


def apply_overrides(config: ExperimentConfig, seed: Optional[int], workers: Optional[int]) -> ExperimentConfig:
    if seed is not None:
        config = config.model_copy(update={
            "seed": seed,
            "sampler": config.sampler.model_copy(update={"seed": seed}),
            "train": config.train.model_copy(update={"seed": seed}),
        })
    if workers is not None:
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        config = config.model_copy(update={"workers": workers})
    return config


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        set_torch_threads()
        config = apply_overrides(load_experiment_config(args.config), args.seed, args.workers)
        output_dir = resolve_output_dir(args.out, config.output_dir, args.command)
        manifest = COMMANDS[args.command](config, output_dir, registry=not args.no_registry)
    except PararealLabError as e:
        logger.error(e.detail)
        return e.exit_code
    except Exception:
        #anything outside the hierarchy is reported as an internal numerical failure
        logger.exception(f"{args.command} failed unexpectedly")
        return NumericalError.exit_code
    logger.info(f"{args.command} finished: {len(manifest.files)} files, {manifest.timings['total']:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
