"""
Training data near an energy level H0.

HMC-H0 refreshes the momentum onto a jittered energy shell at every step and
flows for delta_t. TrajEnsemble-H0 draws one shell energy per level set and
collects points along several flowed trajectories from q0. Neither has an
accept/reject step. Each chain (level set) owns an RNG stream derived from
(seed, chain id), so results do not depend on the worker count.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from ..exceptions import ConfigError, DimensionError, NonFiniteStateError, ShellUnreachableError, WorkerError
from ..models.config import SamplerConfig
from ..models.phase import PhaseState, format_real, stack_states
from .hamiltonian import FpuSystem, HamiltonianSystem, fpu_test_state, hamiltonian
from .integrators import fitted_spec
from .solvers import IntegratorSolver, Solver, WorkerPool

logger = logging.getLogger(__name__)


@dataclass
class SampleSet:
    states: List[PhaseState]
    provenance: List[Tuple[int, int]]
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return stack_states(self.states)


@dataclass
class TrainingSet:
    """inputs (M, 2d); targets (M, S, 2d) with targets[:, i] = F^(i+1) inputs."""

    inputs: np.ndarray
    targets: np.ndarray
    dropped: int = 0
    header: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def S(self) -> int:
        return self.targets.shape[1]

    @property
    def d(self) -> int:
        return self.inputs.shape[1] // 2


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


def sample_shell_energy(mean: float, sigma: float, rng: np.random.Generator, max_rejects: int) -> float:
    """K' ~ N(mean, sigma^2) conditioned on K' > 0, by rejection."""
    for _ in range(max_rejects):
        kinetic = rng.normal(mean, sigma)
        if kinetic > 0.0:
            return float(kinetic)
    raise ShellUnreachableError(
        f"no positive kinetic energy in {max_rejects} draws (H0 - U(q) = {mean:.3e}, sigma = {sigma:.3e})"
    )


def momentum_on_shell(kinetic: float, mass_diag: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """p = sqrt(2K) M^(1/2) ptilde with ptilde uniform on the unit sphere."""
    direction = rng.standard_normal(mass_diag.shape[0])
    direction /= np.linalg.norm(direction)
    return math.sqrt(2.0 * kinetic) * np.sqrt(mass_diag) * direction


def sample_momentum_on_shell(q: np.ndarray, H0: float, sigma: float, mass_diag: np.ndarray,
                             rng: np.random.Generator, potential_energy: float,
                             max_rejects: int = 10000) -> np.ndarray:
    """Momentum refreshment at q: 1/2 p^T M^-1 p equals a truncated-normal draw around H0 - U(q)."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    kinetic = sample_shell_energy(H0 - potential_energy, sigma, rng, max_rejects)
    return momentum_on_shell(kinetic, np.asarray(mass_diag, dtype=np.float64), rng)


def _resolve(system: HamiltonianSystem, config: SamplerConfig) -> Tuple[float, np.ndarray]:
    if config.q0 is not None:
        q0 = np.array(config.q0, dtype=np.float64)
        if q0.shape != (system.d,):
            raise DimensionError(f"q0 must have length {system.d}")
    elif isinstance(system, FpuSystem):
        q0 = np.array(fpu_test_state(system.m, system.omega).q)
    else:
        raise ConfigError("q0 is required for systems other than fpu")
    if config.H0 is not None:
        H0 = config.H0
    elif isinstance(system, FpuSystem):
        H0 = hamiltonian(system, fpu_test_state(system.m, system.omega))
    else:
        raise ConfigError("H0 is required for systems other than fpu")
    return H0, q0


def flow_solver(system: HamiltonianSystem, config: SamplerConfig) -> IntegratorSolver:
    return IntegratorSolver(system, config.flow_dt, fitted_spec(config.flow, config.flow_dt))


def _hmc_chain(system: HamiltonianSystem, flow: Solver, config: SamplerConfig, H0: float, q0: np.ndarray,
               chain: int) -> List[PhaseState]:
    rng = chain_rng(config.seed, chain)
    q = q0
    states = []
    for step in range(config.n_trans):
        try:
            p = sample_momentum_on_shell(q, H0, config.sigma, system.mass_diag, rng,
                                         system.potential(q), config.max_rejects)
        except ShellUnreachableError as e:
            raise ShellUnreachableError(f"chain {chain}, step {step}: {e.detail}", chain=chain, step=step)
        u = flow.step(PhaseState(p, q))
        states.append(u)
        q = u.q
    return states


def _level_set(system: HamiltonianSystem, flow: Solver, config: SamplerConfig, H0: float, q0: np.ndarray,
               level: int) -> List[PhaseState]:
    rng = chain_rng(config.seed, level)
    try:
        kinetic = sample_shell_energy(H0 - system.potential(q0), config.sigma, rng, config.max_rejects)
    except ShellUnreachableError as e:
        raise ShellUnreachableError(f"level set {level}: {e.detail}", chain=level, step=0)
    states = []
    for _ in range(config.n_traj):
        u = PhaseState(momentum_on_shell(kinetic, system.mass_diag, rng), q0)
        for _ in range(config.L):
            u = flow.step(u)
            states.append(u)
    return states


def _run_groups(job, groups: int, workers: Optional[int], what: str) -> List[List[PhaseState]]:
    try:
        with WorkerPool(workers) as pool:
            return pool.map(job, range(groups))
    except WorkerError as e:
        if isinstance(e.__cause__, (ShellUnreachableError, NonFiniteStateError)):
            raise e.__cause__
        raise


def hmc_h0(system: HamiltonianSystem, config: SamplerConfig, workers: Optional[int] = None) -> SampleSet:
    H0, q0 = _resolve(system, config)
    flow = flow_solver(system, config)
    logger.info(f"hmc-h0: {config.n_chains} chains x {config.n_trans} transitions, H0={H0:.6f}, "
                f"sigma={config.sigma}, flow {flow.label} over {flow.dt}")
    job = partial(_hmc_chain, system, flow, config, H0, q0)
    chains = _run_groups(job, config.n_chains, workers, "hmc chain")
    states, provenance = [], []
    for chain, chain_states in enumerate(chains):
        states.extend(chain_states)
        provenance.extend((chain, step) for step in range(len(chain_states)))
    return SampleSet(states, provenance, {"algo": "hmc", "H0": H0, **config.model_dump(mode="json")})


def traj_ensemble_h0(system: HamiltonianSystem, config: SamplerConfig, workers: Optional[int] = None) -> SampleSet:
    H0, q0 = _resolve(system, config)
    flow = flow_solver(system, config)
    logger.info(f"trajensemble-h0: {config.n_levelsets} level sets x {config.n_traj} trajectories x L={config.L}, "
                f"H0={H0:.6f}, flow {flow.label} over {flow.dt}")
    job = partial(_level_set, system, flow, config, H0, q0)
    groups = _run_groups(job, config.n_levelsets, workers, "level set")
    states, provenance = [], []
    for level, level_states in enumerate(groups):
        states.extend(level_states)
        #step index runs over trajectories then flow steps
        provenance.extend((level, step) for step in range(len(level_states)))
    return SampleSet(states, provenance, {"algo": "trajensemble", "H0": H0, **config.model_dump(mode="json")})


def sample(system: HamiltonianSystem, config: SamplerConfig, workers: Optional[int] = None) -> SampleSet:
    if config.algo == "hmc":
        return hmc_h0(system, config, workers)
    return traj_ensemble_h0(system, config, workers)


def _propagate(fine: Solver, S: int, u0: PhaseState) -> Optional[List[PhaseState]]:
    states = []
    u = u0
    try:
        for _ in range(S):
            u = fine.step(u)
            states.append(u)
    except NonFiniteStateError:
        return None
    return states


def build_training_set(D0: SampleSet, fine: Solver, S: int, workers: Optional[int] = None) -> TrainingSet:
    """Pairs (u0, [F u0, F^2 u0, ..., F^S u0]). Samples whose propagation blows up are dropped."""
    if S < 1:
        raise ConfigError("target sequence length S must be >= 1")
    if not D0.states:
        raise DimensionError("cannot build a training set from an empty sample set")
    with WorkerPool(workers) as pool:
        sequences = pool.map(partial(_propagate, fine, S), D0.states)
    inputs, targets = [], []
    for u0, seq in zip(D0.states, sequences):
        if seq is None:
            continue
        inputs.append(u0.as_vector())
        targets.append(stack_states(seq))
    dropped = len(D0.states) - len(inputs)
    if dropped:
        logger.warning(f"dropped {dropped} samples with non-finite fine propagation")
    d2 = 2 * D0.states[0].d
    return TrainingSet(
        inputs=np.array(inputs).reshape(-1, d2),
        targets=np.array(targets).reshape(-1, S, d2),
        dropped=dropped,
        header={"S": S, "dt": fine.dt, "fine": fine.label, "count": len(inputs), "d": d2 // 2},
    )


def min_distance_diagnostic(reference_traj: Sequence[PhaseState], sample_set: Union[SampleSet, np.ndarray]) -> np.ndarray:
    """Euclidean distance in R^2d from every reference point to its nearest sample."""
    points = sample_set.as_array() if isinstance(sample_set, SampleSet) else np.asarray(sample_set)
    if points.size == 0:
        raise DimensionError("sample set is empty")
    queries = stack_states(reference_traj)
    if queries.shape[1] != points.shape[1]:
        raise DimensionError("reference and samples have different dimensions")
    distances, _ = cKDTree(points).query(queries, k=1)
    return np.asarray(distances)


def write_dataset(path: Union[str, Path], dataset: TrainingSet, config_snapshot: Optional[dict] = None) -> Path:
    """One JSON header line starting with '#', then one CSV row per sample: u0 then the S targets."""
    path = Path(path)
    header = {**dataset.header, "count": len(dataset), "S": dataset.S, "d": dataset.d,
              "dropped": dataset.dropped, "config": config_snapshot or {}}
    with open(path, "w") as f:
        f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for u0, seq in zip(dataset.inputs, dataset.targets):
            row = np.concatenate([u0, seq.reshape(-1)])
            f.write(",".join(format_real(x) for x in row) + "\n")
    return path


def read_dataset(path: Union[str, Path]) -> TrainingSet:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset not found: {path}")
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# "):
            raise ConfigError(f"{path.name} has no dataset header")
        header = json.loads(first[2:])
        body = np.loadtxt(f, delimiter=",", ndmin=2)
    d2, S = 2 * header["d"], header["S"]
    if body.size == 0:
        body = np.zeros((0, d2 * (S + 1)))
    if body.shape[1] != d2 * (S + 1):
        raise ConfigError(f"{path.name}: expected {d2 * (S + 1)} columns, found {body.shape[1]}")
    return TrainingSet(inputs=body[:, :d2], targets=body[:, d2:].reshape(-1, S, d2),
                       dropped=header.get("dropped", 0), header=header)
