"""
Experiment configuration.

Files are TOML or JSON; every section is a pydantic model validated on load,
so a bad value is reported before any numerical work starts.
"""
import json
import os
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Union

import mpmath
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..exceptions import ConfigError

load_dotenv()

DEFAULT_PINV_TOL = float(os.getenv("PARAREAL_PINV_TOL", "1e-12"))
DEFAULT_PINV_MAX_ITER = int(os.getenv("PARAREAL_PINV_MAX_ITER", "50"))
DEFAULT_MAX_REJECTS = int(os.getenv("PARAREAL_MAX_REJECTS", "10000"))

mpmath.mp.dps = 50

_POWER = re.compile(r"^\s*([0-9.]+)\s*\^\s*(-?[0-9]+)\s*$")


def parse_step(value: Union[str, float, int]) -> mpmath.mpf:
    """
    Step sizes as exact numbers. "2^-9" and "5^-6" are powers, anything else
    must be a decimal literal. Decimal strings are read exactly, floats are
    taken at their binary value.
    """
    if isinstance(value, (int, float)):
        return mpmath.mpf(value)
    match = _POWER.match(value)
    if match:
        return mpmath.power(mpmath.mpf(match.group(1)), int(match.group(2)))
    try:
        return mpmath.mpf(value.strip())
    except (ValueError, TypeError):
        raise ValueError(f"not a step size: {value!r}")


class Scheme(str, Enum):
    VV = "vv"
    CSS4 = "css4"
    KL8 = "kl8"


class Precision(str, Enum):
    DOUBLE = "double"
    DD = "dd"


class SystemConfig(BaseModel):
    system: Literal["fpu", "harmonic", "free"] = "fpu"
    m: int = Field(3, ge=1, description="stiff/soft spring pairs (fpu)")
    omega: float = Field(300.0, gt=0, description="stiff spring frequency (fpu)")
    d: int = Field(1, ge=1, description="dimension (harmonic, free)")
    stiffness: float = Field(1.0, gt=0)
    mass: float = Field(1.0, gt=0)


class IntegratorSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["integrator"] = "integrator"
    scheme: Scheme
    h: str
    precision: Precision = Precision.DOUBLE

    @field_validator("h", mode="before")
    @classmethod
    def validate_h(cls, v):
        if isinstance(v, (int, float)):
            v = repr(float(v))
        if not isinstance(v, str):
            raise ValueError("h must be a string like '2^-9' or a number")
        if parse_step(v) <= 0:
            raise ValueError("h must be positive")
        return v.strip()

    @property
    def step_mp(self) -> mpmath.mpf:
        return parse_step(self.h)

    @property
    def step(self) -> float:
        return float(self.step_mp)

    @property
    def label(self) -> str:
        suffix = ", dd" if self.precision == Precision.DD else ""
        return f"{self.scheme.value.upper()} h={self.h}{suffix}"

    def refined(self, levels: int = 1) -> "IntegratorSpec":
        """KL8 in double-double at h / 2^levels; used as the reference map."""
        h = self.step_mp / mpmath.power(2, levels)
        exponent = mpmath.log(h, 2)
        if mpmath.almosteq(exponent, mpmath.nint(exponent), 1e-30):
            text = f"2^{int(mpmath.nint(exponent))}"
        else:
            text = mpmath.nstr(h, 40)
        return IntegratorSpec(scheme=Scheme.KL8, h=text, precision=Precision.DD)


class NNSolverSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["nn"] = "nn"
    checkpoint: str

    @property
    def label(self) -> str:
        return f"NN {Path(self.checkpoint).name}"


SolverSpec = Union[IntegratorSpec, NNSolverSpec]


class InitialCondition(BaseModel):
    """`test`: the canonical FPU start; `ood`: same with momenta scaled by sqrt(2)."""

    kind: Literal["test", "ood", "explicit"] = "test"
    u: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_explicit(self):
        if self.kind == "explicit" and not self.u:
            raise ValueError("explicit initial condition needs u = [p..., q...]")
        return self


class SimulationConfig(BaseModel):
    solver: IntegratorSpec = IntegratorSpec(scheme=Scheme.KL8, h="2^-14", precision=Precision.DD)
    dt: float = Field(1.0, gt=0)
    steps: int = Field(1000, ge=0)
    initial: InitialCondition = InitialCondition()
    reference: Optional[IntegratorSpec] = None
    compare_reference: bool = False
    compare_precision: bool = False
    n_trust: Optional[int] = Field(None, ge=0)


class PararealConfig(BaseModel):
    N: int = Field(20, ge=1)
    K: int = Field(5, ge=0)
    dt: float = Field(1.0, gt=0)
    coarse: SolverSpec = IntegratorSpec(scheme=Scheme.CSS4, h="2^-8")
    fine: SolverSpec = IntegratorSpec(scheme=Scheme.KL8, h="2^-14", precision=Precision.DD)
    mode: Literal["plain", "procrustes"] = "plain"
    n_trust: Optional[int] = Field(None, ge=0)
    initial: InitialCondition = InitialCondition()
    reference: Optional[IntegratorSpec] = None
    compare_reference: bool = True
    pinv_tol: float = Field(DEFAULT_PINV_TOL, gt=0)
    pinv_max_iter: int = Field(DEFAULT_PINV_MAX_ITER, ge=1)
    pinv_policy: Literal["accept", "strict"] = "accept"
    dump_correctors: bool = True

    @property
    def trust_horizon(self) -> int:
        return self.N // 2 if self.n_trust is None else min(self.n_trust, self.N)


class SamplerConfig(BaseModel):
    algo: Literal["hmc", "trajensemble"] = "hmc"
    H0: Optional[float] = Field(None, description="defaults to the energy of the test initial condition")
    q0: Optional[List[float]] = None
    sigma: float = Field(0.1, gt=0)
    n_chains: int = Field(100, ge=1)
    n_trans: int = Field(2000, ge=1)
    n_levelsets: int = Field(400, ge=1)
    n_traj: int = Field(10, ge=1)
    L: int = Field(50, ge=1)
    delta_t: Optional[float] = Field(None, gt=0, description="0.4 for hmc, 0.1 for trajensemble")
    flow: IntegratorSpec = IntegratorSpec(scheme=Scheme.CSS4, h="5^-6")
    seed: int = 0
    max_rejects: int = Field(DEFAULT_MAX_REJECTS, ge=1)
    S: int = Field(5, ge=0, description="fine target steps per sample, 0 skips targets")
    target_dt: float = Field(1.0, gt=0)
    target_solver: IntegratorSpec = IntegratorSpec(scheme=Scheme.KL8, h="2^-14", precision=Precision.DD)
    reference_steps: Optional[int] = Field(None, ge=1, description="min-distance diagnostic horizon")

    @property
    def flow_dt(self) -> float:
        if self.delta_t is not None:
            return self.delta_t
        return 0.4 if self.algo == "hmc" else 0.1


class LRSchedule(BaseModel):
    initial: float = Field(1e-4, gt=0)
    max: float = Field(1e-3, gt=0)
    final: float = Field(1e-6, gt=0)
    warmup_fraction: float = Field(0.3, gt=0, lt=1)


ARCH_PRESETS = {"desk": (4, 64), "full": (4, 1000)}


class TrainConfig(BaseModel):
    dataset: Optional[str] = Field(None, description="dataset file; sample in-run when absent")
    arch: Literal["desk", "full", "custom"] = "desk"
    L: Optional[int] = Field(None, ge=1)
    n: Optional[int] = Field(None, ge=1)
    skip_scale: bool = True
    S: int = Field(1, ge=1)
    metric: Literal["mse", "ebe"] = "mse"
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(256, ge=1)
    lr_schedule: LRSchedule = LRSchedule()
    weight_decay: float = Field(1e-4, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_arch(self):
        if self.arch == "custom" and (self.L is None or self.n is None):
            raise ValueError("custom architecture needs L and n")
        return self

    @property
    def layers(self) -> tuple:
        if self.arch == "custom":
            return self.L, self.n
        L, n = ARCH_PRESETS[self.arch]
        return self.L or L, self.n or n


class EvalConfig(BaseModel):
    checkpoint: str = "model.ckpt"
    steps: int = Field(1000, ge=0)
    dt: float = Field(1.0, gt=0)
    n_trust: Optional[int] = Field(None, ge=0)
    initial: List[InitialCondition] = [InitialCondition(kind="test"), InitialCondition(kind="ood")]
    reference: IntegratorSpec = IntegratorSpec(scheme=Scheme.KL8, h="2^-15", precision=Precision.DD)
    timing_calls: int = Field(100, ge=1)


class BenchConfig(BaseModel):
    dt: float = Field(1.0, gt=0)
    solvers: List[SolverSpec] = [
        IntegratorSpec(scheme=Scheme.CSS4, h="2^-8"),
        IntegratorSpec(scheme=Scheme.CSS4, h="2^-9"),
        IntegratorSpec(scheme=Scheme.VV, h="2^-11"),
        IntegratorSpec(scheme=Scheme.VV, h="2^-14"),
    ]
    reference: IntegratorSpec = IntegratorSpec(scheme=Scheme.KL8, h="2^-18", precision=Precision.DD)
    initial: InitialCondition = InitialCondition()
    calls: int = Field(100, ge=1)


class ExperimentConfig(BaseModel):
    system: SystemConfig = SystemConfig()
    simulate: SimulationConfig = SimulationConfig()
    parareal: PararealConfig = PararealConfig()
    sampler: SamplerConfig = SamplerConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    bench: BenchConfig = BenchConfig()
    output_dir: Optional[str] = None
    seed: int = 0
    workers: int = Field(int(os.getenv("PARAREAL_WORKERS", "1")), ge=1)

    @model_validator(mode="after")
    def propagate_seed(self):
        #sections without their own seed inherit the top-level one
        if "seed" not in self.sampler.model_fields_set:
            self.sampler = self.sampler.model_copy(update={"seed": self.seed})
        if "seed" not in self.train.model_fields_set:
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text())
        else:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"could not parse {path.name}: {e}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path.name}: {e}")
