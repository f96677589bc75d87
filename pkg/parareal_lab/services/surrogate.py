"""
Fully connected ResNet surrogate of the interval map F_dt.

    y1 = elu(W1 u + b1)
    yl = y(l-1) + (1/L) elu(Wl y(l-1) + bl),   l = 2..L
    out = W(L+1) yL + b(L+1)

Trained on multi-step rollouts (the net is applied recurrently S times) with
either a plain squared error or the energy-balanced error measured after the
energy transform. Everything runs in float64 on the CPU.
"""
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from dotenv import load_dotenv
from torch import nn

from ..exceptions import ConfigError, DimensionError, NonFiniteStateError, UnsupportedTransformError
from ..models.config import LRSchedule, TrainConfig
from ..models.phase import PhaseState
from .hamiltonian import (FpuSystem, HamiltonianSystem, HarmonicSystem, hamiltonian, relative_energy_error,
                          trajectory_error)
from .sampling import TrainingSet
from .solvers import Solver

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_TORCH_THREADS = int(os.getenv("PARAREAL_TORCH_THREADS", "1"))

DTYPE = torch.float64


def set_torch_threads(threads: Optional[int] = None) -> int:
    threads = DEFAULT_TORCH_THREADS if threads is None else threads
    if threads < 1:
        raise ConfigError(f"torch threads must be at least 1, got {threads}")
    torch.set_num_threads(threads)
    return threads


class ResNet(nn.Module):
    def __init__(self, d: int, L: int, n: int, skip_scale: bool = True):
        super().__init__()
        if d < 1 or L < 1 or n < 1:
            raise ConfigError(f"invalid architecture d={d}, L={L}, n={n}")
        self.d, self.L, self.n, self.skip_scale = d, L, n, skip_scale
        self.input = nn.Linear(2 * d, n, dtype=DTYPE)
        self.hidden = nn.ModuleList([nn.Linear(n, n, dtype=DTYPE) for _ in range(L - 1)])
        self.output = nn.Linear(n, 2 * d, dtype=DTYPE)
        self.act = nn.ELU()
        self.scale = 1.0 / L if skip_scale else 1.0

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        y = self.act(self.input(u))
        for layer in self.hidden:
            y = y + self.scale * self.act(layer(y))
        return self.output(y)

    def describe(self) -> dict:
        return {"L": self.L, "n": self.n, "d": self.d, "activation": "elu", "skip_scale": self.skip_scale}


def build_model(d: int, L: int, n: int, skip_scale: bool = True, seed: int = 0) -> ResNet:
    """He-normal weights (fan in), zero biases, drawn from a private seeded stream."""
    model = ResNet(d, L, n, skip_scale)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for module in model.modules():
            if isinstance(module, nn.Linear):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)
    return model


def forward(model: ResNet, u: PhaseState) -> PhaseState:
    if u.d != model.d:
        raise DimensionError(f"network expects d={model.d}, got d={u.d}")
    with torch.no_grad():
        out = model(torch.as_tensor(u.as_vector(), dtype=DTYPE)).numpy()
    return PhaseState.from_vector(out)


def energy_transform_torch(system: HamiltonianSystem, u: torch.Tensor) -> torch.Tensor:
    """Lambda applied to the last axis of a batch of flat states, differentiable."""
    d = system.d
    p, q = u[..., :d], u[..., d:]
    if isinstance(system, FpuSystem):
        stiff = 0.5 * system.omega * (q[..., 1::2] - q[..., 0::2])
        padded = nn.functional.pad(q, (1, 1))
        soft = (padded[..., 1::2] - padded[..., 0::2]) ** 2
        return torch.cat([p / math.sqrt(2.0), stiff, soft], dim=-1)
    if isinstance(system, HarmonicSystem):
        scale = torch.as_tensor(np.sqrt(2.0 * system.mass_diag), dtype=DTYPE)
        return torch.cat([p / scale, math.sqrt(0.5 * system.stiffness) * q], dim=-1)
    raise UnsupportedTransformError(f"{system.name} has no energy transform")


def rollout_batch(model: ResNet, u0: torch.Tensor, S: int) -> torch.Tensor:
    """(B, 2d) -> (B, S, 2d), the net applied recurrently."""
    states = []
    u = u0
    for _ in range(S):
        u = model(u)
        states.append(u)
    return torch.stack(states, dim=1)


def loss_multistep(model: ResNet, u0: torch.Tensor, targets: torch.Tensor, S: int, metric: str,
                   system: Optional[HamiltonianSystem] = None) -> torch.Tensor:
    """Batch mean of (1/S) sum_i |target_i - net^i(u0)|^2, optionally after the energy transform."""
    if targets.shape[1] < S:
        raise DimensionError(f"targets have {targets.shape[1]} steps, loss needs {S}")
    predicted = rollout_batch(model, u0, S)
    expected = targets[:, :S]
    if metric == "ebe":
        if system is None:
            raise ConfigError("the energy-balanced error needs a system")
        predicted = energy_transform_torch(system, predicted)
        expected = energy_transform_torch(system, expected)
    elif metric != "mse":
        raise ConfigError(f"unknown metric {metric!r}")
    return ((predicted - expected) ** 2).sum(dim=-1).mean(dim=1).mean()


def gradient(model: ResNet, u0: torch.Tensor, targets: torch.Tensor, S: int, metric: str,
             system: Optional[HamiltonianSystem] = None) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient of the batch loss, keyed like model.named_parameters()."""
    names, params = zip(*model.named_parameters())
    loss = loss_multistep(model, u0, targets, S, metric, system)
    grads = torch.autograd.grad(loss, params)
    return dict(zip(names, grads))


def evaluate_loss(model: ResNet, dataset: TrainingSet, S: int, metric: str,
                  system: Optional[HamiltonianSystem] = None, batch_size: int = 4096) -> float:
    """Mean loss over the whole set; inf when the rollout is not finite."""
    inputs = torch.as_tensor(dataset.inputs, dtype=DTYPE)
    targets = torch.as_tensor(dataset.targets, dtype=DTYPE)
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            stop = min(start + batch_size, len(dataset))
            loss = loss_multistep(model, inputs[start:stop], targets[start:stop], S, metric, system)
            total += float(loss) * (stop - start)
    value = total / max(len(dataset), 1)
    return value if math.isfinite(value) else math.inf


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def adam_step(optimizer: torch.optim.Optimizer, model: nn.Module, grads: Dict[str, torch.Tensor],
              lr: Optional[float] = None):
    """One decoupled-weight-decay Adam update with the given gradients."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    for name, param in model.named_parameters():
        param.grad = grads[name].detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def one_cycle_lr(step: int, total_steps: int, schedule: LRSchedule) -> float:
    """Cosine ramp initial -> max over the warmup fraction, then cosine max -> final."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside 0..{total_steps}")
    boundary = schedule.warmup_fraction * total_steps
    if step <= boundary:
        t = step / boundary
        return schedule.initial + (schedule.max - schedule.initial) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - boundary) / (total_steps - boundary)
    return schedule.final + (schedule.max - schedule.final) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainResult:
    model: ResNet
    history: List[float]
    initial_loss: float
    stopped_early: bool = False
    diagnostics: dict = field(default_factory=dict)


def train(system: HamiltonianSystem, dataset: TrainingSet, arch: Tuple[int, int], config: TrainConfig) -> TrainResult:
    """Mini-batch AdamW with a one-cycle schedule. Deterministic for a fixed seed."""
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    if dataset.S < config.S:
        raise ConfigError(f"dataset has {dataset.S} target steps, training needs S={config.S}")
    if dataset.d != system.d:
        raise DimensionError(f"dataset has d={dataset.d}, system has d={system.d}")
    set_torch_threads()
    L, n = arch
    model = build_model(system.d, L, n, config.skip_scale, config.seed)
    inputs = torch.as_tensor(dataset.inputs, dtype=DTYPE)
    targets = torch.as_tensor(dataset.targets[:, :config.S], dtype=DTYPE)
    count = len(dataset)
    batches = math.ceil(count / config.batch_size)
    total_steps = config.epochs * batches
    schedule = config.lr_schedule

    optimizer = make_optimizer(model, schedule.max, config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: one_cycle_lr(min(s, total_steps), total_steps, schedule) / schedule.max
    )
    shuffle = torch.Generator().manual_seed(config.seed)
    initial_loss = evaluate_loss(model, dataset, config.S, config.metric, system)
    logger.info(f"training ResNet({L}, {n}) on {count} samples, S={config.S}, {config.metric}, "
                f"{config.epochs} epochs, initial loss {initial_loss:.4e}")

    history: List[float] = []
    started = time.perf_counter()
    for epoch in range(config.epochs):
        order = torch.randperm(count, generator=shuffle)
        epoch_loss = 0.0
        for b in range(batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            loss = loss_multistep(model, inputs[idx], targets[idx], config.S, config.metric, system)
            if not torch.isfinite(loss):
                logger.error(f"non-finite loss at epoch {epoch}, batch {b}; stopping")
                return TrainResult(model, history, initial_loss, stopped_early=True,
                                   diagnostics={"epoch": epoch, "batch": b, "seconds": time.perf_counter() - started})
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss) * idx.numel()
        history.append(epoch_loss / count)
        if epoch % max(1, config.epochs // 10) == 0 or epoch == config.epochs - 1:
            logger.info(f"epoch {epoch}: loss {history[-1]:.4e}, lr {scheduler.get_last_lr()[0]:.2e}")
    return TrainResult(model, history, initial_loss, diagnostics={"seconds": time.perf_counter() - started})


@dataclass
class RolloutResult:
    states: List[PhaseState]
    traj_error: Optional[np.ndarray] = None
    energy_error: Optional[np.ndarray] = None
    truncated_at: Optional[int] = None


def rollout(model: ResNet, u0: PhaseState, steps: int, reference: Optional[Sequence[PhaseState]] = None,
            system: Optional[HamiltonianSystem] = None, n_trust: Optional[int] = None) -> RolloutResult:
    """
    [u0, net(u0), net(net(u0)), ...]. Stops at the first non-finite state and
    records its index. With a reference and a system, per-step trajectory
    errors (up to n_trust) and energy errors are attached.
    """
    states = [u0]
    truncated = None
    for step in range(1, steps + 1):
        try:
            states.append(forward(model, states[-1]))
        except NonFiniteStateError:
            logger.warning(f"rollout produced a non-finite state at step {step}; truncating")
            truncated = step
            break
    result = RolloutResult(states=states, truncated_at=truncated)
    if reference is not None and system is not None:
        horizon = len(states) - 1 if n_trust is None else n_trust
        count = min(len(states), len(reference))
        result.traj_error = np.array([trajectory_error(states[i], reference[i]) if i <= horizon else np.nan
                                      for i in range(count)])
        result.energy_error = np.array([relative_energy_error(hamiltonian(system, states[i]),
                                                              hamiltonian(system, reference[i]))
                                        for i in range(count)])
    return result


class NNSolver(Solver):
    """A trained network behind the solver-handle interface."""

    def __init__(self, system: HamiltonianSystem, dt: float, model: ResNet, label: str = "NN"):
        super().__init__(system, dt)
        if model.d != system.d:
            raise DimensionError(f"network has d={model.d}, system has d={system.d}")
        self.model = model.eval()
        self.label = label

    def step(self, u: PhaseState) -> PhaseState:
        return forward(self.model, u)

    @classmethod
    def from_checkpoint(cls, system: HamiltonianSystem, dt: float, path: str) -> "NNSolver":
        from .checkpoint import load_checkpoint

        model, header = load_checkpoint(path)
        trained_dt = header.get("dt")
        if trained_dt is not None and not math.isclose(trained_dt, dt, rel_tol=1e-12):
            logger.warning(f"network was trained for dt={trained_dt}, used with dt={dt}")
        return cls(system, dt, model, label=f"ResNet({model.L}, {model.n})")
