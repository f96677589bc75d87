import math

import numpy as np
import pytest
import torch
from torch import nn

from parareal_lab.exceptions import ConfigError, DimensionError
from parareal_lab.models.config import (IntegratorSpec, LRSchedule, NNSolverSpec, PararealConfig, SamplerConfig, Scheme,
                                        TrainConfig)
from parareal_lab.models.phase import PhaseState
from parareal_lab.services.checkpoint import load_checkpoint, save_checkpoint
from parareal_lab.services.hamiltonian import HarmonicSystem, energy_transform, fpu_test_state, trajectory_error
from parareal_lab.services.parareal import max_exactness_error, parareal_run, sequential_trajectory
from parareal_lab.services.sampling import TrainingSet, build_training_set, sample
from parareal_lab.services.solvers import IntegratorSolver, build_solver
from parareal_lab.services.surrogate import (DTYPE, NNSolver, ResNet, adam_step, build_model, energy_transform_torch,
                                             evaluate_loss, forward, gradient, loss_multistep, make_optimizer,
                                             one_cycle_lr, rollout, rollout_batch, set_torch_threads, train)


def test_model_init_is_seeded(fpu50):
    a = build_model(6, 3, 16, seed=5)
    b = build_model(6, 3, 16, seed=5)
    for (name, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), name
        if name.endswith("bias"):
            assert torch.count_nonzero(x) == 0
    assert not torch.equal(build_model(6, 3, 16, seed=6).input.weight, a.input.weight)


def test_forward_keeps_dimension(u_test50):
    out = forward(build_model(6, 2, 8), u_test50)
    assert out.d == 6
    with pytest.raises(DimensionError):
        forward(build_model(2, 2, 8), u_test50)


def test_architecture_is_validated():
    with pytest.raises(ConfigError):
        build_model(6, 0, 8)


def test_torch_energy_transform_matches_numpy(fpu50, harmonic, rng):
    for system in (fpu50, harmonic):
        u = PhaseState(rng.normal(size=system.d), rng.normal(size=system.d))
        lam = energy_transform_torch(system, torch.as_tensor(u.as_vector(), dtype=DTYPE)).numpy()
        np.testing.assert_allclose(lam, energy_transform(system, u), rtol=1e-14, atol=1e-15)


def test_loss_is_zero_on_own_rollout(fpu50, rng):
    model = build_model(6, 2, 8, seed=1)
    u0 = torch.as_tensor(rng.normal(scale=0.3, size=(5, 12)), dtype=DTYPE)
    with torch.no_grad():
        targets = rollout_batch(model, u0, 3)
        for metric in ("mse", "ebe"):
            assert float(loss_multistep(model, u0, targets, 3, metric, fpu50)) == 0.0


def test_unknown_metric(fpu50):
    model = build_model(6, 2, 4)
    u0 = torch.zeros((1, 12), dtype=DTYPE)
    with pytest.raises(ConfigError):
        loss_multistep(model, u0, torch.zeros((1, 1, 12), dtype=DTYPE), 1, "mae", fpu50)


def test_energy_balanced_error_weights_stiff_springs(fpu50, u_test50):
    delta = 1e-3
    q = np.array(u_test50.q)
    q[0] += delta
    moved = PhaseState(u_test50.p, q)
    mse = trajectory_error(moved, u_test50) ** 2
    ebe = float(np.sum((energy_transform(fpu50, moved) - energy_transform(fpu50, u_test50)) ** 2))
    r = u_test50.q[0]
    assert mse == pytest.approx(delta ** 2, rel=1e-9)
    assert ebe / mse == pytest.approx(50.0 ** 2 / 4 + ((r + delta) ** 2 - r ** 2) ** 2 / delta ** 2, rel=1e-9)


@pytest.mark.parametrize("metric", ["mse", "ebe"])
@pytest.mark.parametrize("S", [1, 3])
def test_gradient_matches_finite_differences(fpu50, metric, S):
    generator = np.random.default_rng(S)
    model = build_model(6, 3, 8, seed=2)
    u0 = torch.as_tensor(generator.normal(scale=0.3, size=(4, 12)), dtype=DTYPE)
    targets = torch.as_tensor(generator.normal(scale=0.3, size=(4, S, 12)), dtype=DTYPE)
    grads = gradient(model, u0, targets, S, metric, fpu50)
    params = dict(model.named_parameters())
    names = list(params)
    eps = 1e-6
    analytic, numeric = [], []
    for _ in range(50):
        name = names[generator.integers(len(names))]
        flat = params[name].data.view(-1)
        i = int(generator.integers(flat.numel()))
        saved = float(flat[i])
        with torch.no_grad():
            flat[i] = saved + eps
            up = float(loss_multistep(model, u0, targets, S, metric, fpu50))
            flat[i] = saved - eps
            down = float(loss_multistep(model, u0, targets, S, metric, fpu50))
            flat[i] = saved
        numeric.append((up - down) / (2 * eps))
        analytic.append(float(grads[name].reshape(-1)[i]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(analytic)


def test_one_cycle_shape():
    schedule = LRSchedule(initial=1e-4, max=1e-3, final=1e-6, warmup_fraction=0.3)
    assert one_cycle_lr(0, 100, schedule) == pytest.approx(1e-4)
    assert one_cycle_lr(30, 100, schedule) == pytest.approx(1e-3)
    assert one_cycle_lr(100, 100, schedule) == pytest.approx(1e-6)
    rates = [one_cycle_lr(s, 100, schedule) for s in range(101)]
    assert all(a <= b for a, b in zip(rates[:30], rates[1:31]))
    assert all(a >= b for a, b in zip(rates[30:], rates[31:]))
    with pytest.raises(ConfigError):
        one_cycle_lr(101, 100, schedule)


def test_adam_step_moves_parameters():
    model = build_model(1, 2, 4, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    optimizer = make_optimizer(model, 1e-2, 0.0)
    grads = {name: torch.ones_like(p) for name, p in model.named_parameters()}
    adam_step(optimizer, model, grads)
    for name, p in model.named_parameters():
        #first Adam step moves every entry by lr against the gradient sign
        torch.testing.assert_close(p.detach(), before[name] - 1e-2, rtol=0, atol=1e-9)


def rotation_dataset(count=64, S=2, dt=0.3, seed=0):
    generator = np.random.default_rng(seed)
    inputs = generator.normal(size=(count, 2))
    c, s = math.cos(dt), math.sin(dt)
    #unit harmonic oscillator, flat state (p, q)
    step = np.array([[c, -s], [s, c]])
    targets = np.empty((count, S, 2))
    u = inputs
    for i in range(S):
        u = u @ step.T
        targets[:, i] = u
    return TrainingSet(inputs=inputs, targets=targets, header={"dt": dt})


def test_training_reduces_loss_and_is_deterministic():
    system = HarmonicSystem(d=1)
    config = TrainConfig(arch="custom", L=2, n=16, S=2, epochs=40, batch_size=16, seed=3)
    first = train(system, rotation_dataset(), (2, 16), config)
    second = train(system, rotation_dataset(), (2, 16), config)
    assert first.history[-1] < first.initial_loss
    assert first.history == second.history
    for x, y in zip(first.model.state_dict().values(), second.model.state_dict().values()):
        assert torch.equal(x, y)


def test_training_checks_dataset(fpu50):
    config = TrainConfig(S=3)
    with pytest.raises(ConfigError):
        train(fpu50, rotation_dataset(S=2), (2, 4), config)


def test_rollout_metrics(fpu50, u_test50):
    model = build_model(6, 2, 8, seed=4)
    reference = [u_test50] * 6
    result = rollout(model, u_test50, 5, reference, fpu50, n_trust=2)
    assert len(result.states) == 6
    assert result.traj_error[0] == 0.0
    assert np.all(np.isnan(result.traj_error[3:]))
    assert result.energy_error.shape == (6,)


def test_checkpoint_round_trip_is_bitwise(tmp_path, u_test50):
    model = build_model(6, 3, 12, seed=9)
    path = save_checkpoint(tmp_path / "net.ckpt", model, train_config={"S": 1}, dt=0.1)
    loaded, header = load_checkpoint(path)
    assert header["activation"] == "elu" and header["L"] == 3 and header["n"] == 12
    assert forward(loaded, u_test50) == forward(model, u_test50)


def test_checkpoint_detects_tampering(tmp_path):
    path = save_checkpoint(tmp_path / "net.ckpt", build_model(1, 2, 4))
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_network_as_coarse_solver(tmp_path, fpu50, u_test50):
    model = build_model(6, 2, 8, seed=1)
    #a network that maps everything to the origin keeps the coarse run bounded
    with torch.no_grad():
        model.output.weight.zero_()
    path = save_checkpoint(tmp_path / "net.ckpt", model, dt=0.125)
    coarse = build_solver(fpu50, 0.125, NNSolverSpec(checkpoint=str(path)))
    assert isinstance(coarse, NNSolver)
    fine_spec = IntegratorSpec(scheme=Scheme.CSS4, h="2^-9")
    config = PararealConfig(N=4, K=2, dt=0.125, coarse=NNSolverSpec(checkpoint=str(path)), fine=fine_spec)
    tableau = parareal_run(fpu50, u_test50, config, workers=1)
    fine = sequential_trajectory(IntegratorSolver(fpu50, 0.125, fine_spec), u_test50, 4)
    assert max_exactness_error(tableau, fine) <= 1e-9


def test_zero_network_maps_everything_to_the_origin(u_test50):
    model = build_model(6, 3, 8, seed=7)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    assert forward(model, u_test50) == PhaseState.zeros(6)


def test_elu_branches():
    model = ResNet(1, 2, 1)
    out = model.act(torch.tensor([-1.0, 0.0, 2.0], dtype=DTYPE))
    torch.testing.assert_close(out, torch.tensor([math.exp(-1.0) - 1.0, 0.0, 2.0], dtype=DTYPE), rtol=0, atol=1e-16)


def test_two_layer_scalar_chain_by_hand():
    model = ResNet(1, 2, 1)
    with torch.no_grad():
        model.input.weight.copy_(torch.tensor([[0.5, 2.0]], dtype=DTYPE))
        model.input.bias.copy_(torch.tensor([0.1], dtype=DTYPE))
        model.hidden[0].weight.copy_(torch.tensor([[-1.5]], dtype=DTYPE))
        model.hidden[0].bias.copy_(torch.tensor([0.2], dtype=DTYPE))
        model.output.weight.copy_(torch.tensor([[0.7], [-0.3]], dtype=DTYPE))
        model.output.bias.copy_(torch.tensor([0.05, 0.0], dtype=DTYPE))
    #0.5 * 0.3 + 2.0 * -0.7 + 0.1 is negative, the hidden pre-activation positive
    y1 = math.expm1(0.5 * 0.3 + 2.0 * -0.7 + 0.1)
    y2 = y1 + 0.5 * (-1.5 * y1 + 0.2)
    out = forward(model, PhaseState([0.3], [-0.7]))
    assert out.p[0] == pytest.approx(0.7 * y2 + 0.05, abs=1e-14)
    assert out.q[0] == pytest.approx(-0.3 * y2, abs=1e-14)


def test_adam_matches_the_scalar_recurrence():
    lr, wd, g = 1e-2, 0.1, 0.3
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    model = nn.Linear(1, 1, bias=False, dtype=DTYPE)
    with torch.no_grad():
        model.weight.fill_(0.5)
    optimizer = make_optimizer(model, lr, wd)
    theta, m, v = 0.5, 0.0, 0.0
    for t in range(1, 26):
        adam_step(optimizer, model, {"weight": torch.full((1, 1), g, dtype=DTYPE)})
        theta *= 1.0 - lr * wd
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        theta -= lr * (m / (1.0 - beta1 ** t)) / (math.sqrt(v / (1.0 - beta2 ** t)) + eps)
        assert float(model.weight) == pytest.approx(theta, rel=1e-12)


def test_weight_decay_alone_shrinks_geometrically():
    lr, wd = 1e-2, 0.1
    model = nn.Linear(1, 1, bias=False, dtype=DTYPE)
    with torch.no_grad():
        model.weight.fill_(2.0)
    optimizer = make_optimizer(model, lr, wd)
    for t in range(1, 11):
        adam_step(optimizer, model, {"weight": torch.zeros((1, 1), dtype=DTYPE)})
        assert float(model.weight) == pytest.approx(2.0 * (1.0 - lr * wd) ** t, rel=1e-14)


def test_single_sample_is_memorized():
    system = HarmonicSystem(d=1)
    dataset = TrainingSet(inputs=np.array([[0.3, -0.7]]), targets=np.array([[[0.1, 0.4]]]), header={"dt": 0.1})
    config = TrainConfig(arch="custom", L=2, n=8, S=1, epochs=3000, batch_size=1, weight_decay=0.0,
                         lr_schedule=LRSchedule(initial=1e-3, max=1e-2, final=1e-5), seed=0)
    result = train(system, dataset, (2, 8), config)
    assert evaluate_loss(result.model, dataset, 1, "mse") <= 1e-6


def test_rollout_against_zero_energy_reference_is_nan(fpu50, u_test50):
    result = rollout(build_model(6, 2, 8, seed=4), u_test50, 2, [PhaseState.zeros(6)] * 3, fpu50)
    assert np.all(np.isnan(result.energy_error))


def test_torch_threads_are_set_on_request():
    before = torch.get_num_threads()
    try:
        assert set_torch_threads(2) == 2
        assert torch.get_num_threads() == 2
    finally:
        torch.set_num_threads(before)
    with pytest.raises(ConfigError):
        set_torch_threads(0)


def desk_dataset(system, algo, target):
    if algo == "hmc":
        config = SamplerConfig(n_chains=10, n_trans=500, sigma=0.1, seed=0, S=0)
    else:
        config = SamplerConfig(algo="trajensemble", n_levelsets=10, n_traj=10, L=50, sigma=0.1, seed=0, S=0)
    return build_training_set(sample(system, config, workers=8), target, 5, workers=8)


@pytest.mark.slow
def test_desk_scale_training(fpu50):
    #ResNet(4, 64) on 5000 samples of the omega = 50 chain, five-step targets over dt = 0.1
    target = IntegratorSolver(fpu50, 0.1, IntegratorSpec(scheme=Scheme.CSS4, h="2^-10"))
    u0 = fpu_test_state(3, 50.0)
    reference = sequential_trajectory(target, u0, 100)
    datasets = {algo: desk_dataset(fpu50, algo, target) for algo in ("hmc", "trajensemble")}
    assert len(datasets["hmc"]) == len(datasets["trajensemble"]) == 5000

    def fit(algo, metric, seed):
        config = TrainConfig(arch="desk", S=5, metric=metric, epochs=300, batch_size=256, seed=seed)
        return train(fpu50, datasets[algo], config.layers, config)

    def energy_error_at_100(result):
        out = rollout(result.model, u0, 100, reference, fpu50)
        return math.inf if out.truncated_at is not None else float(out.energy_error[100])

    first = fit("hmc", "ebe", 0)
    assert evaluate_loss(first.model, datasets["hmc"], 5, "ebe", fpu50) <= 1e-2 * first.initial_loss
    ebe = [energy_error_at_100(first)] + [energy_error_at_100(fit("hmc", "ebe", s)) for s in (1, 2)]
    mse = [energy_error_at_100(fit("hmc", "mse", s)) for s in (0, 1, 2)]
    assert np.median(ebe) <= np.median(mse)
    assert ebe[0] <= energy_error_at_100(fit("trajensemble", "ebe", 0))
