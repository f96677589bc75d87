import numpy as np
import pytest

from parareal_lab.exceptions import ConfigError, DimensionError, NonFiniteStateError, NumericalError
from parareal_lab.models.config import IntegratorSpec, PararealConfig, Precision, Scheme
from parareal_lab.models.phase import PhaseState
from parareal_lab.models.tableau import LOG10_ZERO_SENTINEL, PararealTableau
from parareal_lab.services.hamiltonian import FreeParticle, hamiltonian, stiff_spring_energies
from parareal_lab.services.parareal import (attach_reference, max_exactness_error, parareal_run,
                                            sequential_trajectory)
from parareal_lab.services.solvers import CallableSolver, IntegratorSolver, fine_sweep

COARSE = IntegratorSpec(scheme=Scheme.VV, h="2^-6")
FINE = IntegratorSpec(scheme=Scheme.CSS4, h="2^-9")


def small_config(**kw):
    base = dict(N=20, K=5, dt=0.125, coarse=COARSE, fine=FINE, compare_reference=False)
    base.update(kw)
    return PararealConfig(**base)


def test_exactness_plain(fpu50, u_test50):
    config = small_config()
    tableau = parareal_run(fpu50, u_test50, config)
    fine = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE), u_test50, config.N)
    assert len(tableau.states) == config.K + 1
    assert max_exactness_error(tableau, fine) <= 1e-9


def test_exactness_procrustes(fpu50, u_test50):
    config = small_config(mode="procrustes", K=3)
    tableau = parareal_run(fpu50, u_test50, config)
    fine = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE), u_test50, config.N)
    assert max_exactness_error(tableau, fine) <= 1e-9
    assert len(tableau.correctors) == 3
    for corrector in tableau.correctors:
        np.testing.assert_allclose(corrector.omega.T @ corrector.omega, np.eye(13), atol=1e-12)
    assert [s["iteration"] for s in tableau.pinv_stats] == [1, 2, 3]


def test_coarse_equal_to_fine_converges_in_one_iteration(fpu50, u_test50):
    config = small_config(coarse=FINE, K=1)
    tableau = parareal_run(fpu50, u_test50, config)
    fine = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE), u_test50, config.N)
    for n in range(config.N + 1):
        assert np.max(np.abs(tableau[1, n].as_vector() - fine[n].as_vector())) <= 1e-12


def test_zero_iterations_is_the_coarse_run(fpu50, u_test50):
    config = small_config(K=0)
    tableau = parareal_run(fpu50, u_test50, config)
    coarse = sequential_trajectory(IntegratorSolver(fpu50, config.dt, COARSE), u_test50, config.N)
    assert tableau.row(0) == coarse


def test_single_interval(fpu50, u_test50):
    tableau = parareal_run(fpu50, u_test50, small_config(N=1, K=1))
    assert tableau[1, 1] == IntegratorSolver(fpu50, 0.125, FINE).step(u_test50)


def test_worker_count_does_not_change_result(fpu50, u_test50):
    config = small_config(N=8, K=2, mode="procrustes")
    one = parareal_run(fpu50, u_test50, config, workers=1)
    two = parareal_run(fpu50, u_test50, config, workers=2)
    for k in range(config.K + 1):
        assert one.row(k) == two.row(k)


def test_procrustes_needs_an_energy_transform():
    free = FreeParticle(d=2)
    with pytest.raises(ConfigError):
        parareal_run(free, PhaseState([1.0, 0.0], [0.0, 0.0]), small_config(mode="procrustes"))


def test_reference_length_is_checked(fpu50, u_test50):
    with pytest.raises(ConfigError):
        parareal_run(fpu50, u_test50, small_config(), reference=[u_test50])


def test_non_finite_fine_output_reports_coordinates(fpu50, u_test50):
    def broken(u):
        return PhaseState(np.full(6, np.nan), u.q)

    with pytest.raises(NonFiniteStateError) as info:
        parareal_run(fpu50, u_test50, small_config(N=4, K=2),
                     fine=CallableSolver(fpu50, 0.125, broken, "broken"), workers=1)
    assert info.value.iteration == 0
    assert info.value.index == 0


def test_reference_metrics_respect_trust_horizon(fpu50, u_test50):
    config = small_config(N=6, K=2, n_trust=3)
    reference = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE), u_test50, config.N)
    tableau = parareal_run(fpu50, u_test50, config, reference=reference)
    assert tableau.n_trust == 3
    assert np.all(np.isnan(tableau.traj_error[:, 4:]))
    assert not np.any(np.isnan(tableau.traj_error[:, :4]))
    assert tableau.traj_error[2, 2] <= 1e-9
    grid = tableau.log10_grid("traj")
    assert grid[0, 0] == LOG10_ZERO_SENTINEL
    assert np.isnan(grid[0, 5])


def test_log10_grid_without_metrics_is_nan():
    tableau = PararealTableau(N=2, K=1)
    assert np.all(np.isnan(tableau.log10_grid("energy")))


def test_attach_reference_energy_errors(fpu50, u_test50):
    tableau = PararealTableau(N=1, K=0)
    tableau[0, 0] = u_test50
    tableau[0, 1] = u_test50.flipped()
    attach_reference(fpu50, tableau, [u_test50, u_test50], n_trust=1)
    np.testing.assert_array_equal(tableau.energy_error, [[0.0, 0.0]])
    assert tableau.traj_error[0, 1] == pytest.approx(2 * np.sqrt(2))



def test_strict_policy_rejects_unconverged_pseudo_inverse(fpu50, u_test50):
    with pytest.raises(NumericalError):
        parareal_run(fpu50, u_test50, small_config(N=4, K=2, mode="procrustes", pinv_policy="strict",
                                                   pinv_tol=1e-300), workers=1)


def test_accept_policy_counts_unconverged_pseudo_inverse(fpu50, u_test50):
    config = small_config(N=4, K=2, mode="procrustes", pinv_tol=1e-300)
    tableau = parareal_run(fpu50, u_test50, config, workers=1)
    assert all(stats["unconverged"] > 0 for stats in tableau.pinv_stats)
    assert all(stats["max_pinv_residual"] > 0.0 for stats in tableau.pinv_stats)


def test_fine_sweep_of_nothing_is_empty(fpu50):
    assert fine_sweep(fpu50, [], IntegratorSolver(fpu50, 0.125, FINE), parallelism=1) == []


def test_fine_sweep_is_independent_of_worker_count(fpu50, u_test50):
    solver = IntegratorSolver(fpu50, 0.125, FINE)
    states = sequential_trajectory(IntegratorSolver(fpu50, 0.125, COARSE), u_test50, 5)
    one = fine_sweep(fpu50, states, solver, parallelism=1)
    two = fine_sweep(fpu50, states, solver, parallelism=2)
    assert one == two
    assert one == [solver.step(u) for u in states]


def test_fine_sweep_checks_dimensions(fpu50, u_test50):
    with pytest.raises(DimensionError):
        fine_sweep(fpu50, [u_test50, PhaseState.zeros(4)], IntegratorSolver(fpu50, 0.125, FINE), parallelism=1)


def test_rows_past_the_interval_count_stay_on_the_fine_trajectory(fpu50, u_test50):
    config = small_config(N=3, K=5)
    tableau = parareal_run(fpu50, u_test50, config, workers=1)
    fine = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE), u_test50, config.N)
    for k in range(config.N, config.K + 1):
        for n in range(config.N + 1):
            np.testing.assert_array_equal(tableau[k, n].as_vector(), fine[n].as_vector())


def test_procrustes_energy_error_stays_bounded(fpu50, u_test50):
    config = small_config(mode="procrustes")
    reference = sequential_trajectory(IntegratorSolver(fpu50, config.dt, FINE.refined(1)), u_test50, config.N)
    tableau = parareal_run(fpu50, u_test50, config, reference=reference, workers=1)
    coarse_worst = np.nanmax(tableau.energy_error[0])
    for k in range(1, config.K + 1):
        assert np.nanmax(tableau.energy_error[k]) <= 10 * coarse_worst

@pytest.mark.slow
def test_procrustes_stabilizes_stiff_energy(fpu, u_test):
    #desk-scale stabilization study, T = 200
    base = dict(N=200, K=3, dt=1.0, coarse=IntegratorSpec(scheme=Scheme.CSS4, h="2^-8"),
                fine=IntegratorSpec(scheme=Scheme.KL8, h="2^-14", precision=Precision.DD))
    reference = sequential_trajectory(IntegratorSolver(fpu, 1.0, base["fine"].refined(1)), u_test, 200)
    runs = {mode: parareal_run(fpu, u_test, PararealConfig(mode=mode, **base), reference=reference, workers=8)
            for mode in ("plain", "procrustes")}
    plain, procrustes = runs["plain"], runs["procrustes"]
    assert np.nanmax(procrustes.energy_error[3]) * 5 <= np.nanmax(plain.energy_error[3])
    h0 = hamiltonian(fpu, u_test)

    def stiff_drift(tableau):
        return max(abs(stiff_spring_energies(fpu, u)[-1] - stiff_spring_energies(fpu, u_test)[-1])
                   for u in tableau.row(3)) / h0

    assert stiff_drift(procrustes) * 10 <= stiff_drift(plain)
