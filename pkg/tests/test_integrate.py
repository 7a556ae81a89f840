import math

import numpy as np
import pytest

from phagesde.exception import (
    GridException,
    HistoryLookupException,
    InputException,
    IntegrationException,
)
from phagesde.integrate import (
    GridConfig,
    InitialCondition,
    NoiseConfig,
    Scheme,
    TrajectoryRecorder,
    brownian_increments,
    history_lookup,
    integrate_deterministic,
    integrate_sde_path,
    integrate_transformed_path,
    march_paths,
)
from phagesde.model import ModelParams, State
from phagesde.trajectory import HistoryTrajectory, PositivityTracker


def test_grid_aligns_step_to_delay(params):
    resolved = GridConfig(dt=1e-3, t_end=1.0).resolve(params.zeta, delayed=True)
    assert resolved.lag_steps == 19
    assert resolved.lag_steps * resolved.dt == pytest.approx(params.zeta, rel=1e-14)
    assert resolved.t0 == pytest.approx(-params.zeta)
    assert resolved.time(resolved.lag_steps) == pytest.approx(0.0, abs=1e-15)
    assert resolved.time(resolved.n_nodes - 1) >= 1.0 - 1e-12


def test_grid_without_alignment(params):
    with pytest.raises(GridException):
        GridConfig(dt=1e-3, align_to_delay=False).resolve(params.zeta, delayed=True)
    resolved = GridConfig(dt=params.zeta / 15, align_to_delay=False).resolve(params.zeta, True)
    assert resolved.lag_steps == 15
    assert resolved.dt == params.zeta / 15


def test_grid_nondelayed_starts_at_zero(params):
    resolved = GridConfig(dt=0.01, t_end=1.0).resolve(params.zeta, delayed=False)
    assert resolved.lag_steps == 0
    assert resolved.t0 == 0.0
    assert resolved.n_steps == 100


def test_grid_counts_nodes_in_window(params):
    resolved = GridConfig(dt=1e-3, t_end=1.0).resolve(params.zeta, delayed=True)
    # nodes sit at multiples of zeta / 19, none inside this window
    assert resolved.nodes_in(0.5004, 0.5009) == 0
    assert resolved.nodes_in(0.5, 0.501) == 1
    assert resolved.nodes_in(0.0, 1.0) == resolved.n_steps


def test_history_lookup_on_and_off_grid():
    times = -0.5 + 0.1 * np.arange(11)
    states = np.stack([times**3 - times, 2.0 * times**2 + 1.0], axis=-1)
    hist = HistoryTrajectory(t0=-0.5, dt=0.1, states=states)
    assert history_lookup(hist, times[4]) == State.from_array(states[4])
    # cubic data is reproduced by the 4-node stencil
    t = 0.123
    np.testing.assert_allclose(hist.lookup(t), [t**3 - t, 2.0 * t**2 + 1.0], atol=1e-12)
    with pytest.raises(HistoryLookupException):
        history_lookup(hist, 0.6)
    with pytest.raises(HistoryLookupException):
        history_lookup(hist, -0.51)


def test_history_lookup_short_history_is_linear():
    hist = HistoryTrajectory(t0=0.0, dt=1.0, states=[[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_allclose(hist.lookup(0.25), [0.5, 1.5])


def test_reference_history(params, short_grid):
    hist = InitialCondition.reference().history(params, short_grid)
    assert hist.t0 == pytest.approx(-params.zeta)
    assert hist.t_end == pytest.approx(0.0, abs=1e-15)
    assert hist.S[0] == pytest.approx(4.8)
    assert hist.S[-1] == pytest.approx(4.8 * math.exp(params.alpha * params.zeta))
    assert np.all(hist.Q == 0.0)


def test_initial_history_must_be_finite(params, short_grid):
    steep = params.replace(alpha=1e5, zeta=0.01)
    with pytest.raises(InputException):
        InitialCondition.exponential(a_S=1.0, a_Q=0.0).history(steep, short_grid)


def test_scheme_accepts_names():
    assert Scheme("heun") is Scheme.heun_stratonovich
    assert Scheme("Euler_Maruyama_Corrected") is Scheme.euler_maruyama_corrected


def test_brownian_increments_statistics():
    dt = 0.01
    dw = brownian_increments(NoiseConfig(seed=7), 200_000, dt)
    assert dw.shape == (200_000, 2)
    assert np.all(np.abs(dw.mean(axis=0)) < 2e-3)
    np.testing.assert_allclose(dw.var(axis=0), [dt, dt], rtol=0.03)
    assert abs(np.corrcoef(dw.T)[0, 1]) < 0.01


def test_brownian_increments_are_addressable():
    noise = NoiseConfig(seed=3, path_index=5)
    full = brownian_increments(noise, 40, 0.01)
    np.testing.assert_array_equal(brownian_increments(noise, 40, 0.01), full)
    np.testing.assert_array_equal(brownian_increments(noise, 11, 0.01, start_step=13), full[13:24])
    other = brownian_increments(noise.model_copy(update={"path_index": 6}), 40, 0.01)
    assert not np.array_equal(other, full)


def test_brownian_increments_aggregate_across_substeps():
    fine = brownian_increments(NoiseConfig(seed=9), 400, 0.001)
    coarse = brownian_increments(NoiseConfig(seed=9, substeps=4), 100, 0.004)
    np.testing.assert_allclose(coarse, fine.reshape(100, 4, 2).sum(axis=1), rtol=1e-12, atol=1e-15)


def test_brownian_increments_reject_empty():
    with pytest.raises(InputException):
        brownian_increments(NoiseConfig(), 0, 0.01)


@pytest.mark.parametrize("delayed", [False, True])
def test_deterministic_equilibrium_is_fixed(params, short_grid, delayed):
    init = InitialCondition.constant(S0=0.0, Q0=params.q_bar)
    traj = integrate_deterministic(params, init, short_grid, delayed)
    assert np.all(traj.S == 0.0)
    assert np.all(traj.Q == params.q_bar)
    assert traj.positivity.clean


@pytest.mark.parametrize("scheme", list(Scheme))
def test_bacteria_free_line_is_invariant(params, short_grid, scheme):
    init = InitialCondition.constant(S0=0.0, Q0=2.0)
    noise = NoiseConfig(eps=0.3, seed=1, scheme=scheme)
    traj = integrate_sde_path(params, init, noise, short_grid, delayed=True)
    assert np.all(traj.S == 0.0)
    assert np.isfinite(traj.Q).all()


@pytest.mark.parametrize("scheme", list(Scheme))
def test_sde_path_is_reproducible(params, h1_init, short_grid, scheme):
    noise = NoiseConfig(eps=0.2, seed=11, path_index=3, scheme=scheme)
    first = integrate_sde_path(params, h1_init, noise, short_grid, delayed=True)
    second = integrate_sde_path(params, h1_init, noise, short_grid, delayed=True)
    np.testing.assert_array_equal(first.states, second.states)
    other = integrate_sde_path(
        params, h1_init, noise.model_copy(update={"seed": 12}), short_grid, delayed=True
    )
    assert not np.array_equal(first.states, other.states)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_zero_delay_matches_nondelayed_bitwise(params, h1_init, short_grid, scheme):
    p = params.replace(zeta=0.0)
    noise = NoiseConfig(eps=0.2, seed=5, scheme=scheme)
    delayed = integrate_sde_path(p, h1_init, noise, short_grid, delayed=True)
    plain = integrate_sde_path(p, h1_init, noise, short_grid, delayed=False)
    np.testing.assert_array_equal(delayed.states, plain.states)
    np.testing.assert_array_equal(
        integrate_deterministic(p, h1_init, short_grid, True).states,
        integrate_deterministic(p, h1_init, short_grid, False).states,
    )


def test_zero_noise_matches_deterministic_euler(params, h1_init, short_grid):
    traj = integrate_sde_path(params, h1_init, NoiseConfig(eps=0.0), short_grid, delayed=False)
    rk4 = integrate_deterministic(params, h1_init, short_grid, delayed=False)
    np.testing.assert_allclose(traj.states, rk4.states, rtol=5e-2, atol=1e-9)


def test_batch_rows_match_single_paths(params, h1_init, short_grid):
    noise = NoiseConfig(eps=0.3, seed=21, scheme=Scheme.heun_stratonovich)
    resolved = short_grid.resolve(params.zeta, delayed=True)
    recorder = TrajectoryRecorder(resolved.n_nodes, 4)
    failed = march_paths(params, h1_init, noise, [0, 1, 2, 3], resolved, [recorder])
    assert np.isnan(failed).all()
    for row, index in enumerate([0, 1, 2, 3]):
        single = integrate_sde_path(
            params, h1_init, noise.model_copy(update={"path_index": index}), short_grid, True
        )
        np.testing.assert_array_equal(recorder.states[:, row, :], single.states)


def test_transformed_path_agrees_with_heun(params, h1_init):
    grid = GridConfig(dt=1e-4, t_end=0.5)
    noise = NoiseConfig(eps=0.1, seed=4, scheme=Scheme.heun_stratonovich)
    direct = integrate_sde_path(params, h1_init, noise, grid, delayed=False)
    transformed = integrate_transformed_path(params, h1_init, noise, grid, delayed=False)
    np.testing.assert_allclose(transformed.states, direct.states, rtol=2e-2, atol=1e-7)


def test_transformed_path_agrees_with_heun_delayed(params, h1_init):
    grid = GridConfig(dt=1e-4, t_end=0.5)
    noise = NoiseConfig(eps=0.1, seed=4, scheme=Scheme.heun_stratonovich)
    direct = integrate_sde_path(params, h1_init, noise, grid, delayed=True)
    transformed = integrate_transformed_path(params, h1_init, noise, grid, delayed=True)
    np.testing.assert_allclose(transformed.states, direct.states, rtol=2e-2, atol=1e-7)


def test_divergence_raises_with_last_valid_time(short_grid):
    runaway = ModelParams(alpha=1e4, k=1.0, d=1.0, m=1.0, b=2.0, M=10)
    init = InitialCondition.constant(S0=1.0, Q0=1.0)
    with pytest.raises(IntegrationException) as info:
        integrate_deterministic(runaway, init, short_grid)
    assert 0.0 < info.value.last_valid_time < 1.0
    with pytest.raises(IntegrationException) as info:
        integrate_sde_path(runaway, init, NoiseConfig(eps=0.01), short_grid)
    assert 0.0 < info.value.last_valid_time < 1.0


def test_positivity_tracker_records_excursions():
    tracker = PositivityTracker(2)
    tracker.update(0.0, np.array([[1.0, 1.0], [1.0, 1.0]]))
    tracker.update(0.1, np.array([[-1e-3, 1.0], [-1e-12, 1.0]]))
    tracker.update(0.2, np.array([[-5e-3, 1.0], [1.0, -2.0]]), alive=np.array([True, False]))
    np.testing.assert_array_equal(tracker.negative_paths(), [True, False])
    report = tracker.report(0)
    assert not report.clean
    (excursion,) = report.excursions
    assert excursion.component == "S"
    assert excursion.first_time == 0.1
    assert excursion.min_value == -5e-3
    assert excursion.min_time == 0.2
    assert excursion.n_nodes == 2
    assert tracker.report(1).clean
    assert "below" in report.as_comments()[0]
