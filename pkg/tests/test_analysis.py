import json
import math
from pathlib import Path

import numpy as np
import pytest
from loguru import logger
from pydantic import ValidationError

from phagesde.analysis import (
    ConcentrationQuery,
    EnsembleDeviations,
    EnsembleRunner,
    ScalingPoint,
    bacteria_envelope_ratio,
    coupled_deviation,
    deviation_exponent,
    deviation_scaling,
    ensemble_sup_deviations,
    estimate_concentration,
    estimate_from_deviations,
    exponential_envelope,
    fit_decay_rate,
    fit_scaling,
    interval_from_kappas,
    scaling_regression,
    scheme_gap_study,
    strong_order_study,
    sup_deviation,
    wilson_ci,
)
from phagesde.exception import (
    ConcentrationException,
    InputException,
    InsufficientDataException,
)
from phagesde.integrate import (
    GridConfig,
    InitialCondition,
    NoiseConfig,
    WindowSupRecorder,
    integrate_deterministic,
    march_paths,
)
from phagesde.model import decay_rate_eta, delayed_invariant_region, region_membership
from phagesde.trajectory import HistoryTrajectory


@pytest.fixture
def small_query() -> ConcentrationQuery:
    return ConcentrationQuery(
        rho=0.05,
        interval=(0.5, 1.0),
        n_paths=12,
        eps=0.3,
        grid=GridConfig(dt=1e-3, t_end=1.0),
        delayed=True,
    )


def test_sup_deviation(params):
    times = 0.1 * np.arange(11)
    states = np.stack([np.zeros(11), params.q_bar + np.where(times < 0.55, 0.3, 0.1)], axis=-1)
    traj = HistoryTrajectory(t0=0.0, dt=0.1, states=states)
    assert sup_deviation(traj, (0.0, 1.0), params.e0) == pytest.approx(0.3)
    assert sup_deviation(traj, (0.6, 1.0), params.e0) == pytest.approx(0.1)
    with pytest.raises(InputException):
        sup_deviation(traj, (1.5, 2.0), params.e0)


def test_wilson_ci():
    lo, hi = wilson_ci(0, 100)
    assert lo == 0.0
    assert hi == pytest.approx(0.0370, abs=1e-4)
    lo, hi = wilson_ci(100, 100)
    assert hi == 1.0
    assert lo == pytest.approx(1.0 - 0.0370, abs=1e-4)
    lo, hi = wilson_ci(50, 100)
    assert lo == pytest.approx(1.0 - hi)
    assert lo < 0.5 < hi
    assert wilson_ci(50, 100, confidence=0.99)[0] < lo
    with pytest.raises(InputException):
        wilson_ci(5, 0)
    with pytest.raises(InputException):
        wilson_ci(11, 10)


def test_interval_from_kappas():
    t_a, t_b = interval_from_kappas(2.0, 3.0, 1.0, 0.1, 0.09735)
    assert t_a == pytest.approx(47.305, abs=1e-3)
    assert t_b == pytest.approx(70.958, abs=1e-3)
    with pytest.raises(InputException):
        interval_from_kappas(3.0, 2.0, 1.0, 0.1, 0.09735)
    with pytest.raises(InputException):
        interval_from_kappas(2.0, 3.0, 0.05, 0.1, 0.09735)
    with pytest.raises(InputException):
        interval_from_kappas(2.0, 3.0, 1.0, 0.1, 0.0)


def test_query_window_must_fit_horizon():
    with pytest.raises(ValidationError):
        ConcentrationQuery(
            rho=0.1, interval=(0.5, 2.0), n_paths=10, eps=0.1, grid=GridConfig(t_end=1.0)
        )
    with pytest.raises(ValidationError):
        ConcentrationQuery(
            rho=0.1, interval=(0.0, 0.5), n_paths=10, eps=0.1, grid=GridConfig(t_end=1.0)
        )


def test_fit_decay_rate_on_synthetic_decay(params):
    times = 0.05 * np.arange(401)
    states = np.stack([np.zeros(401), params.q_bar + 0.5 * np.exp(-0.3 * times)], axis=-1)
    traj = HistoryTrajectory(t0=0.0, dt=0.05, states=states)
    fit = fit_decay_rate(traj, params.e0, (1.0, 20.0))
    assert fit.rate == pytest.approx(0.3, rel=1e-6)
    assert fit.intercept == pytest.approx(-math.log(0.5), rel=1e-6)
    assert fit.residual_rms < 1e-8
    with pytest.raises(InsufficientDataException):
        fit_decay_rate(traj, params.e0, (1.0, 1.3))


def _h1_decay(params, h1_init, dt, horizon):
    traj = integrate_deterministic(params, h1_init, GridConfig(dt=dt, t_end=horizon), False)
    eta = decay_rate_eta(params)
    fit = fit_decay_rate(traj, params.e0, (10.0, horizon))
    envelope = exponential_envelope(traj, params.e0, eta)
    return eta, fit, envelope


def test_deterministic_decay_rate(params, h1_init):
    eta, fit, envelope = _h1_decay(params, h1_init, 1e-2, 60.0)
    assert fit.rate >= eta - 0.005
    assert math.isfinite(envelope)
    assert envelope < 1.0


@pytest.mark.slow
def test_deterministic_decay_rate_full_horizon(params, h1_init):
    eta, fit, envelope = _h1_decay(params, h1_init, 1e-3, 120.0)
    assert fit.rate >= eta - 0.005
    assert math.isfinite(envelope)


def test_bacteria_envelope_ratio(params, h1_init):
    traj = integrate_deterministic(params, h1_init, GridConfig(dt=1e-3, t_end=5.0), False)
    ratio = bacteria_envelope_ratio(traj, params)
    assert 1.0 <= ratio <= 1.0 + 1e-6


def test_bacteria_envelope_ratio_needs_bacteria(params):
    traj = integrate_deterministic(
        params, InitialCondition.constant(S0=0.0, Q0=1.0), GridConfig(dt=1e-2, t_end=1.0)
    )
    with pytest.raises(InputException):
        bacteria_envelope_ratio(traj, params)


def test_delayed_run_stays_in_invariant_region(params):
    region = delayed_invariant_region(params)
    init = InitialCondition.constant(S0=0.5 * region.s_range[1], Q0=0.6)
    traj = integrate_deterministic(params, init, GridConfig(dt=1e-3, t_end=100.0), delayed=True)
    report = region_membership(traj, region, tol=1e-8)
    assert not report.exited


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2, 0.4])
def test_coupled_deviation_is_linear_in_noise(params, eps):
    cfg_init = InitialCondition.reference()
    grid = GridConfig(dt=1e-4, t_end=1.0)
    noise = NoiseConfig(seed=17)
    base = coupled_deviation(params, cfg_init, grid, noise.model_copy(update={"eps": 0.05}), True)
    gap = coupled_deviation(params, cfg_init, grid, noise.model_copy(update={"eps": eps}), True)
    assert base > 0
    assert gap / eps <= 3.0 * base / 0.05


def test_coupled_deviation_without_noise(params, h1_init, short_grid):
    assert coupled_deviation(params, h1_init, short_grid, NoiseConfig(eps=0.0)) == 0.0


def test_deviation_scaling(params, h1_init, short_grid):
    eps_values = [0.02, 0.04, 0.08]
    gaps = [
        coupled_deviation(params, h1_init, short_grid, NoiseConfig(eps=eps, seed=2))
        for eps in eps_values
    ]
    fit = deviation_scaling(eps_values, gaps)
    assert 0.8 < fit.exponent < 1.2
    with pytest.raises(InsufficientDataException):
        deviation_scaling([0.1, 0.0], [0.3, 0.0])


def test_deviation_exponent():
    assert deviation_exponent(0.09735, 2.0) == pytest.approx(0.09735)
    with pytest.raises(InputException):
        deviation_exponent(0.09735, 1.0)


def _synthetic_points(eps_values, intercept=-0.5, slope=-0.01):
    points = []
    for eps in eps_values:
        p_hat = math.exp(intercept + slope / eps**2)
        points.append(ScalingPoint(eps=eps, p_hat=p_hat, ci=(0.9 * p_hat, min(1.0, 1.1 * p_hat))))
    return points


def test_fit_scaling_recovers_slope():
    points = [ScalingPoint(eps=0.05, p_hat=0.0, ci=(0.0, 0.0184))]
    points += _synthetic_points([0.2, 0.3, 0.4, 0.5])
    fit = fit_scaling(points)
    assert fit.slope == pytest.approx(-0.01, rel=1e-9)
    assert fit.intercept == pytest.approx(-0.5, rel=1e-9)
    assert fit.monotone_ok
    assert [p.eps for p in fit.excluded] == [0.05]


def test_fit_scaling_flags_non_monotone():
    points = _synthetic_points([0.2, 0.3, 0.4])
    points.append(ScalingPoint(eps=0.5, p_hat=0.01, ci=(0.005, 0.02)))
    assert not fit_scaling(points).monotone_ok


def test_fit_scaling_needs_three_positive_estimates():
    points = _synthetic_points([0.2, 0.3])
    points.append(ScalingPoint(eps=0.1, p_hat=0.0, ci=(0.0, 0.02)))
    with pytest.raises(InsufficientDataException):
        fit_scaling(points)


def test_ensemble_is_independent_of_batch_layout(params, small_query):
    init = InitialCondition.reference()
    serial = EnsembleRunner(threads=1).sup_deviations(small_query, params, init, seed=8)
    batched = EnsembleRunner(threads=1, batch_size=5).sup_deviations(small_query, params, init, 8)
    pooled = EnsembleRunner(threads=2, batch_size=4).sup_deviations(small_query, params, init, 8)
    np.testing.assert_array_equal(serial.sup, batched.sup)
    np.testing.assert_array_equal(serial.sup, pooled.sup)
    assert serial.failures == 0


def test_ensemble_row_matches_single_path(params, small_query):
    init = InitialCondition.reference()
    deviations = ensemble_sup_deviations(small_query, params, init, seed=8)
    resolved = small_query.grid.resolve(params.zeta, delayed=True)
    recorder = WindowSupRecorder(1, small_query.interval, params.e0.to_array(), resolved.dt)
    noise = NoiseConfig(eps=small_query.eps, seed=8)
    march_paths(params, init, noise, [7], resolved, [recorder])
    assert recorder.sup[0] == deviations.sup[7]


def test_ensemble_rejects_window_without_nodes(params, small_query):
    # node spacing is zeta / 19, so nothing falls between 0.5004 and 0.5009
    narrow = small_query.model_copy(update={"interval": (0.5004, 0.5009), "eps": 1.0, "rho": 1e-4})
    init = InitialCondition.reference()
    with pytest.raises(InputException, match="no grid node"):
        ensemble_sup_deviations(narrow, params, init, seed=1)
    with pytest.raises(InputException):
        estimate_concentration(narrow, params, init, seed=1)

def test_estimates_shrink_with_radius(params, small_query):
    init = InitialCondition.reference()
    deviations = ensemble_sup_deviations(small_query, params, init, seed=3)
    estimates = [
        estimate_from_deviations(deviations, small_query.model_copy(update={"rho": rho}))
        for rho in (0.01, 0.05, 0.2, 1.0, 1e4)
    ]
    p_hats = [e.p_hat for e in estimates]
    assert p_hats == sorted(p_hats, reverse=True)
    assert estimates[-1].exceed_count == 0
    assert estimates[-1].ci[0] == 0.0


def test_estimate_concentration_is_reproducible(params, small_query):
    init = InitialCondition.reference()
    first = estimate_concentration(small_query, params, init, seed=5)
    second = estimate_concentration(small_query, params, init, seed=5)
    assert first == second
    assert first.n_paths == small_query.n_paths
    assert first.ci[0] <= first.p_hat <= first.ci[1]


def test_estimate_requires_completed_paths(small_query):
    failing = EnsembleDeviations(
        sup=np.array([np.nan, np.nan] + [0.5] * 10), failures=2, negative_paths=0
    )
    with pytest.raises(ConcentrationException):
        estimate_from_deviations(failing, small_query)
    mostly = EnsembleDeviations(sup=np.array([np.nan] + [0.5] * 11), failures=1, negative_paths=0)
    estimate = estimate_from_deviations(mostly, small_query)
    assert estimate.n_paths == 11
    assert estimate.exceed_count == 11
    assert estimate.failures == 1


def test_scaling_regression_rejects_mixed_queries(params, small_query):
    deviations = EnsembleDeviations(sup=np.full(12, 0.5), failures=0, negative_paths=0)
    first = estimate_from_deviations(deviations, small_query)
    other = estimate_from_deviations(deviations, small_query.model_copy(update={"rho": 0.2}))
    with pytest.raises(InputException):
        scaling_regression([first, other])
    with pytest.raises(InsufficientDataException):
        scaling_regression([])


def test_positivity_of_noisy_paths(params):
    grid = GridConfig(dt=1e-4, t_end=1.0).resolve(params.zeta, delayed=True)
    recorder = WindowSupRecorder(200, (0.0, 1.0), params.e0.to_array(), grid.dt)
    noise = NoiseConfig(eps=1.0, seed=99)
    failed = march_paths(params, InitialCondition.reference(), noise, range(200), grid, [recorder])
    assert np.isnan(failed).all()
    assert recorder.positivity.negative_paths().mean() <= 0.01


def test_strong_order(params, h1_init):
    dts = [1e-3, 5e-4, 2.5e-4, 1.25e-4]
    study = strong_order_study(params, h1_init, NoiseConfig(eps=0.3, seed=6), dts, t_end=0.25, n_paths=64)
    assert study.dts == dts
    assert all(a > b for a, b in zip(study.errors, study.errors[1:]))
    assert study.order >= 0.35


def test_scheme_gap_shrinks_linearly(params):
    init = InitialCondition.constant(S0=1e-5, Q0=2.0)
    dts = [1e-3, 5e-4, 2.5e-4, 1.25e-4]
    study = scheme_gap_study(params, init, NoiseConfig(eps=0.002, seed=6), dts, t_end=1.0)
    assert study.order >= 0.9


def test_convergence_studies_need_matching_steps(params, h1_init):
    with pytest.raises(InputException):
        scheme_gap_study(params, h1_init, NoiseConfig(eps=0.1), [0.3], t_end=1.0)


@pytest.mark.slow
def test_concentration_scaling_shape(params):
    grid = GridConfig(dt=1e-3, t_end=40.0)
    init = InitialCondition.reference()
    estimates = [
        estimate_concentration(
            ConcentrationQuery(
                rho=0.1, interval=(20.0, 40.0), n_paths=2000, eps=eps, grid=grid, delayed=True
            ),
            params,
            init,
            seed=0,
            threads=4,
        )
        for eps in (0.05, 0.1, 0.2, 0.4)
    ]
    fit = scaling_regression(estimates)
    assert fit.monotone_ok
    assert fit.slope < 0


REFERENCE_BASELINE = Path(__file__).parent / "baselines" / "deterministic_reference.json"


@pytest.mark.slow
def test_deterministic_reference_run(params):
    traj = integrate_deterministic(
        params, InitialCondition.reference(), GridConfig(dt=1e-3, t_end=100.0), delayed=True
    )
    forward = traj.times >= 0
    S, Q, times = traj.S[forward], traj.Q[forward], traj.times[forward]
    peak = int(np.argmax(S))
    assert 0 < peak < S.size - 1
    below = np.flatnonzero(S[peak:] < 1e-3 * S[peak])
    assert below.size > 0
    outside = np.flatnonzero(np.abs(Q - params.q_bar) > 0.05)
    settled = outside[-1] + 1 if outside.size else 0
    assert settled < Q.size
    assert np.all(np.abs(Q[settled:] - params.q_bar) <= 0.05)

    thresholds = {
        "t_peak": float(times[peak]),
        "t_bacteria_below": float(times[peak + below[0]]),
        "t_phages_settled": float(times[settled]),
    }
    logger.info(f"deterministic reference thresholds: {thresholds}")
    if not REFERENCE_BASELINE.exists():
        REFERENCE_BASELINE.parent.mkdir(parents=True, exist_ok=True)
        REFERENCE_BASELINE.write_text(json.dumps(thresholds, indent=2) + "\n")
        logger.info(f"recorded baseline {REFERENCE_BASELINE}")
    baseline = json.loads(REFERENCE_BASELINE.read_text())
    assert thresholds == pytest.approx(baseline, rel=1e-9)
