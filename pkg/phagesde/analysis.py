"""
Measurements on trajectories and ensembles.

Sup deviations over time windows, Monte Carlo concentration estimates with
Wilson intervals, decay-rate fits, envelope constants, scaling regressions and
the numerical convergence studies of the stochastic schemes.
"""

import math
from collections.abc import Sequence
from typing import Self

import joblib
import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import linregress, norm

from phagesde.exception import (
    ConcentrationException,
    InputException,
    InsufficientDataException,
)
from phagesde.integrate import (
    GridConfig,
    InitialCondition,
    NoiseConfig,
    Scheme,
    TerminalRecorder,
    WindowSupRecorder,
    integrate_sde_path,
    march_paths,
)
from phagesde.model import ModelParams, State
from phagesde.trajectory import HistoryTrajectory

MIN_COMPLETED_FRACTION = 0.9
BATCH_SIZE = 256
DEFAULT_CONFIDENCE = 0.95


def _deviation(traj: HistoryTrajectory, ref: State) -> NDArray:
    return np.hypot(traj.S - ref.S, traj.Q - ref.Q)


def sup_deviation(traj: HistoryTrajectory, interval: tuple[float, float], ref: State) -> float:
    mask = traj.window_mask(*interval)
    if not mask.any():
        raise InputException(
            f"interval {interval!r} has no node in [{traj.t0!r}, {traj.t_end!r}]"
        )
    return float(_deviation(traj, ref)[mask].max())


def wilson_ci(
    successes: int, trials: int, confidence: float = DEFAULT_CONFIDENCE
) -> tuple[float, float]:
    if trials < 1 or not 0 <= successes <= trials:
        raise InputException(f"need 0 <= successes <= trials, trials >= 1: {successes}/{trials}")
    z = float(norm.ppf(0.5 + confidence / 2.0))
    p_hat = successes / trials
    z2n = z * z / trials
    denominator = 1.0 + z2n
    center = (p_hat + z2n / 2.0) / denominator
    margin = z * math.sqrt(p_hat * (1.0 - p_hat) / trials + z2n / (4.0 * trials)) / denominator
    lo = 0.0 if successes == 0 else min(max(0.0, center - margin), p_hat)
    hi = 1.0 if successes == trials else max(min(1.0, center + margin), p_hat)
    return lo, hi


class ConcentrationQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: float = Field(gt=0, allow_inf_nan=False)
    interval: tuple[float, float]
    n_paths: int = Field(ge=1)
    eps: float = Field(allow_inf_nan=False)
    grid: GridConfig
    delayed: bool = False
    scheme: Scheme = Scheme.euler_maruyama_corrected

    @model_validator(mode="after")
    def _interval_inside_horizon(self) -> Self:
        t_a, t_b = self.interval
        if not 0 < t_a < t_b <= self.grid.t_end:
            raise ValueError(
                f"interval must satisfy 0 < t_a < t_b <= t_end={self.grid.t_end!r}, got {self.interval!r}"
            )
        return self


class ConcentrationEstimate(BaseModel):
    exceed_count: int = Field(ge=0)
    n_paths: int = Field(ge=1)
    p_hat: float
    ci: tuple[float, float]
    confidence: float = DEFAULT_CONFIDENCE
    failures: int = 0
    negative_paths: int = 0
    query: ConcentrationQuery

    @model_validator(mode="after")
    def _consistent(self) -> Self:
        lo, hi = self.ci
        if not 0.0 <= lo <= self.p_hat <= hi <= 1.0:
            raise ValueError(f"inconsistent estimate {self.p_hat!r} in {self.ci!r}")
        return self


class EnsembleDeviations(BaseModel):
    """Per-path sup deviations from E0 over the query window; NaN marks failed paths."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sup: NDArray
    failures: int
    negative_paths: int

    @property
    def completed(self) -> NDArray:
        return self.sup[~np.isnan(self.sup)]


def _run_batch(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    q: ConcentrationQuery,
    start: int,
    stop: int,
) -> tuple[int, NDArray, NDArray]:
    resolved = q.grid.resolve(p.zeta, q.delayed)
    recorder = WindowSupRecorder(stop - start, q.interval, p.e0.to_array(), resolved.dt)
    failed_at = march_paths(p, init, noise, range(start, stop), resolved, [recorder])
    if recorder.hits == 0:
        raise InputException(f"interval {q.interval!r} holds no grid node at dt={resolved.dt!r}")
    sup = np.where(np.isnan(failed_at), recorder.sup, np.nan)
    return start, sup, recorder.positivity.negative_paths()


class EnsembleRunner:
    """Spreads contiguous path batches over joblib workers."""

    def __init__(self, threads: int = 1, batch_size: int = BATCH_SIZE):
        self.threads = max(1, threads)
        self.batch_size = batch_size

    def sup_deviations(
        self, q: ConcentrationQuery, p: ModelParams, init: InitialCondition, seed: int
    ) -> EnsembleDeviations:
        noise = NoiseConfig(eps=q.eps, seed=seed, scheme=q.scheme)
        resolved = q.grid.resolve(p.zeta, q.delayed)
        if resolved.nodes_in(*q.interval) == 0:
            raise InputException(
                f"interval {q.interval!r} holds no grid node at dt={resolved.dt!r}; "
                "widen it or refine the grid"
            )
        bounds = [
            (start, min(start + self.batch_size, q.n_paths))
            for start in range(0, q.n_paths, self.batch_size)
        ]
        sup = np.empty(q.n_paths)
        negative = np.zeros(q.n_paths, dtype=bool)
        logger.debug(
            f"[EnsembleRunner] eps={q.eps!r}: {q.n_paths} paths in {len(bounds)} batch(es), "
            f"{self.threads} worker(s)"
        )
        if self.threads == 1 or len(bounds) == 1:
            results = [_run_batch(p, init, noise, q, a, b) for a, b in bounds]
        else:
            results = joblib.Parallel(n_jobs=min(self.threads, len(bounds)))(
                joblib.delayed(_run_batch)(p, init, noise, q, a, b) for a, b in bounds
            )
        for start, batch_sup, batch_negative in results:
            self._place(sup, negative, start, batch_sup, batch_negative)
        failures = int(np.isnan(sup).sum())
        if failures:
            logger.warning(f"[EnsembleRunner] eps={q.eps!r}: {failures} path(s) failed")
        return EnsembleDeviations(sup=sup, failures=failures, negative_paths=int(negative.sum()))

    @staticmethod
    def _place(sup, negative, start, batch_sup, batch_negative) -> None:
        sup[start : start + batch_sup.size] = batch_sup
        negative[start : start + batch_sup.size] = batch_negative


def ensemble_sup_deviations(
    q: ConcentrationQuery,
    p: ModelParams,
    init: InitialCondition,
    seed: int,
    threads: int = 1,
) -> EnsembleDeviations:
    return EnsembleRunner(threads).sup_deviations(q, p, init, seed)


def estimate_from_deviations(
    deviations: EnsembleDeviations,
    q: ConcentrationQuery,
    confidence: float = DEFAULT_CONFIDENCE,
) -> ConcentrationEstimate:
    completed = deviations.completed
    if completed.size < MIN_COMPLETED_FRACTION * q.n_paths:
        raise ConcentrationException(
            f"only {completed.size} of {q.n_paths} paths completed (eps={q.eps!r})"
        )
    exceed = int(np.count_nonzero(completed >= 2.0 * q.rho))
    trials = int(completed.size)
    return ConcentrationEstimate(
        exceed_count=exceed,
        n_paths=trials,
        p_hat=exceed / trials,
        ci=wilson_ci(exceed, trials, confidence),
        confidence=confidence,
        failures=deviations.failures,
        negative_paths=deviations.negative_paths,
        query=q,
    )


def estimate_concentration(
    q: ConcentrationQuery,
    p: ModelParams,
    init: InitialCondition,
    seed: int,
    confidence: float = DEFAULT_CONFIDENCE,
    threads: int = 1,
) -> ConcentrationEstimate:
    """Fraction of paths whose sup distance to E0 over the window reaches ``2 * rho``."""
    deviations = ensemble_sup_deviations(q, p, init, seed, threads)
    estimate = estimate_from_deviations(deviations, q, confidence)
    logger.info(
        f"[estimate_concentration] eps={q.eps!r} rho={q.rho!r}: "
        f"{estimate.exceed_count}/{estimate.n_paths} exceed, p_hat={estimate.p_hat:.4g}"
    )
    return estimate


def interval_from_kappas(
    kappa1: float, kappa2: float, c: float, rho: float, eta: float
) -> tuple[float, float]:
    if not 1.0 < kappa1 < kappa2:
        raise InputException(f"need 1 < kappa1 < kappa2, got {kappa1!r}, {kappa2!r}")
    if not 0.0 < rho < c:
        raise InputException(f"need 0 < rho < c, got rho={rho!r}, c={c!r}")
    if eta <= 0:
        raise InputException(f"eta must be positive, got {eta!r}")
    scale = math.log(c / rho) / eta
    return kappa1 * scale, kappa2 * scale


class DecayFit(BaseModel):
    rate: float
    intercept: float
    residual_rms: float
    n_nodes: int


def fit_decay_rate(
    traj: HistoryTrajectory,
    ref: State,
    window: tuple[float, float],
    floor: float = 1e-12,
) -> DecayFit:
    if floor <= 0:
        raise InputException(f"floor must be positive, got {floor!r}")
    deviation = _deviation(traj, ref)
    usable = traj.window_mask(*window) & (deviation > floor)
    n_nodes = int(usable.sum())
    if n_nodes < 10:
        raise InsufficientDataException(
            f"{n_nodes} node(s) above floor {floor:g} in window {window!r}, need 10"
        )
    t = traj.times[usable]
    y = -np.log(deviation[usable])
    fit = linregress(t, y)
    residuals = y - (fit.intercept + fit.slope * t)
    return DecayFit(
        rate=float(fit.slope),
        intercept=float(fit.intercept),
        residual_rms=float(np.sqrt(np.mean(residuals**2))),
        n_nodes=n_nodes,
    )


def exponential_envelope(
    traj: HistoryTrajectory,
    ref: State,
    eta: float,
    window: tuple[float, float] | None = None,
) -> float:
    """sup of ``|Z_t - ref| * exp(eta t)`` over ``t >= 0`` (inside ``window`` if given)."""
    window = window or (0.0, traj.t_end)
    mask = traj.window_mask(max(window[0], 0.0), window[1])
    if not mask.any():
        raise InputException(f"window {window!r} holds no node with t >= 0")
    return float(np.max(_deviation(traj, ref)[mask] * np.exp(eta * traj.times[mask])))


def bacteria_envelope_ratio(traj: HistoryTrajectory, p: ModelParams) -> float:
    start = traj.node_index(0.0)
    if start is None:
        raise InputException("trajectory has no node at t = 0")
    s0 = traj.S[start]
    if s0 <= 0:
        raise InputException(f"bacteria must be positive at t = 0, got {s0!r}")
    times = traj.times[start:]
    return float(np.max(traj.S[start:] * np.exp(p.gamma * times)) / s0)


def coupled_deviation(
    p: ModelParams,
    init: InitialCondition,
    grid: GridConfig,
    noise: NoiseConfig,
    delayed: bool = False,
) -> float:
    """sup over t >= 0 of the gap between a noisy path and its zero-noise twin."""
    noisy = integrate_sde_path(p, init, noise, grid, delayed)
    quiet = integrate_sde_path(p, init, noise.model_copy(update={"eps": 0.0}), grid, delayed)
    forward = noisy.window_mask(0.0, noisy.t_end)
    gap = noisy.states[forward] - quiet.states[forward]
    return float(np.max(np.hypot(gap[:, 0], gap[:, 1])))


class PowerLawFit(BaseModel):
    exponent: float
    intercept: float


def deviation_scaling(eps_values: Sequence[float], deviations: Sequence[float]) -> PowerLawFit:
    """Fit ``deviation ~ C |eps| ** exponent`` in log-log."""
    eps = np.abs(np.asarray(eps_values, dtype=np.float64))
    dev = np.asarray(deviations, dtype=np.float64)
    usable = (eps > 0) & (dev > 0)
    if usable.sum() < 2:
        raise InsufficientDataException("need at least two positive (eps, deviation) pairs")
    fit = linregress(np.log(eps[usable]), np.log(dev[usable]))
    return PowerLawFit(exponent=float(fit.slope), intercept=float(fit.intercept))


def deviation_exponent(eta: float, kappa3: float) -> float:
    if kappa3 <= 1:
        raise InputException(f"kappa3 must exceed 1, got {kappa3!r}")
    return 2.0 * eta / kappa3


class ScalingPoint(BaseModel):
    eps: float
    p_hat: float
    ci: tuple[float, float]
    included: bool = True


class ScalingFit(BaseModel):
    points: list[ScalingPoint]
    slope: float = Field(allow_inf_nan=False)
    intercept: float
    monotone_ok: bool

    @property
    def excluded(self) -> list[ScalingPoint]:
        return [point for point in self.points if not point.included]


def fit_scaling(points: Sequence[ScalingPoint]) -> ScalingFit:
    """OLS of ``log p_hat`` against ``1 / eps**2``; zero estimates are kept but flagged."""
    flagged = [point.model_copy(update={"included": point.p_hat > 0}) for point in points]
    usable = [point for point in flagged if point.included]
    if len(usable) < 3:
        raise InsufficientDataException(
            f"{len(usable)} estimate(s) with p_hat > 0, need 3"
        )
    x = np.array([1.0 / point.eps**2 for point in usable])
    y = np.log([point.p_hat for point in usable])
    fit = linregress(x, y)
    ordered = sorted(flagged, key=lambda point: abs(point.eps))
    monotone_ok = all(
        later.p_hat >= earlier.p_hat or later.ci[1] >= earlier.ci[0]
        for earlier, later in zip(ordered, ordered[1:], strict=False)
    )
    return ScalingFit(
        points=flagged,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        monotone_ok=monotone_ok,
    )


def scaling_regression(estimates: Sequence[ConcentrationEstimate]) -> ScalingFit:
    if not estimates:
        raise InsufficientDataException("no estimates")
    first = estimates[0].query
    for estimate in estimates[1:]:
        if estimate.query.rho != first.rho or estimate.query.interval != first.interval:
            raise InputException("estimates must share rho and interval")
    return fit_scaling(
        [ScalingPoint(eps=abs(e.query.eps), p_hat=e.p_hat, ci=e.ci) for e in estimates]
    )


class ConvergenceStudy(BaseModel):
    dts: list[float]
    errors: list[float]
    order: float


def _terminal_states(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    dt: float,
    t_end: float,
    n_paths: int,
    delayed: bool,
) -> NDArray:
    resolved = GridConfig(dt=dt, t_end=t_end, align_to_delay=False).resolve(p.zeta, delayed)
    if abs(resolved.n_steps * resolved.dt - t_end) > 1e-9 * t_end:
        raise InputException(f"t_end={t_end!r} is not a multiple of dt={dt!r}")
    recorder = TerminalRecorder(resolved.n_nodes - 1)
    failed_at = march_paths(p, init, noise, range(n_paths), resolved, [recorder])
    if not np.isnan(failed_at).all():
        raise InputException(f"{int((~np.isnan(failed_at)).sum())} path(s) diverged at dt={dt!r}")
    return recorder.states


def _slope(dts: Sequence[float], errors: Sequence[float]) -> float:
    errors = np.asarray(errors)
    if (errors <= 0).any():
        raise InsufficientDataException("zero error level, order undefined")
    return float(np.polyfit(np.log2(np.asarray(dts)), np.log2(errors), 1)[0])


def strong_order_study(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    dts: Sequence[float],
    t_end: float,
    refine: int = 64,
    n_paths: int = 32,
    delayed: bool = False,
) -> ConvergenceStudy:
    """
    RMS terminal error of each step size against a reference at ``min(dts) / refine``.

    Every level shares the reference's Brownian path: level ``dt`` aggregates
    ``dt / dt_ref`` fine draws per step.
    """
    dt_ref = min(dts) / refine
    reference = _terminal_states(
        p, init, noise.model_copy(update={"substeps": 1}), dt_ref, t_end, n_paths, delayed
    )
    errors = []
    for dt in dts:
        factor = round(dt / dt_ref)
        if abs(factor * dt_ref - dt) > 1e-9 * dt:
            raise InputException(f"dt={dt!r} is not a multiple of the reference step {dt_ref!r}")
        coarse = _terminal_states(
            p,
            init,
            noise.model_copy(update={"substeps": factor}),
            factor * dt_ref,
            t_end,
            n_paths,
            delayed,
        )
        gap = coarse - reference
        errors.append(float(np.sqrt(np.mean(np.sum(gap**2, axis=1)))))
        logger.debug(f"[strong_order_study] dt={dt!r}: rms error {errors[-1]:.3e}")
    return ConvergenceStudy(dts=list(dts), errors=errors, order=_slope(dts, errors))


def scheme_gap_study(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    dts: Sequence[float],
    t_end: float,
    n_paths: int = 32,
    delayed: bool = False,
) -> ConvergenceStudy:
    """Mean terminal gap between the two schemes on matched increments, per step size."""
    gaps = []
    for dt in dts:
        em = _terminal_states(
            p,
            init,
            noise.model_copy(update={"scheme": Scheme.euler_maruyama_corrected}),
            dt,
            t_end,
            n_paths,
            delayed,
        )
        heun = _terminal_states(
            p,
            init,
            noise.model_copy(update={"scheme": Scheme.heun_stratonovich}),
            dt,
            t_end,
            n_paths,
            delayed,
        )
        gaps.append(float(np.mean(np.hypot(*(em - heun).T))))
    return ConvergenceStudy(dts=list(dts), errors=gaps, order=_slope(dts, gaps))
