"""
Time stepping for the deterministic and stochastic, delayed and non-delayed systems.

Stochastic paths advance in batches: an ``(n_paths, 2)`` array steps forward
while every row draws from its own counter-based Brownian stream, so a row's
values never depend on which other rows share the batch.
"""

import enum
import math
from collections.abc import Callable, Sequence
from typing import Annotated, Protocol

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import ndtri

from phagesde.exception import GridException, InputException, IntegrationException
from phagesde.model import (
    ModelParams,
    State,
    diffusion,
    drift_delayed,
    drift_nondelayed,
    stratonovich_correction,
)
from phagesde.trajectory import (
    NEGATIVITY_THRESHOLD,
    HistoryTrajectory,
    PositivityTracker,
    stencil_interpolate,
)

NonNegativeFloat = Annotated[float, Field(ge=0, allow_inf_nan=False)]

# raw 64-bit draws generated per path and chunk
CHUNK_DRAWS = 1 << 18
ALIGNMENT_TOLERANCE = 1e-9


class GridConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dt: float = Field(default=1e-3, gt=0, allow_inf_nan=False)
    t_end: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    align_to_delay: bool = True

    def resolve(self, zeta: float, delayed: bool) -> "ResolvedGrid":
        if delayed and zeta > 0:
            ratio = zeta / self.dt
            lag = round(ratio)
            if self.align_to_delay:
                lag = max(lag, 1)
                dt = zeta / lag
            else:
                if lag < 1 or abs(ratio - lag) > ALIGNMENT_TOLERANCE * ratio:
                    raise GridException(
                        f"zeta={zeta!r} is not an integer multiple of dt={self.dt!r}; "
                        "enable align_to_delay or pick another step"
                    )
                dt = self.dt
        else:
            lag = 0
            dt = self.dt
        n_steps = max(1, math.ceil(self.t_end / dt - ALIGNMENT_TOLERANCE))
        return ResolvedGrid(dt=dt, lag_steps=lag, n_steps=n_steps)


class ResolvedGrid(BaseModel):
    """Grid after delay alignment; node ``lag_steps`` sits at t = 0."""

    model_config = ConfigDict(frozen=True)

    dt: float
    lag_steps: int
    n_steps: int

    @property
    def t0(self) -> float:
        return -self.lag_steps * self.dt

    @property
    def n_nodes(self) -> int:
        return self.lag_steps + 1 + self.n_steps

    def time(self, node: int) -> float:
        return self.t0 + node * self.dt

    @property
    def history_times(self) -> NDArray:
        return self.t0 + self.dt * np.arange(self.lag_steps + 1)

    def nodes_in(self, t_a: float, t_b: float) -> int:
        """Number of nodes inside ``[t_a, t_b]``, with the same slack the window recorder uses."""
        slack = ALIGNMENT_TOLERANCE * self.dt
        times = self.time(np.arange(self.n_nodes))
        return int(np.count_nonzero((times >= t_a - slack) & (times <= t_b + slack)))


class InitFamily(enum.StrEnum):
    constant = "constant"
    exponential = "exponential"


class InitialCondition(BaseModel):
    """
    Initial history on [-zeta, 0].

    ``constant`` holds (S0, Q0); ``exponential`` grows both amplitudes as
    ``a * exp(alpha * (t + zeta))``.
    """

    model_config = ConfigDict(frozen=True)

    family: InitFamily = InitFamily.constant
    S0: NonNegativeFloat = 0.0
    Q0: NonNegativeFloat = 0.0
    a_S: NonNegativeFloat = 0.0
    a_Q: NonNegativeFloat = 0.0

    @classmethod
    def constant(cls, S0: float, Q0: float) -> "InitialCondition":
        return cls(family=InitFamily.constant, S0=S0, Q0=Q0)

    @classmethod
    def exponential(cls, a_S: float, a_Q: float) -> "InitialCondition":
        return cls(family=InitFamily.exponential, a_S=a_S, a_Q=a_Q)

    @classmethod
    def reference(cls) -> "InitialCondition":
        return cls.exponential(a_S=4.8, a_Q=0.0)

    def evaluate(self, times: Sequence[float] | NDArray, p: ModelParams) -> NDArray:
        times = np.asarray(times, dtype=np.float64)
        if self.family is InitFamily.constant:
            states = np.empty((times.size, 2))
            states[:, 0] = self.S0
            states[:, 1] = self.Q0
        else:
            growth = np.exp(p.alpha * (times + p.zeta))
            states = np.stack([self.a_S * growth, self.a_Q * growth], axis=-1)
        if not np.isfinite(states).all() or (states < 0).any():
            raise InputException("initial history must be finite and nonnegative")
        return states

    def history(self, p: ModelParams, grid: GridConfig) -> HistoryTrajectory:
        """The segment on [-zeta, 0] sampled on the delay-aligned grid."""
        aligned = grid.model_copy(update={"align_to_delay": True})
        resolved = aligned.resolve(p.zeta, delayed=True)
        times = resolved.history_times
        return HistoryTrajectory(t0=resolved.t0, dt=resolved.dt, states=self.evaluate(times, p))

    def at_zero(self, p: ModelParams) -> NDArray:
        return self.evaluate([0.0], p)[0]


class Scheme(enum.StrEnum):
    euler_maruyama_corrected = "em"
    heun_stratonovich = "heun"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            lowered = value.lower()
            for member in cls:
                if lowered == member.name:
                    return member
        return None


class NoiseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps: float = Field(default=0.0, allow_inf_nan=False)
    seed: int = Field(default=0, ge=0, lt=1 << 64)
    path_index: int = Field(default=0, ge=0, lt=1 << 64)
    scheme: Scheme = Scheme.euler_maruyama_corrected
    substeps: int = Field(default=1, ge=1)

    def stream_key(self, path_index: int | None = None) -> int:
        index = self.path_index if path_index is None else path_index
        return (self.seed << 64) | index


def _standard_normals(key: int, start: int, count: int) -> NDArray:
    """``count`` standard normals starting at raw draw ``start`` of stream ``key``."""
    block, skip = divmod(start, 4)
    bit_generator = np.random.Philox(key=key, counter=block)
    raw = bit_generator.random_raw(skip + count)[skip:]
    uniforms = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniforms)


def _increments_for_key(
    key: int, substeps: int, start_step: int, n_steps: int, dt: float
) -> NDArray:
    per_step = 2 * substeps
    z = _standard_normals(key, start_step * per_step, n_steps * per_step)
    return z.reshape(n_steps, substeps, 2).sum(axis=1) * math.sqrt(dt / substeps)


def brownian_increments(
    noise: NoiseConfig, n_steps: int, dt: float, start_step: int = 0
) -> NDArray:
    """
    Increments ``(n_steps, 2)`` of the path's Brownian motion at step ``dt``.

    Step ``n`` consumes raw draws ``[2 * substeps * n, 2 * substeps * (n + 1))``
    of the stream keyed by ``(seed, path_index)``. Summing ``k`` consecutive
    increments of a ``substeps=1`` stream at ``dt`` gives the single increment
    of a ``substeps=k`` stream at ``k * dt``.
    """
    if n_steps < 1:
        raise InputException(f"n_steps must be at least 1, got {n_steps}")
    return _increments_for_key(noise.stream_key(), noise.substeps, start_step, n_steps, dt)


class Recorder(Protocol):
    def record(self, node: int, t: float, states: NDArray, alive: NDArray) -> None: ...


class TrajectoryRecorder:
    """Stores every node of every path."""

    def __init__(self, n_nodes: int, n_paths: int, threshold: float = NEGATIVITY_THRESHOLD):
        self.states = np.empty((n_nodes, n_paths, 2))
        self.positivity = PositivityTracker(n_paths, threshold)

    def record(self, node: int, t: float, states: NDArray, alive: NDArray) -> None:
        self.states[node] = states
        self.positivity.update(t, states, alive)


class WindowSupRecorder:
    """Running sup of the Euclidean distance to ``ref`` over nodes inside ``[t_a, t_b]``."""

    def __init__(
        self,
        n_paths: int,
        window: tuple[float, float],
        ref: NDArray,
        dt: float,
        threshold: float = NEGATIVITY_THRESHOLD,
    ):
        slack = ALIGNMENT_TOLERANCE * dt
        self.t_a = window[0] - slack
        self.t_b = window[1] + slack
        self.ref = np.asarray(ref, dtype=np.float64)
        self.sup = np.zeros(n_paths)
        self.hits = 0
        self.positivity = PositivityTracker(n_paths, threshold)

    def record(self, node: int, t: float, states: NDArray, alive: NDArray) -> None:
        self.positivity.update(t, states, alive)
        if self.t_a <= t <= self.t_b:
            deviation = np.hypot(states[:, 0] - self.ref[0], states[:, 1] - self.ref[1])
            np.maximum(self.sup, deviation, out=self.sup)
            self.hits += 1


class TerminalRecorder:
    def __init__(self, last_node: int):
        self.last_node = last_node
        self.states: NDArray | None = None

    def record(self, node: int, t: float, states: NDArray, alive: NDArray) -> None:
        if node == self.last_node:
            self.states = states.copy()


def _drift_function(p: ModelParams, delayed_lag: bool) -> Callable[[NDArray, NDArray], NDArray]:
    if delayed_lag:
        return lambda x, lag: drift_delayed(x, lag, p)
    return lambda x, lag: drift_nondelayed(x, p)


def march_paths(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    path_indices: Sequence[int],
    grid: ResolvedGrid,
    recorders: Sequence[Recorder],
) -> NDArray:
    """
    Advance a batch of stochastic paths over ``grid`` and feed every node to ``recorders``.

    Returns the last valid time of each path (NaN for paths that completed).
    Rows that overflow are frozen at their last finite state and flagged
    through the ``alive`` mask handed to recorders.
    """
    n_paths = len(path_indices)
    lag = grid.lag_steps
    dt = grid.dt
    history = init.evaluate(grid.history_times, p)
    ring = np.empty((lag + 1, n_paths, 2))
    ring[:] = history[:, None, :]
    alive = np.ones(n_paths, dtype=bool)
    failed_at = np.full(n_paths, np.nan)
    for node in range(lag + 1):
        for recorder in recorders:
            recorder.record(node, grid.time(node), ring[node], alive)

    drift = _drift_function(p, delayed_lag=lag > 0)
    eps = noise.eps
    heun = noise.scheme is Scheme.heun_stratonovich
    keys = [noise.stream_key(i) for i in path_indices]
    chunk = max(1, CHUNK_DRAWS // (2 * noise.substeps))
    increments = np.zeros((0, n_paths, 2))
    chunk_start = 0

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(grid.n_steps):
            node = lag + step
            offset = step - chunk_start
            if eps != 0.0 and offset >= increments.shape[0]:
                chunk_start = step
                offset = 0
                count = min(chunk, grid.n_steps - step)
                increments = np.stack(
                    [_increments_for_key(key, noise.substeps, step, count, dt) for key in keys],
                    axis=1,
                )
            x = ring[node % (lag + 1)]
            lag_now = ring[(node - lag) % (lag + 1)]
            lag_next = ring[(node + 1 - lag) % (lag + 1)]
            f0 = drift(x, lag_now)
            if eps == 0.0:
                if heun:
                    pred = x + f0 * dt
                    x_new = x + 0.5 * (f0 + drift(pred, lag_next)) * dt
                else:
                    x_new = x + f0 * dt
            else:
                dw = increments[offset]
                g0 = diffusion(x, eps, p)
                if heun:
                    pred = x + f0 * dt + g0 * dw
                    f1 = drift(pred, lag_next)
                    g1 = diffusion(pred, eps, p)
                    x_new = x + 0.5 * (f0 + f1) * dt + 0.5 * (g0 + g1) * dw
                else:
                    x_new = x + (f0 + stratonovich_correction(x, eps, p)) * dt + g0 * dw
            finite = np.isfinite(x_new).all(axis=1)
            broken = alive & ~finite
            if broken.any():
                failed_at[broken] = grid.time(node)
                alive &= finite
                logger.warning(
                    f"[march_paths] {int(broken.sum())} path(s) overflowed at t={grid.time(node)!r}"
                )
            if not alive.all():
                x_new = np.where(alive[:, None], x_new, x)
            ring[(node + 1) % (lag + 1)] = x_new
            for recorder in recorders:
                recorder.record(node + 1, grid.time(node + 1), x_new, alive)
    return failed_at


def history_lookup(hist: HistoryTrajectory, t: float) -> State:
    """State at time ``t`` of a stored history; raises outside its covered range."""
    return State.from_array(hist.lookup(t))


def _check_dt_guidance(p: ModelParams, noise: NoiseConfig, dt: float) -> None:
    stiffness = noise.eps**2 * (p.M + 1.0) * p.sigma_cfg.C_bound * dt
    if stiffness > 0.1:
        logger.warning(
            f"[integrate_sde_path] eps^2 * max(sigma sigma') * dt = {stiffness:.3g} is not small; "
            "consider a smaller dt"
        )


def integrate_sde_path(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    grid: GridConfig,
    delayed: bool = False,
) -> HistoryTrajectory:
    resolved = grid.resolve(p.zeta, delayed)
    _check_dt_guidance(p, noise, resolved.dt)
    recorder = TrajectoryRecorder(resolved.n_nodes, 1)
    failed_at = march_paths(p, init, noise, [noise.path_index], resolved, [recorder])
    if not np.isnan(failed_at[0]):
        raise IntegrationException(
            f"path {noise.path_index} diverged after t={failed_at[0]!r}",
            last_valid_time=float(failed_at[0]),
        )
    positivity = recorder.positivity.report(0)
    if not positivity.clean:
        for line in positivity.as_comments():
            logger.warning(f"[integrate_sde_path] path {noise.path_index}: {line}")
    return HistoryTrajectory(
        t0=resolved.t0, dt=resolved.dt, states=recorder.states[:, 0, :], positivity=positivity
    )


def integrate_deterministic(
    p: ModelParams,
    init: InitialCondition,
    grid: GridConfig,
    delayed: bool = False,
) -> HistoryTrajectory:
    """
    Classical RK4 on the drift.

    With a delay the lag of the half-step stages is interpolated with a cubic
    stencil over already computed nodes; the other stages read exact nodes.
    """
    resolved = grid.resolve(p.zeta, delayed)
    lag = resolved.lag_steps
    h = resolved.dt
    states = np.empty((resolved.n_nodes, 2))
    states[: lag + 1] = init.evaluate(resolved.history_times, p)
    drift = _drift_function(p, delayed_lag=lag > 0)
    lag_now = lag_half = lag_next = None

    with np.errstate(over="ignore", invalid="ignore"):
        for node in range(lag, resolved.n_nodes - 1):
            z = states[node]
            if lag > 0:
                lag_now = states[node - lag]
                lag_half = stencil_interpolate(states, node - lag + 0.5, last=node)
                lag_next = states[node + 1 - lag]
            k1 = drift(z, lag_now)
            k2 = drift(z + 0.5 * h * k1, lag_half)
            k3 = drift(z + 0.5 * h * k2, lag_half)
            k4 = drift(z + h * k3, lag_next)
            z_new = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.isfinite(z_new).all():
                t_last = resolved.time(node)
                raise IntegrationException(
                    f"deterministic run diverged after t={t_last!r}", last_valid_time=t_last
                )
            states[node + 1] = z_new

    tracker = PositivityTracker(1)
    for node, t in enumerate(resolved.t0 + h * np.arange(resolved.n_nodes)):
        tracker.update(float(t), states[node][None, :])
    return HistoryTrajectory(
        t0=resolved.t0, dt=h, states=states, positivity=tracker.report(0)
    )


def integrate_transformed_path(
    p: ModelParams,
    init: InitialCondition,
    noise: NoiseConfig,
    grid: GridConfig,
    delayed: bool = False,
) -> HistoryTrajectory:
    """
    Reference path through the change of variables ``x = exp(-eps W1) S``,
    ``y = exp(-eps W2) Q``.

    The untruncated Stratonovich system becomes a random ODE in ``(x, y)``,
    stepped by explicit Euler with the same increments as the direct schemes.
    Only meaningful while the path stays in [0, M] x [0, M].
    """
    resolved = grid.resolve(p.zeta, delayed)
    lag = resolved.lag_steps
    h = resolved.dt
    eps = noise.eps
    history = init.evaluate(resolved.history_times, p)
    increments = brownian_increments(noise, resolved.n_steps, h)
    # W is zero on the initial segment
    w = np.zeros((resolved.n_nodes, 2))
    w[lag + 1 :] = np.cumsum(increments, axis=0)
    xy = np.empty((resolved.n_nodes, 2))
    xy[: lag + 1] = history
    b_now = p.b - 1.0 if lag == 0 else -1.0
    released = p.k * p.b * p.attenuation

    for node in range(lag, resolved.n_nodes - 1):
        x, y = xy[node]
        w1, w2 = w[node]
        dx = (p.alpha - p.k * math.exp(eps * w2) * y) * x
        dy = p.d * math.exp(-eps * w2) - p.m * y + b_now * p.k * math.exp(eps * w1) * x * y
        if lag > 0:
            x_lag, y_lag = xy[node - lag]
            w1_lag, w2_lag = w[node - lag]
            dy += released * math.exp(-eps * (w2 - w2_lag - w1_lag)) * x_lag * y_lag
        xy[node + 1] = (x + h * dx, y + h * dy)

    states = xy * np.exp(eps * w)
    if not np.isfinite(states).all():
        raise IntegrationException(
            "transformed path diverged", last_valid_time=float(resolved.t0)
        )
    tracker = PositivityTracker(1)
    for node in range(resolved.n_nodes):
        tracker.update(resolved.time(node), states[node][None, :])
    return HistoryTrajectory(t0=resolved.t0, dt=h, states=states, positivity=tracker.report(0))
