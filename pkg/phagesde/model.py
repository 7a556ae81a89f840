"""
Phage/bacteria interaction model.

Parameters, the truncation function σ, drift and diffusion fields, equilibria
with their stability, and the hypothesis and region validators.

Array-valued functions accept states shaped ``(..., 2)`` holding ``(S, Q)`` in
the last axis, so a single state and a batch of paths go through the same code.
"""

import enum
import math
from typing import Annotated, Any, Self

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq

from phagesde.exception import (
    DomainException,
    HypothesisViolationException,
    InputException,
)
from phagesde.trajectory import ON_GRID_TOLERANCE, HistoryTrajectory

FiniteFloat = Annotated[float, Field(allow_inf_nan=False)]
PositiveFloat = Annotated[float, Field(gt=0, allow_inf_nan=False)]
NonNegativeFloat = Annotated[float, Field(ge=0, allow_inf_nan=False)]

SCALAR_FIELDS = ("alpha", "k", "d", "m", "b", "mu", "zeta", "M")


class Bridge(enum.StrEnum):
    smoothstep_quintic = "smoothstep_quintic"
    linear_clamp = "linear_clamp"


class TruncationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    M: PositiveFloat
    bridge: Bridge = Bridge.smoothstep_quintic
    C_bound: float = Field(default=2.0, gt=1, allow_inf_nan=False)


def _smoothstep(u: NDArray) -> tuple[NDArray, NDArray]:
    value = u * u * u * (u * (6.0 * u - 15.0) + 10.0)
    slope = 30.0 * u * u * (u * (u - 2.0) + 1.0)
    return value, slope


def sigma_and_prime(x: ArrayLike, cfg: TruncationConfig) -> tuple[NDArray, NDArray]:
    """
    Vectorized σ and σ′.

    Negative inputs take the identity branch; only ``sigma_eval`` rejects them.
    """
    x = np.asarray(x, dtype=np.float64)
    M = cfg.M
    u = np.clip(x - M, 0.0, 1.0)
    if cfg.bridge is Bridge.smoothstep_quintic:
        s, ds = _smoothstep(u)
        gap = M + 1.0 - x
        bridge_value = x + s * gap
        bridge_slope = 1.0 - s + ds * gap
    else:
        bridge_value = x
        bridge_slope = np.ones_like(x)
    inside = x <= M
    saturated = x > M + 1.0
    value = np.where(inside, x, np.where(saturated, M + 1.0, bridge_value))
    slope = np.where(inside, 1.0, np.where(saturated, 0.0, bridge_slope))
    return value, slope


def sigma(x: ArrayLike, cfg: TruncationConfig) -> NDArray:
    return sigma_and_prime(x, cfg)[0]


def sigma_eval(x: float, cfg: TruncationConfig) -> tuple[float, float]:
    if not math.isfinite(x) or x < 0:
        raise DomainException(f"sigma is defined on [0, inf), got x={x!r}")
    value, slope = sigma_and_prime(x, cfg)
    return float(value), float(slope)


class ModelParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: PositiveFloat
    k: PositiveFloat
    d: PositiveFloat
    m: PositiveFloat
    b: float = Field(gt=1, allow_inf_nan=False)
    mu: NonNegativeFloat = 0.0
    zeta: NonNegativeFloat = 0.0
    M: PositiveFloat
    sigma_cfg: TruncationConfig

    @model_validator(mode="before")
    @classmethod
    def _default_truncation(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("sigma_cfg") is None and "M" in data:
            data = {**data, "sigma_cfg": {"M": data["M"]}}
        return data

    @model_validator(mode="after")
    def _truncation_matches_threshold(self) -> Self:
        if self.sigma_cfg.M != self.M:
            raise ValueError(
                f"sigma_cfg.M={self.sigma_cfg.M!r} differs from M={self.M!r}"
            )
        return self

    @classmethod
    def reference(cls) -> "ModelParams":
        """Parameter set of the reference simulation scenario."""
        return cls(
            alpha=12.1622, k=27.36, d=0.1, m=0.1947, b=61, mu=0.5, zeta=0.01875, M=10
        )

    @property
    def q_bar(self) -> float:
        return self.d / self.m

    @property
    def gamma(self) -> float:
        return self.k * self.d / self.m - self.alpha

    @property
    def attenuation(self) -> float:
        return math.exp(-self.mu * self.zeta)

    def b_eff(self, delayed: bool) -> float:
        return self.b * self.attenuation if delayed else self.b

    @property
    def e0(self) -> "State":
        return State(S=0.0, Q=self.q_bar)

    def replace(self, **changes: float) -> "ModelParams":
        """Copy with scalar fields changed; the truncation follows a new ``M``."""
        data = self.model_dump()
        data.update(changes)
        if "M" in changes:
            data["sigma_cfg"] = {**data["sigma_cfg"], "M": changes["M"]}
        return ModelParams.model_validate(data)


class State(BaseModel):
    model_config = ConfigDict(frozen=True)

    S: FiniteFloat
    Q: FiniteFloat

    def to_array(self) -> NDArray:
        return np.array([self.S, self.Q], dtype=np.float64)

    @classmethod
    def from_array(cls, z: ArrayLike) -> "State":
        z = np.asarray(z, dtype=np.float64)
        return cls(S=float(z[0]), Q=float(z[1]))


def _as_array(z: "State | ArrayLike") -> NDArray:
    if isinstance(z, State):
        return z.to_array()
    return np.asarray(z, dtype=np.float64)


def drift_nondelayed(z: "State | ArrayLike", p: ModelParams) -> NDArray:
    z = _as_array(z)
    S, Q = z[..., 0], z[..., 1]
    kq = p.k * sigma(Q, p.sigma_cfg)
    dS = (p.alpha - kq) * S
    dQ = p.m * (p.q_bar - Q) + (p.b - 1.0) * kq * S
    return np.stack([dS, dQ], axis=-1)


def drift_delayed(
    z_now: "State | ArrayLike", z_lag: "State | ArrayLike", p: ModelParams
) -> NDArray:
    z_now = _as_array(z_now)
    z_lag = _as_array(z_lag)
    S, Q = z_now[..., 0], z_now[..., 1]
    kq = p.k * sigma(Q, p.sigma_cfg)
    released = p.k * p.b * p.attenuation * sigma(z_lag[..., 1], p.sigma_cfg) * z_lag[..., 0]
    dS = (p.alpha - kq) * S
    dQ = p.m * (p.q_bar - Q) - kq * S + released
    return np.stack([dS, dQ], axis=-1)


def diffusion(z: "State | ArrayLike", eps: float, p: ModelParams) -> NDArray:
    return eps * sigma(_as_array(z), p.sigma_cfg)


def stratonovich_correction(z: "State | ArrayLike", eps: float, p: ModelParams) -> NDArray:
    """Itô drift correction ``(eps**2 / 2) * σ σ′`` per component."""
    value, slope = sigma_and_prime(_as_array(z), p.sigma_cfg)
    return 0.5 * eps * eps * value * slope


def jacobian(z: "State | ArrayLike", p: ModelParams, delayed: bool = False) -> NDArray:
    """Jacobian of the drift with lagged terms taken at the current state."""
    S, Q = _as_array(z)
    sq, dsq = sigma_and_prime(Q, p.sigma_cfg)
    sq, dsq = float(sq), float(dsq)
    gain = p.k * (p.b_eff(delayed) - 1.0)
    return np.array(
        [
            [p.alpha - p.k * sq, -p.k * dsq * S],
            [gain * sq, -p.m + gain * dsq * S],
        ]
    )


class Stability(enum.StrEnum):
    stable = "stable"
    unstable = "unstable"
    non_admissible = "non_admissible"


class EquilibriumPoint(BaseModel):
    state: State
    classification: Stability
    spectral_abscissa: float | None = None


class EquilibriumReport(BaseModel):
    delayed: bool
    points: list[EquilibriumPoint]
    non_admissible: list[EquilibriumPoint] = Field(default_factory=list)
    jacobian_at_E0: tuple[tuple[float, float], tuple[float, float]]
    eigenvalues: tuple[float, float]

    @property
    def e0(self) -> EquilibriumPoint:
        return self.points[0]

    @property
    def interior(self) -> EquilibriumPoint | None:
        return self.points[1] if len(self.points) > 1 else None


def _interior_equilibrium(p: ModelParams, delayed: bool) -> EquilibriumPoint | None:
    target = p.alpha / p.k
    b_eff = p.b_eff(delayed)
    if b_eff == 1.0 or target >= p.M + 1.0:
        return None
    if target <= p.M:
        q_hat = target
    else:
        q_hat = brentq(lambda x: float(sigma(x, p.sigma_cfg)) - target, p.M, p.M + 1.0)
    s_hat = (p.m * q_hat - p.d) / ((b_eff - 1.0) * p.alpha)
    state = State(S=s_hat, Q=q_hat)
    if s_hat <= 0:
        return EquilibriumPoint(state=state, classification=Stability.non_admissible)
    abscissa = float(np.linalg.eigvals(jacobian(state, p, delayed)).real.max())
    classification = Stability.stable if abscissa < 0 else Stability.unstable
    return EquilibriumPoint(
        state=state, classification=classification, spectral_abscissa=abscissa
    )


def equilibria(p: ModelParams, delayed: bool = False) -> EquilibriumReport:
    e0 = p.e0
    jac = jacobian(e0, p, delayed)
    # lower triangular at S = 0
    eigenvalues = (float(jac[0, 0]), float(jac[1, 1]))
    e0_stable = p.gamma > 0 and p.M > p.q_bar
    points = [
        EquilibriumPoint(
            state=e0,
            classification=Stability.stable if e0_stable else Stability.unstable,
            spectral_abscissa=max(eigenvalues),
        )
    ]
    rejected = []
    interior = _interior_equilibrium(p, delayed)
    if interior is not None and interior.classification is Stability.non_admissible:
        rejected.append(interior)
    elif interior is not None:
        points.append(interior)
    return EquilibriumReport(
        delayed=delayed,
        points=points,
        non_admissible=rejected,
        jacobian_at_E0=tuple(tuple(float(v) for v in row) for row in jac),
        eigenvalues=eigenvalues,
    )


def decay_rate_eta(p: ModelParams) -> float:
    if p.gamma <= 0:
        raise HypothesisViolationException(
            f"decay rate needs gamma = k*d/m - alpha > 0, got {p.gamma!r}"
        )
    return min(p.gamma, p.m / 2.0)


class ClauseResult(BaseModel):
    clause: str
    description: str
    passed: bool
    margin: float


class ValidationReport(BaseModel):
    hypothesis: str
    clauses: list[ClauseResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    @property
    def failures(self) -> list[ClauseResult]:
        return [c for c in self.clauses if not c.passed]


class Region(BaseModel):
    """Axis-aligned box in the (S, Q) plane; with ``M`` set both ranges must lie in [0, M]."""

    model_config = ConfigDict(frozen=True)

    s_range: tuple[NonNegativeFloat, FiniteFloat]
    q_range: tuple[NonNegativeFloat, FiniteFloat]
    M: PositiveFloat | None = None

    @model_validator(mode="after")
    def _ordered_bounds(self) -> Self:
        for name, (lo, hi) in (("s_range", self.s_range), ("q_range", self.q_range)):
            if lo > hi:
                raise ValueError(f"{name} bounds out of order: {lo!r} > {hi!r}")
            if self.M is not None and hi > self.M:
                raise ValueError(f"{name} upper bound {hi!r} exceeds M={self.M!r}")
        return self

    def contains(self, z: "State | ArrayLike", tol: float = 0.0) -> bool:
        S, Q = _as_array(z)
        return bool(
            self.s_range[0] - tol <= S <= self.s_range[1] + tol
            and self.q_range[0] - tol <= Q <= self.q_range[1] + tol
        )


def _bacteria_bound(p: ModelParams, b: float) -> float:
    if p.m * p.M <= p.d:
        raise HypothesisViolationException(
            f"empty region: m*M={p.m * p.M!r} does not exceed d={p.d!r}"
        )
    return (p.m * p.M - p.d) / (p.k * b * p.M)


def hypothesis1_region(p: ModelParams) -> Region:
    bound = min(_bacteria_bound(p, p.b - 1.0), p.M)
    return Region(s_range=(0.0, bound), q_range=(p.q_bar, p.M), M=p.M)


def delayed_invariant_region(p: ModelParams) -> Region:
    bound = min(_bacteria_bound(p, p.b_eff(delayed=True)), p.M)
    return Region(s_range=(0.0, bound), q_range=(p.q_bar, p.M), M=p.M)


def check_hypothesis1(p: ModelParams, init: State) -> ValidationReport:
    bound = (p.m * p.M - p.d) / (p.k * (p.b - 1.0) * p.M)
    margin_i = min(init.S, bound - init.S, init.Q - p.q_bar, p.M - init.Q)
    margin_ii = min(p.gamma, p.M - p.q_bar)
    return ValidationReport(
        hypothesis="H1",
        clauses=[
            ClauseResult(
                clause="H1(i)",
                description=f"initial state in [0, {bound:.6g}] x [{p.q_bar:.6g}, {p.M:g}]",
                passed=margin_i >= 0,
                margin=margin_i,
            ),
            ClauseResult(
                clause="H1(ii)",
                description="gamma = k*d/m - alpha > 0 and M > d/m",
                passed=p.gamma > 0 and p.M > p.q_bar,
                margin=margin_ii,
            ),
        ],
    )


def _initial_segment(p: ModelParams, hist: HistoryTrajectory) -> NDArray:
    slack = ON_GRID_TOLERANCE * hist.dt
    if hist.t0 > -p.zeta + slack or hist.t_end < -slack:
        raise InputException(
            f"history covers [{hist.t0!r}, {hist.t_end!r}], needs [{-p.zeta!r}, 0]"
        )
    return hist.states[hist.window_mask(-p.zeta, 0.0)]


def check_hypothesis2(p: ModelParams, hist: HistoryTrajectory) -> ValidationReport:
    cfg = p.sigma_cfg
    xs = np.union1d(np.linspace(0.0, p.M + 2.0, 20001), [p.M, p.M + 1.0])
    value, slope = sigma_and_prime(xs, cfg)
    identity_error = float(np.max(np.abs(value[xs <= p.M] - xs[xs <= p.M])))
    saturation_error = float(np.max(np.abs(value[xs > p.M + 1.0] - (p.M + 1.0))))
    min_increment = float(np.min(np.diff(value)))
    slope_margin = float(min(slope.min(), cfg.C_bound - slope.max()))
    segment = _initial_segment(p, hist)
    history_margin = float(segment.min()) if np.isfinite(segment).all() else -math.inf
    return ValidationReport(
        hypothesis="H2",
        clauses=[
            ClauseResult(
                clause="H2(i).identity",
                description="sigma(x) = x on [0, M]",
                passed=identity_error == 0.0,
                margin=-identity_error,
            ),
            ClauseResult(
                clause="H2(i).saturation",
                description="sigma(x) = M + 1 above M + 1",
                passed=saturation_error == 0.0,
                margin=-saturation_error,
            ),
            ClauseResult(
                clause="H2(i).monotone",
                description="sigma nondecreasing",
                passed=min_increment >= 0,
                margin=min_increment,
            ),
            ClauseResult(
                clause="H2(i).slope",
                description=f"0 <= sigma' <= C = {cfg.C_bound:g} and C > 1",
                passed=slope_margin >= 0 and cfg.C_bound > 1,
                margin=slope_margin,
            ),
            ClauseResult(
                clause="H2(ii)",
                description="initial history finite and nonnegative on [-zeta, 0]",
                passed=history_margin >= 0,
                margin=history_margin,
            ),
        ],
    )


def check_hypothesis3(p: ModelParams, hist: HistoryTrajectory) -> ValidationReport:
    segment = _initial_segment(p, hist)
    S, Q = segment[:, 0], segment[:, 1]
    s_now = S[-1]
    b_eff = p.b_eff(delayed=True)
    bound = (p.m * p.M - p.d) / (p.k * b_eff * p.M)
    margin_i = float(min(S.min(), (p.M - S).min(), (Q - p.q_bar).min(), (p.M - Q).min()))
    margin_iia = float(np.min(b_eff * Q * S - p.q_bar * s_now))
    margin_iii = float(bound - S.max())
    return ValidationReport(
        hypothesis="H3",
        clauses=[
            ClauseResult(
                clause="H3(i)",
                description=f"history in [0, {p.M:g}] x [{p.q_bar:.6g}, {p.M:g}]",
                passed=margin_i >= 0,
                margin=margin_i,
            ),
            ClauseResult(
                clause="H3(ii).a",
                description="b e^(-mu zeta) Q(t) S(t) > (d/m) S(0) on [-zeta, 0]",
                passed=margin_iia > 0,
                margin=margin_iia,
            ),
            ClauseResult(
                clause="H3(ii).b",
                description="b e^(-mu zeta) > 1",
                passed=b_eff > 1.0,
                margin=b_eff - 1.0,
            ),
            ClauseResult(
                clause="H3(iii)",
                description=f"S(t) < {bound:.6g} on [-zeta, 0]",
                passed=margin_iii > 0,
                margin=margin_iii,
            ),
        ],
    )


class ExitReport(BaseModel):
    exited: bool
    time: float | None = None
    component: str | None = None
    value: float | None = None


def region_membership(
    traj: HistoryTrajectory, region: Region, tol: float = 0.0
) -> ExitReport:
    """First node with ``t >= 0`` where the state leaves ``region`` widened by ``tol``."""
    if tol < 0:
        raise InputException(f"tolerance must be nonnegative, got {tol!r}")
    times = traj.times
    forward = times >= -ON_GRID_TOLERANCE * traj.dt
    S, Q = traj.S, traj.Q
    out_s = (S < region.s_range[0] - tol) | (S > region.s_range[1] + tol)
    out_q = (Q < region.q_range[0] - tol) | (Q > region.q_range[1] + tol)
    leaving = np.flatnonzero(forward & (out_s | out_q))
    if leaving.size == 0:
        return ExitReport(exited=False)
    n = int(leaving[0])
    component, value = ("S", S[n]) if out_s[n] else ("Q", Q[n])
    logger.debug(f"[region_membership] state left region at t={times[n]!r} via {component}")
    return ExitReport(exited=True, time=float(times[n]), component=component, value=float(value))
