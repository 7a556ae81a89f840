"""
Time-gridded (S, Q) paths, their positivity monitoring and history lookup.

A trajectory always starts at ``t0`` (``-zeta`` for delayed runs) and holds one
state per node of a uniform grid, the initial segment included.
"""

import enum
import math

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator

from phagesde.exception import HistoryLookupException

NEGATIVITY_THRESHOLD = -1e-9
ON_GRID_TOLERANCE = 1e-9


class Component(enum.StrEnum):
    S = "S"
    Q = "Q"


class Excursion(BaseModel):
    """A component that went below the positivity threshold at least once."""

    component: Component
    first_time: float
    min_value: float
    min_time: float
    n_nodes: int


class PositivityReport(BaseModel):
    threshold: float = NEGATIVITY_THRESHOLD
    excursions: list[Excursion] = Field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.excursions

    def as_comments(self) -> list[str]:
        if self.clean:
            return [f"positivity: no component below {self.threshold:g}"]
        return [
            f"positivity: {e.component} below {self.threshold:g} first at t={e.first_time!r}, "
            f"min={e.min_value!r} at t={e.min_time!r}, nodes={e.n_nodes}"
            for e in self.excursions
        ]


class PositivityTracker:
    """Accumulates negative excursions for a batch of paths, node by node."""

    def __init__(self, n_paths: int, threshold: float = NEGATIVITY_THRESHOLD):
        self.threshold = threshold
        self.first_time = np.full((n_paths, 2), np.nan)
        self.min_value = np.full((n_paths, 2), np.inf)
        self.min_time = np.full((n_paths, 2), np.nan)
        self.n_nodes = np.zeros((n_paths, 2), dtype=np.int64)

    def update(self, t: float, states: NDArray, alive: NDArray | None = None) -> None:
        negative = states < self.threshold
        if alive is not None:
            negative &= alive[:, None]
        if not negative.any():
            return
        fresh = negative & np.isnan(self.first_time)
        self.first_time[fresh] = t
        lower = negative & (states < self.min_value)
        self.min_value[lower] = states[lower]
        self.min_time[lower] = t
        self.n_nodes += negative

    def negative_paths(self) -> NDArray:
        return (self.n_nodes > 0).any(axis=1)

    def report(self, row: int) -> PositivityReport:
        excursions = [
            Excursion(
                component=component,
                first_time=float(self.first_time[row, j]),
                min_value=float(self.min_value[row, j]),
                min_time=float(self.min_time[row, j]),
                n_nodes=int(self.n_nodes[row, j]),
            )
            for j, component in enumerate(Component)
            if self.n_nodes[row, j] > 0
        ]
        return PositivityReport(threshold=self.threshold, excursions=excursions)


class HistoryTrajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    t0: float
    dt: float = Field(gt=0)
    states: NDArray
    positivity: PositivityReport | None = None

    @field_validator("states", mode="before")
    @classmethod
    def _as_node_array(cls, value) -> NDArray:
        states = np.asarray(value, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 2 or states.shape[0] < 1:
            raise ValueError(f"states must have shape (n, 2), got {states.shape}")
        return states

    @property
    def n_nodes(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> NDArray:
        return self.t0 + self.dt * np.arange(self.n_nodes)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.n_nodes - 1)

    @property
    def S(self) -> NDArray:
        return self.states[:, 0]

    @property
    def Q(self) -> NDArray:
        return self.states[:, 1]

    def node_index(self, t: float) -> int | None:
        """Index of the node sitting at ``t``, or None when ``t`` is off-grid."""
        position = (t - self.t0) / self.dt
        nearest = round(position)
        if abs(position - nearest) <= ON_GRID_TOLERANCE and 0 <= nearest < self.n_nodes:
            return nearest
        return None

    def window_mask(self, t_a: float, t_b: float) -> NDArray:
        slack = ON_GRID_TOLERANCE * self.dt
        times = self.times
        return (times >= t_a - slack) & (times <= t_b + slack)

    def lookup(self, t: float) -> NDArray:
        return lookup_array(self, t)


def cubic_weights(theta: float) -> tuple[float, float, float, float]:
    """Lagrange weights of the 4-node stencil at offsets 0..3 evaluated at ``theta``."""
    a, b, c, d = theta, theta - 1.0, theta - 2.0, theta - 3.0
    return (-b * c * d / 6.0, a * c * d / 2.0, -a * b * d / 2.0, a * b * c / 6.0)


def stencil_interpolate(states: NDArray, position: float, last: int) -> NDArray:
    """Interpolate node values at fractional ``position`` using nodes ``0..last`` only."""
    below = math.floor(position)
    if last < 3:
        above = min(below + 1, last)
        fraction = position - below
        return states[below] + fraction * (states[above] - states[below])
    base = min(max(below - 1, 0), last - 3)
    w0, w1, w2, w3 = cubic_weights(position - base)
    return (
        w0 * states[base]
        + w1 * states[base + 1]
        + w2 * states[base + 2]
        + w3 * states[base + 3]
    )


def lookup_array(hist: HistoryTrajectory, t: float) -> NDArray:
    """(S, Q) at time ``t``: the stored node when on-grid, cubic interpolation otherwise."""
    position = (t - hist.t0) / hist.dt
    if not (-ON_GRID_TOLERANCE <= position <= hist.n_nodes - 1 + ON_GRID_TOLERANCE):
        raise HistoryLookupException(
            f"t={t!r} outside covered range [{hist.t0!r}, {hist.t_end!r}]"
        )
    index = hist.node_index(t)
    if index is not None:
        return hist.states[index].copy()
    return stencil_interpolate(hist.states, position, hist.n_nodes - 1)
