"""
CSV tables: trajectories, ensemble summaries and sweeps.

An optional ``#`` legend line precedes the header; further ``#`` comment lines trail the data.
"""

import csv
import io
import math
from collections.abc import Iterable

import numpy as np
from pydantic import field_validator

from phagesde.trajectory import HistoryTrajectory
from phagesde.writer.base import Artifact, BaseArtifactWriter
from phagesde.writer.exception import NoRowsException

UNITS_LEGEND = "units: t in days; S and Q in tens of millions of units"


def format_exact(value: float) -> str:
    """Positional notation with 17 significant digits."""
    if not math.isfinite(value):
        return repr(float(value))
    return np.format_float_positional(value, precision=17, unique=False, fractional=False)


def format_short(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int | np.integer):
        return str(int(value))
    if not math.isfinite(value):
        return repr(float(value))
    return np.format_float_positional(value, trim="-")


class Table(Artifact):
    header: list[str]
    rows: list[list[str]]
    legend: str | None = None

    @field_validator("rows")
    @classmethod
    def _row_width(cls, rows: list[list[str]], info) -> list[list[str]]:
        width = len(info.data.get("header", []))
        for row in rows:
            if len(row) != width:
                raise ValueError(f"row {row!r} does not have {width} columns")
        return rows


class CsvTableWriter(BaseArtifactWriter):
    artifact_class = Table
    suffix = ".csv"

    def render(self, artifact: Table) -> bytes:
        if not artifact.rows:
            raise NoRowsException(f"nothing to write to {artifact.path}")
        buffer = io.StringIO()
        if artifact.legend is not None:
            buffer.write(f"# {artifact.legend}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(artifact.header)
        writer.writerows(artifact.rows)
        for line in artifact.comments:
            buffer.write(f"# {line}\n")
        return buffer.getvalue().encode("utf-8")


def trajectory_rows(traj: HistoryTrajectory) -> list[list[str]]:
    return [
        [format_exact(t), format_exact(s), format_exact(q)]
        for t, s, q in zip(traj.times, traj.S, traj.Q, strict=True)
    ]


def trajectory_table(path, traj: HistoryTrajectory, extra: Iterable[str] = ()) -> Table:
    comments = list(extra)
    if traj.positivity is not None:
        comments.extend(traj.positivity.as_comments())
    return CsvTableWriter.to_artifact(
        path=path,
        header=["t", "S", "Q"],
        rows=trajectory_rows(traj),
        comments=comments,
        legend=UNITS_LEGEND,
    )
