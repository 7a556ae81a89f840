import enum

from .base import Artifact, BaseArtifactWriter, WriteStatus, WrittenResult
from .exception import WriterException
from .figure import Curve, Figure, Panel, SvgFigureWriter
from .table import (
    UNITS_LEGEND,
    CsvTableWriter,
    Table,
    format_exact,
    format_short,
    trajectory_table,
)


class WriterNotFoundException(WriterException):
    pass


class WriterType(enum.StrEnum):
    csv = "csv"
    svg = "svg"
    none = "none"

    @classmethod
    def _missing_(cls, value: str):
        value = value.lower()
        for member in cls:
            if member.value == value:
                return member
        return cls.none


MAPPING: dict[WriterType, type[BaseArtifactWriter]] = {
    WriterType.csv: CsvTableWriter,
    WriterType.svg: SvgFigureWriter,
}


def find_writer_class(writer_type: WriterType) -> type[BaseArtifactWriter]:
    if writer_type not in MAPPING:
        raise WriterNotFoundException(f"no writer registered for {writer_type!r}")
    return MAPPING[writer_type]


__all__ = [
    "MAPPING",
    "UNITS_LEGEND",
    "Artifact",
    "BaseArtifactWriter",
    "CsvTableWriter",
    "Curve",
    "Figure",
    "Panel",
    "SvgFigureWriter",
    "Table",
    "WriteStatus",
    "WriterNotFoundException",
    "WriterType",
    "WrittenResult",
    "find_writer_class",
    "format_exact",
    "format_short",
    "trajectory_table",
]
