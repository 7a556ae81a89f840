"""
Static SVG figures with one panel per component.

Output is byte-reproducible: glyphs are drawn as paths, element ids come from a
fixed salt and no date is stamped.
"""

import io
import re

import matplotlib
from matplotlib.figure import Figure as MplFigure
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from phagesde.writer.base import Artifact, BaseArtifactWriter

DOCTYPE = re.compile(rb"<!DOCTYPE[^>]*>\s*")

SVG_RC = {
    "svg.fonttype": "path",
    "svg.hashsalt": "phagesde",
    "path.simplify": False,
}


class Curve(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    t: NDArray
    y: NDArray


class Panel(BaseModel):
    title: str
    ylabel: str
    curves: list[Curve] = Field(default_factory=list)


class Figure(Artifact):
    title: str = ""
    xlabel: str = "t (days)"
    panels: list[Panel]


class SvgFigureWriter(BaseArtifactWriter):
    artifact_class = Figure
    suffix = ".svg"

    def render(self, artifact: Figure) -> bytes:
        with matplotlib.rc_context(SVG_RC):
            fig = MplFigure(figsize=(6.4 * len(artifact.panels), 4.8))
            axes = fig.subplots(1, len(artifact.panels), squeeze=False)[0]
            for ax, panel in zip(axes, artifact.panels, strict=True):
                for curve in panel.curves:
                    ax.plot(curve.t, curve.y, label=curve.label, linewidth=1.0)
                ax.set_title(panel.title)
                ax.set_xlabel(artifact.xlabel)
                ax.set_ylabel(panel.ylabel)
                if len(panel.curves) > 1:
                    ax.legend()
            if artifact.title:
                fig.suptitle(artifact.title)
            fig.tight_layout()
            buffer = io.BytesIO()
            fig.savefig(buffer, format="svg", metadata={"Date": None})
        # drop the DTD reference so the file points at nothing external
        return DOCTYPE.sub(b"", buffer.getvalue(), count=1)
