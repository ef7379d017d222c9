"""Figure generation from fiberflow run directories (read-only)."""

from .io import (PlotInputError, RunData, Snapshot, band_heights,
                 load_diagnostics, load_matrix, load_reference, load_run)
from .plots import KINDS, PlotSpec, render

__all__ = [
    "KINDS", "PlotInputError", "PlotSpec", "RunData", "Snapshot",
    "band_heights", "load_diagnostics", "load_matrix", "load_reference",
    "load_run", "render",
]
