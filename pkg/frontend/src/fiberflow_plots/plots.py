"""Figure rendering from run directories.

Five plot kinds are supported, all consuming run-directory artifacts only:

    trajectory_bands    stacked per-species density bands, one panel per
                        snapshot time
    comparison_grid     coupling heatmaps, one row per run, one column per
                        shared snapshot time
    final_vs_reference  final coupling vs the Sinkhorn reference, with a
                        signed difference panel
    delta_e_curve       log-scale relative energy gap vs time, one line
                        per run
    bottleneck_bands    stacked bands of the final snapshot with the mu
                        density envelope overlaid

Color maps are a fixed choice (viridis for densities, coolwarm for signed
differences); they are documented here, not claimed to match any external
figure styling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .io import (PlotInputError, RunData, band_heights, load_diagnostics,
                 load_reference, load_run)

KINDS = ("trajectory_bands", "comparison_grid", "final_vs_reference",
         "delta_e_curve", "bottleneck_bands")


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    inputs: tuple[str, ...]
    output: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}; "
                             f"expected one of {KINDS}")
        if not self.inputs:
            raise ValueError("inputs must be non-empty")


def render(spec: PlotSpec) -> Path:
    """Render ``spec`` and return the written image path."""
    fig = _DISPATCH[spec.kind](spec)
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out


def _species_colors(n: int) -> np.ndarray:
    return plt.get_cmap("viridis")(np.linspace(0.1, 0.9, n))


def _stacked_bands(ax, run: RunData, snap, colors) -> None:
    x = run.x_centers()
    heights = band_heights(snap, run.nu_weights())
    cum = np.concatenate([np.zeros((run.m, 1)),
                          np.cumsum(heights, axis=1)], axis=1)
    for j in range(run.n):
        ax.fill_between(x, cum[:, j], cum[:, j + 1],
                        color=colors[j], linewidth=0.0)
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("x")


def _fig_trajectory_bands(spec: PlotSpec):
    run = load_run(spec.inputs[0])
    if not run.snapshots:
        raise PlotInputError(f"{run.path}: run has no snapshots")
    colors = _species_colors(run.n)
    k = len(run.snapshots)
    fig, axes = plt.subplots(1, k, figsize=(3.0 * k, 2.6),
                             sharey=True, squeeze=False)
    for ax, snap in zip(axes[0], run.snapshots):
        _stacked_bands(ax, run, snap, colors)
        ax.set_title(f"t = {snap.time:g}")
    axes[0][0].set_ylabel("stacked density")
    fig.suptitle(run.label)
    return fig


def _heatmap(ax, run: RunData, r: np.ndarray, vmax: float) -> None:
    ax.imshow(r.T, origin="lower", aspect="auto", cmap="viridis",
              vmin=0.0, vmax=vmax, extent=(0.0, 1.0, 0.0, 1.0))
    ax.set_xlabel("x")


def _fig_comparison_grid(spec: PlotSpec):
    runs = [load_run(p) for p in spec.inputs]
    times = sorted(set.intersection(
        *[{s.time for s in run.snapshots} for run in runs]))
    if not times:
        raise PlotInputError("runs share no snapshot times")
    vmax = max(float(s.r.max()) for run in runs for s in run.snapshots
               if s.time in times)
    fig, axes = plt.subplots(len(runs), len(times),
                             figsize=(2.6 * len(times), 2.4 * len(runs)),
                             squeeze=False)
    for i, run in enumerate(runs):
        by_time = {s.time: s for s in run.snapshots}
        for k, t in enumerate(times):
            ax = axes[i][k]
            _heatmap(ax, run, by_time[t].r, vmax)
            if i == 0:
                ax.set_title(f"t = {t:g}")
        axes[i][0].set_ylabel(run.label, fontsize=8)
    return fig


def _fig_final_vs_reference(spec: PlotSpec):
    run = load_run(spec.inputs[0])
    if not run.snapshots:
        raise PlotInputError(f"{run.path}: run has no snapshots")
    final = run.snapshots[-1]
    ref = load_reference(run.path)
    if ref.shape != final.r.shape:
        raise PlotInputError(
            f"reference shape {ref.shape} does not match final "
            f"snapshot {final.r.shape}")
    vmax = max(float(final.r.max()), float(ref.max()))
    diff = final.r - ref
    lim = max(float(np.abs(diff).max()), 1e-300)
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.6))
    _heatmap(axes[0], run, final.r, vmax)
    axes[0].set_title(f"final (t = {final.time:g})")
    _heatmap(axes[1], run, ref, vmax)
    axes[1].set_title("Sinkhorn reference")
    axes[2].imshow(diff.T, origin="lower", aspect="auto", cmap="coolwarm",
                   vmin=-lim, vmax=lim, extent=(0.0, 1.0, 0.0, 1.0))
    axes[2].set_title("difference")
    axes[2].set_xlabel("x")
    fig.suptitle(run.label)
    return fig


def _fig_delta_e_curve(spec: PlotSpec):
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for path in spec.inputs:
        run = load_run(path)
        diag = load_diagnostics(path)
        de = diag["delta_e"]
        if not np.isfinite(de).any():
            raise PlotInputError(
                f"{path}: delta_e column has no finite values "
                "(run without a Sinkhorn reference?)")
        ax.semilogy(diag["time"], de, marker=".",
                    label=f"{Path(path).name} ({run.label})")
    ax.set_xlabel("t")
    ax.set_ylabel("relative energy gap")
    ax.legend(fontsize=7)
    ax.grid(True, which="both", alpha=0.3)
    return fig


def _fig_bottleneck_bands(spec: PlotSpec):
    run = load_run(spec.inputs[0])
    if not run.snapshots:
        raise PlotInputError(f"{run.path}: run has no snapshots")
    final = run.snapshots[-1]
    colors = _species_colors(run.n)
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    _stacked_bands(ax, run, final, colors)
    mu = band_heights(final, run.nu_weights()).sum(axis=1)
    ax.plot(run.x_centers(), mu, color="black", linewidth=1.0,
            label="μ density")
    ax.set_ylabel("stacked density")
    ax.set_title(f"{run.label}, t = {final.time:g}")
    ax.legend(fontsize=8)
    return fig


_DISPATCH = {
    "trajectory_bands": _fig_trajectory_bands,
    "comparison_grid": _fig_comparison_grid,
    "final_vs_reference": _fig_final_vs_reference,
    "delta_e_curve": _fig_delta_e_curve,
    "bottleneck_bands": _fig_bottleneck_bands,
}
