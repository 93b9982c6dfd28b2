from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .diagnostics import DecayFit, L1Error
from .logging import log_json
from .mesh import Mesh
from .state import StateField

logger = logging.getLogger(__name__)

SERIES_FILE = "series.csv"
CONVERGENCE_FILE = "convergence.csv"
DECAY_FILE = "decay.csv"


def format_float(value: float | None) -> str:
    """17 significant digits; empty for missing values."""
    if value is None:
        return ""
    return format(float(value), ".17g")


def _cell(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format_float(value)


def series_columns(n_species: int) -> list[str]:
    return [
        "step",
        "t",
        "dt",
        "newton_iters",
        "rejected",
        "entropy",
        "rel_entropy",
        "dissipation",
        *(f"mass_{i}" for i in range(1, n_species + 1)),
        "min_u",
        "max_sum_u",
    ]


def snapshot_columns(n_species: int) -> list[str]:
    return ["cell", "x", "y", *(f"u_{i}" for i in range(1, n_species + 1))]


def snapshot_name(step: int) -> str:
    return f"snapshot_{step}.csv"


class SeriesWriter:
    """Observer that appends one ``series.csv`` row per report and flushes it."""

    def __init__(self, path: str | Path, n_species: int) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.n_species = n_species
        self.rows = 0
        self._handle = self.path.open("w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(series_columns(n_species))

    def __call__(self, state: StateField, report) -> None:
        row = [
            _cell(report.step),
            format_float(report.t),
            format_float(report.dt_used),
            _cell(report.newton_iterations),
            _cell(report.rejected_attempts),
            format_float(report.entropy),
            format_float(report.relative_entropy),
            format_float(report.dissipation),
            *(format_float(m) for m in report.masses),
            format_float(report.min_concentration),
            format_float(report.max_sum),
        ]
        self._writer.writerow(row)
        self._handle.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> SeriesWriter:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def write_snapshot(path: str | Path, state: StateField, mesh: Mesh) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(snapshot_columns(state.n_species))
        for cell in range(state.n_cells):
            x, y = mesh.centers[cell]
            writer.writerow([str(cell), format_float(x), format_float(y), *map(format_float, state.values[cell])])
    return path


class SnapshotWriter:
    """Observer writing ``snapshot_<step>.csv`` every ``every`` accepted steps; 0 disables it."""

    def __init__(self, directory: str | Path, mesh: Mesh, every: int) -> None:
        self.directory = Path(directory)
        self.mesh = mesh
        self.every = max(0, int(every))
        self.written: list[Path] = []

    def __call__(self, state: StateField, report) -> None:
        if self.every == 0 or report.step % self.every != 0:
            return
        self.write(state, report.step)

    def write(self, state: StateField, step: int) -> Path:
        path = self.directory / snapshot_name(step)
        if path not in self.written:
            write_snapshot(path, state, self.mesh)
            self.written.append(path)
        return path


def _write_comment_block(handle, comments: Iterable[str]) -> None:
    for comment in comments:
        handle.write(f"# {comment}\n")


def write_convergence(
    path: str | Path,
    rows: Sequence[tuple[int, float, L1Error]],
    orders: Sequence[float],
    *,
    comments: Iterable[str] = (),
) -> Path:
    """One row per ladder rung; the order column is empty on the coarsest rung."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_species = len(rows[0][2].per_species) if rows else 0
    columns = [
        "n_cells",
        "h",
        "err_L1_total",
        *(f"err_L1_{i}" for i in range(1, n_species + 1)),
        "observed_order",
    ]
    with path.open("w", encoding="utf-8", newline="") as handle:
        _write_comment_block(handle, comments)
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for k, (n_cells, h, error) in enumerate(rows):
            order = orders[k - 1] if k > 0 else None
            writer.writerow(
                [
                    str(n_cells),
                    format_float(h),
                    format_float(error.total),
                    *map(format_float, error.per_species),
                    format_float(order),
                ]
            )
    log_json(logger, "output.write_convergence", "wrote convergence table", fields={"path": str(path), "rows": len(rows)})
    return path


def write_decay(
    path: str | Path,
    fit: DecayFit | None,
    series: Sequence[tuple[int, float, float, float]],
) -> Path:
    """Fit summary as comment lines, then (step, t, rel_entropy, mass_combination).

    A missing fit leaves the summary values empty.
    """
    path = Path(path)
    rate, intercept, r_squared = (None, None, None) if fit is None else (fit.rate, fit.intercept, fit.r_squared)
    window = ("", "") if fit is None else (format_float(fit.window[0]), format_float(fit.window[1]))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        _write_comment_block(
            handle,
            [
                f"decay_rate {format_float(rate)}",
                f"intercept {format_float(intercept)}",
                f"r_squared {format_float(r_squared)}",
                f"window {window[0]} {window[1]}",
            ],
        )
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "t", "rel_entropy", "mass_combination"])
        for step, t, rel, mass in series:
            writer.writerow([str(step), format_float(t), format_float(rel), format_float(mass)])
    log_json(logger, "output.write_decay", "wrote decay table", fields={"path": str(path), "rows": len(series)})
    return path


def read_comment_values(path: str | Path) -> dict[str, list[str]]:
    """Leading ``# key v1 v2`` lines of a table, keyed by the first word."""
    values: dict[str, list[str]] = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            parts = line[1:].split()
            if parts:
                values[parts[0]] = parts[1:]
    return values


def read_table(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        lines = (line for line in handle if not line.startswith("#"))
        return list(csv.DictReader(lines))
