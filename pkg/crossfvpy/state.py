from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RangeError

SUM_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class StateField:
    """Per-cell species fractions u_K (shape (n_cells, n)); the solvent is derived."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValueError(f"state values must be (n_cells, n_species), got shape {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "t", float(self.t))

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_species(self) -> int:
        return self.values.shape[1]

    @property
    def solvent(self) -> np.ndarray:
        return solvent_fraction(self.values)

    def with_values(self, values: np.ndarray, t: float | None = None) -> StateField:
        return StateField(values, self.t if t is None else t)

    def species(self, i: int) -> np.ndarray:
        return self.values[:, i - 1]

    def full(self) -> np.ndarray:
        """(n_cells, n + 1) array with the solvent in column 0."""
        return np.concatenate([self.solvent[:, None], self.values], axis=1)


def solvent_fraction(values: np.ndarray, *, tolerance: float = SUM_TOLERANCE) -> np.ndarray:
    """u_0 = 1 - sum u_i, with round-off excursions below zero clipped."""
    u0 = 1.0 - np.sum(values, axis=-1)
    return np.where((u0 < 0) & (u0 >= -tolerance), 0.0, u0)


def is_admissible(values: np.ndarray, *, tolerance: float = SUM_TOLERANCE) -> bool:
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        return False
    if np.any(values < 0) or np.any(values > 1):
        return False
    return bool(np.all(np.sum(values, axis=-1) <= 1.0 + tolerance))


def check_admissible(values: np.ndarray, *, what: str = "state", tolerance: float = SUM_TOLERANCE) -> None:
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise RangeError(f"{what} contains non-finite values")
    low = np.argwhere(values < 0)
    if low.size:
        cell, species = low[0]
        raise RangeError(f"{what}: u_{species + 1} = {values[cell, species]!r} < 0 in cell {cell}")
    high = np.argwhere(values > 1)
    if high.size:
        cell, species = high[0]
        raise RangeError(f"{what}: u_{species + 1} = {values[cell, species]!r} > 1 in cell {cell}")
    sums = np.sum(values, axis=-1)
    over = np.flatnonzero(sums > 1.0 + tolerance)
    if over.size:
        raise RangeError(f"{what}: sum of species {sums[over[0]]!r} exceeds 1 in cell {over[0]}")


__all__ = ["StateField", "check_admissible", "is_admissible", "solvent_fraction", "SUM_TOLERANCE"]
