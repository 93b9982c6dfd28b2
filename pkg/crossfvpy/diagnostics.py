from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import xlogy

from .edge_means import EdgeState, compute_edge_state
from .errors import DomainError, MeshMismatchError, NonNestedMeshError, SingularEdgeError
from .mesh import Mesh, edge_jumps
from .models import EntropySpec, Model, thin_film_reaction
from .state import StateField

NESTING_TOLERANCE = 1e-10


@dataclass(frozen=True)
class EntropyReport:
    entropy: float
    dissipation: float
    relative_entropy: float | None = None


@dataclass(frozen=True)
class L1Error:
    per_species: np.ndarray
    total: float


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple[float, float]
    n_points: int


def _values(state: StateField | np.ndarray) -> np.ndarray:
    values = state.values if isinstance(state, StateField) else np.asarray(state, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def _full(state: StateField | np.ndarray) -> np.ndarray:
    if isinstance(state, StateField):
        return state.full()
    values = _values(state)
    return np.concatenate([1.0 - values.sum(axis=1, keepdims=True), values], axis=1)


def _check_mesh(values: np.ndarray, mesh: Mesh) -> None:
    if values.shape[0] != mesh.n_cells:
        raise MeshMismatchError(f"state has {values.shape[0]} cells, mesh has {mesh.n_cells}")


def masses(state: StateField | np.ndarray, mesh: Mesh) -> np.ndarray:
    values = _values(state)
    _check_mesh(values, mesh)
    return mesh.measures @ values


def discrete_entropy(state: StateField | np.ndarray, mesh: Mesh, entropy: EntropySpec) -> float:
    """ℋ[u] = Σ_K m(K) h(u_K), with h continuous up to the boundary of the simplex."""
    full = _full(state)
    _check_mesh(full, mesh)
    return float(mesh.measures @ entropy.density(np.maximum(full, 0.0)))


def _steady_full(steady: Sequence[float] | np.ndarray) -> np.ndarray:
    steady = np.asarray(steady, dtype=float).ravel()
    full = np.concatenate([[1.0 - steady.sum()], steady])
    if np.any(full <= 0) or np.any(full >= 1):
        raise DomainError(f"steady state must lie strictly inside the simplex, got {full.tolist()}")
    return full


def relative_entropy(state: StateField | np.ndarray, mesh: Mesh, steady: Sequence[float] | np.ndarray) -> float:
    """Σ_{i=0}^n Σ_K m(K) (u log(u/u∞) + u∞ - u)."""
    reference = _steady_full(steady)
    full = np.maximum(_full(state), 0.0)
    _check_mesh(full, mesh)
    if full.shape[1] != reference.size:
        raise MeshMismatchError(f"steady state has {reference.size - 1} species, state has {full.shape[1] - 1}")
    density = xlogy(full, full / reference) + reference - full
    return max(0.0, float(mesh.measures @ density.sum(axis=1)))


def entropy_dissipation(
    state: StateField | np.ndarray,
    edge_state: EdgeState,
    mesh: Mesh,
    exponent_s: float,
) -> float:
    """Σ_i Σ_σ τ_σ u_{i,σ}^{2(s-1)} (D_σ u_i)², without the c_A·Δt factor."""
    values = _values(state)
    _check_mesh(values, mesh)
    jumps = edge_jumps(values, mesh)
    squared = mesh.transmissibilities[:, None] * jumps**2
    if exponent_s == 1.0:
        return float(np.sum(squared))
    means = edge_state.means[:, 1:]
    singular = (means <= 0) & (jumps != 0)
    if np.any(singular):
        edges = np.flatnonzero(singular.any(axis=1))
        raise SingularEdgeError(
            f"dissipation weight is singular on {edges.size} edge(s) with zero mean and nonzero jump",
            edges=edges[:16],
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(means > 0, means ** (2.0 * (exponent_s - 1.0)), 0.0)
    return float(np.sum(squared * weight))


def sqrt_dissipation(state: StateField | np.ndarray, mesh: Mesh) -> float:
    """Σ_i Σ_σ τ_σ (D_σ √u_i)²."""
    values = np.sqrt(np.maximum(_values(state), 0.0))
    _check_mesh(values, mesh)
    jumps = edge_jumps(values, mesh)
    return float(np.sum(mesh.transmissibilities[:, None] * jumps**2))


def entropy_inequality_gap(
    entropy_prev: float, entropy_new: float, dissipation: float, c_a: float, dt: float
) -> float:
    """ℋ_prev - ℋ_new - c_A Δt D; nonnegative when the step dissipates as required."""
    return float(entropy_prev - entropy_new - c_a * dt * dissipation)


def h1_seminorm(values: np.ndarray, mesh: Mesh) -> float:
    values = np.asarray(values, dtype=float)
    jumps = edge_jumps(values, mesh)
    return math.sqrt(float(mesh.transmissibilities @ jumps**2))


def l2_norm(values: np.ndarray, mesh: Mesh) -> float:
    values = np.asarray(values, dtype=float)
    return math.sqrt(float(mesh.measures @ values**2))


def h1_norm(values: np.ndarray, mesh: Mesh) -> float:
    return math.hypot(l2_norm(values, mesh), h1_seminorm(values, mesh))


def entropy_report(
    state: StateField | np.ndarray,
    mesh: Mesh,
    model: Model,
    *,
    edge_state: EdgeState | None = None,
    steady: Sequence[float] | np.ndarray | None = None,
) -> EntropyReport:
    """Entropy, dissipation and optional relative entropy; a singular dissipation reports inf."""
    if edge_state is None:
        edge_state = compute_edge_state(mesh, state, model.entropy)
    try:
        dissipation = entropy_dissipation(state, edge_state, mesh, model.exponent_s)
    except SingularEdgeError:
        dissipation = math.inf
    return EntropyReport(
        entropy=discrete_entropy(state, mesh, model.entropy),
        dissipation=dissipation,
        relative_entropy=None if steady is None else relative_entropy(state, mesh, steady),
    )


def _grid_lines(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate([lower, upper]))


def _parents(fine_mesh: Mesh, coarse_mesh: Mesh) -> np.ndarray:
    if fine_mesh.cell_bounds is None or coarse_mesh.cell_bounds is None:
        raise NonNestedMeshError("coarsening needs structured meshes with cell bounds")
    if fine_mesh.dimension != coarse_mesh.dimension:
        raise NonNestedMeshError("fine and coarse meshes have different dimensions")
    fine, coarse = fine_mesh.cell_bounds, coarse_mesh.cell_bounds
    x_lines = _grid_lines(coarse[:, 0], coarse[:, 1])
    y_lines = _grid_lines(coarse[:, 2], coarse[:, 3])
    lookup = np.full((max(len(y_lines) - 1, 1), len(x_lines) - 1), -1, dtype=np.int64)
    cx = np.searchsorted(x_lines, coarse[:, 0])
    cy = np.searchsorted(y_lines, coarse[:, 2]) if len(y_lines) > 1 else np.zeros(len(coarse), dtype=np.int64)
    lookup[cy, cx] = np.arange(len(coarse))

    fx = np.clip(np.searchsorted(x_lines, fine_mesh.centers[:, 0], side="right") - 1, 0, len(x_lines) - 2)
    if len(y_lines) > 1:
        fy = np.clip(np.searchsorted(y_lines, fine_mesh.centers[:, 1], side="right") - 1, 0, len(y_lines) - 2)
    else:
        fy = np.zeros(len(fine), dtype=np.int64)
    parents = lookup[fy, fx]
    if np.any(parents < 0):
        raise NonNestedMeshError("fine cell centers fall outside the coarse mesh")

    scale = max(1.0, float(np.max(np.abs(coarse))))
    host = coarse[parents]
    slack = NESTING_TOLERANCE * scale
    inside = (
        (fine[:, 0] >= host[:, 0] - slack)
        & (fine[:, 1] <= host[:, 1] + slack)
        & (fine[:, 2] >= host[:, 2] - slack)
        & (fine[:, 3] <= host[:, 3] + slack)
    )
    if not np.all(inside):
        k = int(np.flatnonzero(~inside)[0])
        raise NonNestedMeshError(f"fine cell {k} straddles a coarse cell boundary")
    covered = np.bincount(parents, weights=fine_mesh.measures, minlength=coarse_mesh.n_cells)
    if np.any(np.abs(covered - coarse_mesh.measures) > NESTING_TOLERANCE * coarse_mesh.measures):
        raise NonNestedMeshError("fine cells do not tile the coarse cells")
    return parents


def check_nested(fine_mesh: Mesh, coarse_mesh: Mesh) -> None:
    """Raise NonNestedMeshError unless every fine cell lies inside one coarse cell."""
    _parents(fine_mesh, coarse_mesh)


def coarsen(fine_state: StateField | np.ndarray, fine_mesh: Mesh, coarse_mesh: Mesh) -> StateField:
    """Measure-weighted average of fine values over each coarse cell of a nested mesh."""
    values = _values(fine_state)
    _check_mesh(values, fine_mesh)
    parents = _parents(fine_mesh, coarse_mesh)
    weights = np.bincount(parents, weights=fine_mesh.measures, minlength=coarse_mesh.n_cells)
    sums = np.zeros((coarse_mesh.n_cells, values.shape[1]))
    np.add.at(sums, parents, fine_mesh.measures[:, None] * values)
    t = fine_state.t if isinstance(fine_state, StateField) else 0.0
    return StateField(sums / weights[:, None], t)


def l1_error(a: StateField | np.ndarray, b: StateField | np.ndarray, mesh: Mesh) -> L1Error:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise MeshMismatchError(f"states have shapes {va.shape} and {vb.shape}")
    _check_mesh(va, mesh)
    per_species = mesh.measures @ np.abs(va - vb)
    return L1Error(per_species=per_species, total=float(np.sum(per_species)))


def steady_state_distance(state: StateField | np.ndarray, mesh: Mesh, steady: Sequence[float] | np.ndarray) -> float:
    """Σ_i ‖u_i - u_i^∞‖_{L¹}."""
    values = _values(state)
    _check_mesh(values, mesh)
    return float(np.sum(mesh.measures @ np.abs(values - np.asarray(steady, dtype=float))))


def convergence_orders(errors: Sequence[tuple[float, float]]) -> list[float]:
    """log(e_j / e_{j+1}) / log(h_j / h_{j+1}) for consecutive (h, e) pairs."""
    if len(errors) < 2:
        raise DomainError("convergence orders need at least two (mesh size, error) pairs")
    sizes = np.array([h for h, _ in errors], dtype=float)
    values = np.array([e for _, e in errors], dtype=float)
    if np.any(values <= 0):
        raise DomainError("convergence orders need positive errors")
    if np.any(sizes <= 0) or np.any(np.diff(sizes) >= 0):
        raise DomainError("mesh sizes must be positive and strictly decreasing")
    return [float(o) for o in np.log(values[:-1] / values[1:]) / np.log(sizes[:-1] / sizes[1:])]


def decay_fit(
    series: Sequence[tuple[float, float]],
    window: tuple[float, float] | None = None,
) -> DecayFit:
    """Least-squares fit of log ℋ against t; the rate is minus the slope.

    The default window is the second half of the time span.
    """
    data = np.asarray(series, dtype=float).reshape(-1, 2)
    if len(data) == 0:
        raise DomainError("decay fit needs a nonempty series")
    t, values = data[:, 0], data[:, 1]
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    start, end = window
    mask = (t >= start) & (t <= end)
    if np.count_nonzero(mask) < 3:
        raise DomainError(f"decay fit needs at least 3 points in window [{start!r}, {end!r}]")
    if np.any(values[mask] <= 0):
        raise DomainError("decay fit needs positive relative entropies in the window")
    x, y = t[mask], np.log(values[mask])
    fit = stats.linregress(x, y)
    residual = y - (fit.intercept + fit.slope * x)
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if total == 0 else 1.0 - float(np.sum(residual**2)) / total
    return DecayFit(
        rate=-float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=r_squared,
        window=(float(start), float(end)),
        n_points=int(np.count_nonzero(mask)),
    )


def thin_film_steady_state(mean1: float = 9 / 44, mean2: float = 2 / 11, rate: float = 1000.0) -> np.ndarray:
    """Homogeneous steady state of the reaction (r_1, -2 r_1) with conserved 2u_1 + u_2.

    With u_1 = mean1 - α, u_2 = mean2 + 2α, u_0 = c - α (c = 1 - mean1 - mean2),
    r_1 = 0 is the quadratic (4 - rate) α² + (4 mean2 + rate (mean1 + c)) α + mean2² - rate mean1 c.
    """
    c = 1.0 - mean1 - mean2
    if min(mean1, mean2, c) < 0:
        raise DomainError(f"species means must lie in the simplex, got {(mean1, mean2)}")
    qa = 4.0 - rate
    qb = 4.0 * mean2 + rate * (mean1 + c)
    qc = mean2**2 - rate * mean1 * c
    if qa == 0:
        roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0:
            raise DomainError("steady-state quadratic has no real root")
        q = -0.5 * (qb + math.copysign(math.sqrt(disc), qb))
        roots = [q / qa, qc / q] if q != 0 else [0.0]
    low, high = -0.5 * mean2, min(mean1, c)
    admissible = [r for r in roots if low - 1e-15 <= r <= high + 1e-15]
    if not admissible:
        raise DomainError("no nonnegative steady state for these means")
    alpha = min(admissible, key=lambda r: abs(r - 0.5 * (low + high)))
    return np.array([mean1 - alpha, mean2 + 2.0 * alpha])


def source_entropy_sign(u: np.ndarray, steady: Sequence[float] | np.ndarray, rate: float = 1000.0) -> np.ndarray:
    """Relative-entropy production Σ_i f_i (log(u_i/u_i^∞) - log(u_0/u_0^∞)) of the reaction.

    Equals r_1(u) log(rate u_1 u_0 / u_2²) at the steady state of the same rate; never positive.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    reference = _steady_full(steady)
    full = np.concatenate([1.0 - u.sum(axis=1, keepdims=True), u], axis=1)
    if np.any(full <= 0):
        raise DomainError("source entropy production needs interior states")
    logs = np.log(full / reference)
    f = thin_film_reaction(rate)(u)
    return np.sum(f * (logs[:, 1:] - logs[:, :1]), axis=1)
