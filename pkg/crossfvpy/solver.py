from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from opentelemetry import trace
from scipy.sparse.linalg import splu

from .config import SolverConfig
from .diagnostics import discrete_entropy, entropy_dissipation, masses, relative_entropy
from .edge_means import EdgeState, compute_edge_state
from .errors import (
    ConfigError,
    DomainError,
    DtUnderflow,
    LinearSolveFailure,
    NewtonDiverged,
    SingularDenominatorError,
    SingularEdgeError,
)
from .logging import log_json
from .mesh import Mesh
from .models import Model
from .span import SpanAttrKeys, SpanOps, set_simulation_attrs
from .state import SUM_TOLERANCE, StateField, is_admissible

logger = logging.getLogger(__name__)

TRACER_NAME = "crossfv/solver"
FIXED_STEP_TOLERANCE = 1e-9
# pull towards the barycenter when u_old touches the boundary of D
INTERIOR_OFFSET = 1e-10
# share of a component kept when a Newton step would zero it
BOUNDARY_KEEP = 0.1

# evaluation failures that send the damping loop back to a shorter step
_EVALUATION_ERRORS = (DomainError, SingularDenominatorError, SingularEdgeError, FloatingPointError)

Observer = Callable[[StateField, "StepReport"], None]


@dataclass(frozen=True)
class StepReport:
    step: int
    t: float
    dt_used: float
    newton_iterations: int
    residual_norm: float
    rejected_attempts: int
    entropy: float
    relative_entropy: float | None
    dissipation: float
    masses: np.ndarray
    min_concentration: float
    max_sum: float
    max_edge_sum: float


@dataclass(frozen=True)
class NewtonResult:
    state: StateField
    iterations: int
    residual_norm: float


@dataclass
class SimulationResult:
    final: StateField
    reports: list[StepReport] = field(default_factory=list)

    @property
    def accepted_steps(self) -> int:
        return max(0, len(self.reports) - 1)


def _values(state: StateField | np.ndarray) -> np.ndarray:
    values = state.values if isinstance(state, StateField) else np.asarray(state, dtype=float)
    return values[:, None] if values.ndim == 1 else values


def edge_fluxes(
    u: StateField | np.ndarray,
    mesh: Mesh,
    model: Model,
    edge_state: EdgeState | None = None,
) -> np.ndarray:
    """F_{i,K,σ} = -τ_σ Σ_j A_ij,σ(u_σ) (u_{j,L} - u_{j,K}) seen from the left cell K."""
    values = _values(u)
    if edge_state is None:
        edge_state = compute_edge_state(mesh, values, model.entropy)
    if mesh.n_edges == 0:
        return np.zeros((0, values.shape[1]))
    diffusion = model.a_sigma(edge_state.means)
    jumps = values[mesh.edge_cells[:, 1]] - values[mesh.edge_cells[:, 0]]
    return -mesh.transmissibilities[:, None] * np.einsum("eij,ej->ei", diffusion, jumps)


def _residual(values_new: np.ndarray, values_old: np.ndarray, dt: float, mesh: Mesh, model: Model) -> np.ndarray:
    residual = mesh.measures[:, None] * (values_new - values_old) / dt
    flux = edge_fluxes(values_new, mesh, model)
    # the right cell receives exactly the negated flux
    np.add.at(residual, mesh.edge_cells[:, 0], flux)
    np.add.at(residual, mesh.edge_cells[:, 1], -flux)
    if model.has_source:
        residual -= mesh.measures[:, None] * model.rates(values_new)
    return residual


def assemble_residual(
    u_new: StateField | np.ndarray,
    u_old: StateField | np.ndarray,
    dt: float,
    mesh: Mesh,
    model: Model,
) -> np.ndarray:
    """Implicit Euler residual, unknown (i, K) at index K*n + i."""
    if not dt > 0:
        raise DomainError(f"time step must be positive, got {dt!r}")
    return _residual(_values(u_new), _values(u_old), dt, mesh, model).ravel()


@lru_cache(maxsize=16)
def _closed_neighbourhoods(mesh: Mesh) -> sp.csr_matrix:
    n = mesh.n_cells
    left, right = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
    rows = np.concatenate([np.arange(n), left, right])
    cols = np.concatenate([np.arange(n), right, left])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


@lru_cache(maxsize=16)
def _coloring(mesh: Mesh) -> np.ndarray:
    adjacency = _closed_neighbourhoods(mesh)
    reach = (adjacency @ adjacency).tocsr()
    colors = np.full(mesh.n_cells, -1, dtype=np.int64)
    for cell in range(mesh.n_cells):
        nearby = reach.indices[reach.indptr[cell] : reach.indptr[cell + 1]]
        taken = set(colors[nearby][colors[nearby] >= 0].tolist())
        color = 0
        while color in taken:
            color += 1
        colors[cell] = color
    colors.flags.writeable = False
    return colors


def distance2_coloring(mesh: Mesh) -> np.ndarray:
    """Greedy coloring where cells within two edges of each other differ."""
    return _coloring(mesh).copy()


def _increments(values: np.ndarray, step: float) -> np.ndarray:
    increment = np.maximum(step, step * np.abs(values))
    # flip to -h where +h would leave the closed simplex
    over = (values + increment > 1.0) | (values.sum(axis=1, keepdims=True) + increment > 1.0)
    return np.where(over, -increment, increment)


def assemble_jacobian(
    u_new: StateField | np.ndarray,
    u_old: StateField | np.ndarray,
    dt: float,
    mesh: Mesh,
    model: Model,
    *,
    fd_step: float = 1e-8,
    base_residual: np.ndarray | None = None,
) -> sp.csc_matrix:
    """Forward-difference Jacobian, one residual evaluation per color and species."""
    values = _values(u_new).copy()
    old = _values(u_old)
    n_cells, n = values.shape
    base = (
        _residual(values, old, dt, mesh, model)
        if base_residual is None
        else np.asarray(base_residual).reshape(n_cells, n)
    )
    increments = _increments(values, fd_step)
    colors = _coloring(mesh)
    pattern = _closed_neighbourhoods(mesh).tocoo()
    row_cells, col_cells = pattern.row, pattern.col

    rows, cols, entries = [], [], []
    for color in range(int(colors.max()) + 1 if n_cells else 0):
        members = np.flatnonzero(colors == color)
        hit = colors[col_cells] == color
        touched_rows, touched_cols = row_cells[hit], col_cells[hit]
        for j in range(n):
            perturbed = values.copy()
            perturbed[members, j] += increments[members, j]
            delta = _residual(perturbed, old, dt, mesh, model) - base
            column_step = increments[touched_cols, j]
            for i in range(n):
                rows.append(touched_rows * n + i)
                cols.append(touched_cols * n + j)
                entries.append(delta[touched_rows, i] / column_step)
    size = n_cells * n
    if not rows:
        return sp.csc_matrix((size, size))
    return sp.csc_matrix(
        (np.concatenate(entries), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )


def dense_jacobian(
    u_new: StateField | np.ndarray,
    u_old: StateField | np.ndarray,
    dt: float,
    mesh: Mesh,
    model: Model,
    *,
    fd_step: float = 1e-8,
) -> np.ndarray:
    """Column-by-column forward differences; the reference for the colored assembly."""
    values = _values(u_new).copy()
    old = _values(u_old)
    base = _residual(values, old, dt, mesh, model).ravel()
    increments = _increments(values, fd_step)
    n_cells, n = values.shape
    jacobian = np.zeros((n_cells * n, n_cells * n))
    for cell in range(n_cells):
        for j in range(n):
            perturbed = values.copy()
            perturbed[cell, j] += increments[cell, j]
            column = (_residual(perturbed, old, dt, mesh, model).ravel() - base) / increments[cell, j]
            jacobian[:, cell * n + j] = column
    return jacobian


@lru_cache(maxsize=16)
def _mirrored(mesh: Mesh) -> Mesh:
    return replace(
        mesh,
        edge_cells=mesh.edge_cells[:, ::-1],
        edge_normals=-mesh.edge_normals,
        edge_center_distances=mesh.edge_center_distances[:, ::-1],
    )


def flux_antisymmetry(u: StateField | np.ndarray, mesh: Mesh, model: Model) -> float:
    """max |F_{i,K,σ} + F_{i,L,σ}| with F_{i,L,σ} assembled from the right cell's side."""
    if mesh.n_edges == 0:
        return 0.0
    from_left = edge_fluxes(u, mesh, model)
    from_right = edge_fluxes(u, _mirrored(mesh), model)
    return float(np.max(np.abs(from_left + from_right)))


def _try_residual(values: np.ndarray, old: np.ndarray, dt: float, mesh: Mesh, model: Model) -> np.ndarray | None:
    if not is_admissible(values):
        return None
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            residual = _residual(values, old, dt, mesh, model)
    except _EVALUATION_ERRORS:
        return None
    if not np.all(np.isfinite(residual)):
        return None
    return residual


def _solve(jacobian: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
    try:
        update = splu(jacobian).solve(rhs)
    except RuntimeError as err:
        raise LinearSolveFailure(f"sparse factorization failed: {err}") from err
    if not np.all(np.isfinite(update)):
        raise LinearSolveFailure("Newton update is not finite")
    return update


def newton_solve(
    u_old: StateField,
    dt: float,
    mesh: Mesh,
    model: Model,
    config: SolverConfig,
) -> NewtonResult:
    """Damped Newton iteration for one implicit Euler step, started from u_old."""
    tracer = trace.get_tracer(TRACER_NAME)
    with tracer.start_as_current_span("solver.newton_solve") as span:
        ops = SpanOps(span).attrs({SpanAttrKeys.T: u_old.t, SpanAttrKeys.DT: dt})
        start = time.perf_counter()
        try:
            result = _newton(u_old, dt, mesh, model, config)
        except Exception as err:
            ops.error(err)
            raise
        ops.attrs(
            {
                SpanAttrKeys.NEWTON_ITERATIONS: result.iterations,
                SpanAttrKeys.RESIDUAL_NORM: result.residual_norm,
            }
        )
        ops.duration_ms((time.perf_counter() - start) * 1000).ok()
        return result


def _interior_start(values: np.ndarray) -> np.ndarray:
    """u_old itself when strictly inside D, else a point pulled towards the barycenter."""
    solvent = 1.0 - values.sum(axis=1)
    if np.min(values) > 0 and np.min(solvent) > 0:
        return values.copy()
    barycenter = 1.0 / (values.shape[1] + 1)
    return (1.0 - INTERIOR_OFFSET) * values + INTERIOR_OFFSET * barycenter


def _keep_positive(candidate: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cap a Newton candidate componentwise so species and solvent stay positive.

    A species the step would drive to zero or below keeps BOUNDARY_KEEP of its
    current value. A cell whose solvent would vanish has its increments scaled
    so the solvent keeps BOUNDARY_KEEP of its current value.
    """
    capped = np.where(candidate > 0, candidate, BOUNDARY_KEEP * values)
    step = capped - values
    gain = np.maximum(step, 0.0).sum(axis=1)
    loss = np.minimum(step, 0.0).sum(axis=1)
    solvent = 1.0 - values.sum(axis=1)
    over = (gain > 0) & (gain + loss >= solvent)
    scale = np.ones_like(gain)
    scale[over] = ((1.0 - BOUNDARY_KEEP) * solvent[over] - loss[over]) / gain[over]
    return values + np.where(step > 0, scale[:, None] * step, step)


def _newton(u_old: StateField, dt: float, mesh: Mesh, model: Model, config: SolverConfig) -> NewtonResult:
    old = u_old.values
    values = _interior_start(old)
    residual = _try_residual(values, old, dt, mesh, model)
    if residual is None:
        raise NewtonDiverged("residual cannot be evaluated at the starting iterate")
    norm = float(np.max(np.abs(residual))) if residual.size else 0.0

    for iteration in range(1, config.newton_max_iter + 1):
        try:
            jacobian = assemble_jacobian(
                values, old, dt, mesh, model, fd_step=config.fd_step, base_residual=residual
            )
        except _EVALUATION_ERRORS as err:
            raise NewtonDiverged(f"Jacobian evaluation failed at iteration {iteration}: {err}") from err
        update = _solve(jacobian, residual.ravel()).reshape(values.shape)

        damping = 1.0
        while True:
            candidate = _keep_positive(values - damping * update, values)
            candidate_residual = _try_residual(candidate, old, dt, mesh, model)
            if candidate_residual is not None:
                break
            damping *= 0.5
            if damping < config.damping_min:
                raise NewtonDiverged(
                    f"damping fell below {config.damping_min!r} at iteration {iteration} (residual {norm:.3e})"
                )
        values, residual = candidate, candidate_residual
        norm = float(np.max(np.abs(residual))) if residual.size else 0.0
        if norm <= config.newton_tol:
            return NewtonResult(state=StateField(values, u_old.t + dt), iterations=iteration, residual_norm=norm)

    raise NewtonDiverged(f"no convergence in {config.newton_max_iter} iterations (residual {norm:.3e})")


def step_report(
    state: StateField,
    mesh: Mesh,
    model: Model,
    *,
    step: int = 0,
    dt_used: float = 0.0,
    newton_iterations: int = 0,
    residual_norm: float = 0.0,
    rejected_attempts: int = 0,
    steady: Sequence[float] | np.ndarray | None = None,
) -> StepReport:
    values = state.values
    edge_state = compute_edge_state(mesh, values, model.entropy)
    try:
        dissipation = entropy_dissipation(values, edge_state, mesh, model.exponent_s)
    except SingularEdgeError:
        dissipation = math.inf
    return StepReport(
        step=step,
        t=state.t,
        dt_used=dt_used,
        newton_iterations=newton_iterations,
        residual_norm=residual_norm,
        rejected_attempts=rejected_attempts,
        entropy=discrete_entropy(values, mesh, model.entropy),
        relative_entropy=None if steady is None else relative_entropy(values, mesh, steady),
        dissipation=dissipation,
        masses=masses(values, mesh),
        min_concentration=float(np.min(values)),
        max_sum=float(np.max(values.sum(axis=1))),
        max_edge_sum=float(np.max(edge_state.mean_sums())) if edge_state.n_edges else 0.0,
    )


def _end_reached(t: float, t_end: float) -> bool:
    return t_end - t <= 1e-12 * max(1.0, abs(t_end))


def advance_adaptive(
    u: StateField,
    mesh: Mesh,
    model: Model,
    config: SolverConfig,
    t_end: float,
    *,
    steady: Sequence[float] | np.ndarray | None = None,
) -> Iterator[tuple[StateField, StepReport]]:
    """Accepted steps of the adaptive policy: grow by dt_grow, shrink by dt_shrink on failure."""
    tracer = trace.get_tracer(TRACER_NAME)
    state = u
    dt_prev: float | None = None
    step = 0
    while not _end_reached(state.t, t_end):
        dt = config.dt_initial if dt_prev is None else min(max(config.dt_grow * dt_prev, config.dt_min), config.dt_max)
        landing = state.t + dt >= t_end or _end_reached(state.t + dt, t_end)
        if landing:
            dt = t_end - state.t
        rejected = 0
        with tracer.start_as_current_span("solver.step") as span:
            ops = SpanOps(span)
            while True:
                try:
                    result = newton_solve(state, dt, mesh, model, config)
                    break
                except (NewtonDiverged, LinearSolveFailure) as err:
                    rejected += 1
                    shrunk = config.dt_shrink * dt
                    log_json(
                        logger,
                        "solver.advance_adaptive",
                        "step rejected, shrinking dt",
                        level="warning",
                        fields={"t": state.t, "dt": dt, "next_dt": shrunk, "reason": str(err)},
                    )
                    if shrunk < config.dt_min:
                        underflow = DtUnderflow(
                            f"time step {shrunk!r} below dt_min {config.dt_min!r} at t={state.t!r}"
                        )
                        ops.error(underflow)
                        raise underflow from err
                    dt, landing = shrunk, False

            step += 1
            t_new = t_end if landing else state.t + dt
            state = StateField(result.state.values, t_new)
            report = step_report(
                state,
                mesh,
                model,
                step=step,
                dt_used=dt,
                newton_iterations=result.iterations,
                residual_norm=result.residual_norm,
                rejected_attempts=rejected,
                steady=steady,
            )
            ops.attrs(
                {
                    SpanAttrKeys.T: t_new,
                    SpanAttrKeys.DT: dt,
                    SpanAttrKeys.NEWTON_ITERATIONS: result.iterations,
                    SpanAttrKeys.RESIDUAL_NORM: result.residual_norm,
                    SpanAttrKeys.REJECTED_ATTEMPTS: rejected,
                }
            ).ok()
        log_json(
            logger,
            "solver.advance_adaptive",
            "step accepted",
            level="debug",
            fields={"step": step, "t": t_new, "dt": dt, "newton_iterations": result.iterations},
        )
        dt_prev = dt
        yield state, report


def fixed_step_count(t_span: float, dt: float) -> int:
    ratio = t_span / dt
    count = round(ratio)
    if count < 0 or abs(ratio - count) > FIXED_STEP_TOLERANCE * max(1.0, ratio):
        raise ConfigError(f"fixed stepping needs t_end/dt to be an integer, got {ratio!r}")
    return int(count)


def advance_fixed(
    u: StateField,
    mesh: Mesh,
    model: Model,
    config: SolverConfig,
    t_end: float,
    *,
    steady: Sequence[float] | np.ndarray | None = None,
) -> Iterator[tuple[StateField, StepReport]]:
    dt = float(config.fixed_dt)
    n_steps = fixed_step_count(t_end - u.t, dt)
    t0, state = u.t, u
    for step in range(1, n_steps + 1):
        result = newton_solve(state, dt, mesh, model, config)
        t_new = t_end if step == n_steps else t0 + step * dt
        state = StateField(result.state.values, t_new)
        report = step_report(
            state,
            mesh,
            model,
            step=step,
            dt_used=dt,
            newton_iterations=result.iterations,
            residual_norm=result.residual_norm,
            steady=steady,
        )
        log_json(
            logger,
            "solver.advance_fixed",
            "step accepted",
            level="debug",
            fields={"step": step, "t": t_new, "newton_iterations": result.iterations},
        )
        yield state, report


def simulate(
    initial: StateField,
    mesh: Mesh,
    model: Model,
    config: SolverConfig,
    t_end: float,
    observers: Sequence[Observer] = (),
    *,
    steady: Sequence[float] | np.ndarray | None = None,
) -> SimulationResult:
    """Run fixed or adaptive stepping to t_end, notifying observers at t0 and after every step."""
    if initial.n_cells != mesh.n_cells or initial.n_species != model.n_species:
        raise ConfigError(
            f"initial state is {initial.n_cells}x{initial.n_species}, "
            f"mesh/model need {mesh.n_cells}x{model.n_species}"
        )
    if t_end < initial.t:
        raise ConfigError(f"t_end {t_end!r} lies before the initial time {initial.t!r}")
    tracer = trace.get_tracer(TRACER_NAME)
    with tracer.start_as_current_span("solver.simulate") as span:
        set_simulation_attrs(span, model=model.name, n_cells=mesh.n_cells, n_species=model.n_species)
        ops = SpanOps(span)
        start = time.perf_counter()
        report = step_report(initial, mesh, model, steady=steady)
        result = SimulationResult(final=initial, reports=[report])
        for observer in observers:
            observer(initial, report)

        stepping = advance_adaptive if config.adaptive else advance_fixed
        try:
            for state, report in stepping(initial, mesh, model, config, t_end, steady=steady):
                result.final = state
                result.reports.append(report)
                for observer in observers:
                    observer(state, report)
        except Exception as err:
            ops.error(err)
            log_json(
                logger,
                "solver.simulate",
                "simulation failed",
                level="error",
                fields={"model": model.name, "t": result.final.t, "error": str(err)},
            )
            raise
        duration_ms = (time.perf_counter() - start) * 1000
        ops.attrs({SpanAttrKeys.T: result.final.t}).duration_ms(duration_ms).ok()
        log_json(
            logger,
            "solver.simulate",
            "simulation finished",
            fields={
                "model": model.name,
                "t": result.final.t,
                "steps": report.step,
                "duration_ms": round(duration_ms, 3),
            },
        )
        return result


__all__ = [
    "NewtonResult",
    "SimulationResult",
    "StateField",
    "StepReport",
    "advance_adaptive",
    "advance_fixed",
    "assemble_jacobian",
    "assemble_residual",
    "dense_jacobian",
    "distance2_coloring",
    "edge_fluxes",
    "fixed_step_count",
    "flux_antisymmetry",
    "newton_solve",
    "simulate",
    "step_report",
    "SUM_TOLERANCE",
]
