from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from opentelemetry import trace

from .config import (
    ConvergenceSpec,
    DecaySpec,
    InitialSpec,
    MeshSpec,
    ModelSpec,
    RunConfig,
    SolverConfig,
    parse_config_bool,
    parse_floats,
    parse_table,
)
from .diagnostics import (
    DecayFit,
    L1Error,
    check_nested,
    coarsen,
    convergence_orders,
    decay_fit,
    l1_error,
    masses,
    relative_entropy,
    thin_film_steady_state,
)
from .errors import ConfigError, DomainError
from .logging import log_json
from .mesh import Mesh, build_interval_mesh, build_rectangle_mesh, cell_averages, load_mesh
from .models import (
    Model,
    Reaction,
    make_maxwell_stefan,
    make_thin_film,
    make_tumor,
    make_two_species_euler_limit,
    thin_film_reaction,
)
from .solver import simulate
from .span import SpanOps
from .state import StateField

logger = logging.getLogger(__name__)

TRACER_NAME = "crossfv/experiments"

MAXWELL_STEFAN_DEFAULTS = {"d0": 1 / 0.168, "d1": 1 / 0.68, "d2": 1 / 0.883}
THIN_FILM_DEFAULT_TABLE = ((0.0, 1.0, 0.1), (1.0, 0.0, 0.0), (0.1, 0.0, 0.0))
TESTCASE2_MEANS = (9 / 44, 2 / 11)
FULL_SCALE_REFERENCE = 5120
FULL_SCALE_LADDER = (40, 80, 160, 320, 640, 1280)
# relative entropies at or below this count as already at equilibrium
RELATIVE_ENTROPY_FLOOR = 1e-14


# -- models -------------------------------------------------------------------


def _param(params: Mapping[str, str], key: str, default: float) -> float:
    raw = params.get(key)
    if raw is None:
        return float(default)
    try:
        return float(raw)
    except ValueError as err:
        raise ConfigError(f"model.{key}: expected a number, got {raw!r}") from err


def build_model(spec: ModelSpec) -> Model:
    params = spec.params
    if spec.name == "maxwell_stefan":
        return make_maxwell_stefan(*(_param(params, k, v) for k, v in MAXWELL_STEFAN_DEFAULTS.items()))
    if spec.name == "thin_film":
        table = parse_table(params["a"], "model.a") if "a" in params else THIN_FILM_DEFAULT_TABLE
        source = None
        if parse_config_bool(params.get("reaction", "true"), "model.reaction"):
            source = thin_film_reaction(_param(params, "reaction_rate", 1000.0))
        return make_thin_film(table, source=source)
    if spec.name == "tumor":
        return make_tumor(_param(params, "beta", 1.0), _param(params, "theta", 1.0), _param(params, "delta", 0.0))
    if spec.name == "two_species":
        return make_two_species_euler_limit()
    raise ConfigError(
        f"model.name must be maxwell_stefan, thin_film, tumor or two_species, got {spec.name!r}"
    )


def build_mesh(spec: MeshSpec) -> Mesh:
    if spec.kind == "interval":
        return build_interval_mesh(spec.a, spec.b, spec.n_cells)
    if spec.kind == "rectangle":
        return build_rectangle_mesh(spec.lx, spec.ly, spec.nx, spec.ny)
    return load_mesh(spec.path)


# -- initial data -------------------------------------------------------------


def _require_species(model: Model, n: int, preset: str) -> None:
    if model.n_species != n:
        raise ConfigError(f"initial preset {preset!r} needs {n} species, model {model.name!r} has {model.n_species}")


def testcase1_initial(mesh: Mesh) -> StateField:
    """u_1 = 0.8 on x < 0.5 and 0 beyond, u_2 = 0.2."""

    def field_(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.stack([np.where(x < 0.5, 0.8, 0.0), np.full_like(x, 0.2)], axis=-1)

    return cell_averages(field_, mesh)


def testcase2_initial(mesh: Mesh) -> StateField:
    """u_1 = 9/11 on the lower-left quarter, u_2 = 8/11 on the upper-right quarter."""
    mean1, mean2 = TESTCASE2_MEANS

    def field_(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        lower_left = (x < 0.5) & (y < 0.5)
        upper_right = (x >= 0.5) & (y >= 0.5)
        return np.stack([np.where(lower_left, mean1 / 0.25, 0.0), np.where(upper_right, mean2 / 0.25, 0.0)], axis=-1)

    return cell_averages(field_, mesh)


def constant_initial(mesh: Mesh, values: Sequence[float]) -> StateField:
    row = np.asarray(values, dtype=float)
    return cell_averages(lambda x, y: np.broadcast_to(row, (len(x), row.size)), mesh)


def blocks_initial(mesh: Mesh, background: Sequence[float], blocks: Sequence) -> StateField:
    """Piecewise-constant data; later blocks overwrite earlier ones on overlaps."""
    base = np.asarray(background, dtype=float)

    def field_(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(base, (len(x), base.size)).copy()
        for block in blocks:
            inside = (x >= block.x0) & (x < block.x1) & (y >= block.y0) & (y < block.y1)
            out[inside] = block.values
        return out

    return cell_averages(field_, mesh)


def reaction_steady_state(model: Model, means: Sequence[float] = TESTCASE2_MEANS) -> np.ndarray:
    if not isinstance(model.source, Reaction) or model.n_species != 2:
        raise ConfigError(f"model {model.name!r} has no reaction steady state")
    return thin_film_steady_state(means[0], means[1], model.source.rate)


def build_initial(spec: InitialSpec, mesh: Mesh, model: Model) -> StateField:
    if spec.preset == "testcase1":
        _require_species(model, 2, spec.preset)
        return testcase1_initial(mesh)
    if spec.preset == "testcase2":
        _require_species(model, 2, spec.preset)
        return testcase2_initial(mesh)
    if spec.preset == "steady":
        return constant_initial(mesh, reaction_steady_state(model))
    if spec.preset == "constant":
        _require_species(model, len(spec.values), spec.preset)
        return constant_initial(mesh, spec.values)
    _require_species(model, len(spec.background), spec.preset)
    return blocks_initial(mesh, spec.background, spec.blocks)


def resolve_steady(setting: str, model: Model, initial: StateField, mesh: Mesh) -> np.ndarray | None:
    """Steady state for the relative entropy: ``none``, explicit values, or ``auto``.

    ``auto`` uses the reaction equilibrium with the initial means for reaction
    models and the mean state otherwise, or nothing when that is not interior.
    """
    setting = setting.strip().lower()
    if setting == "none":
        return None
    means = masses(initial, mesh) / mesh.total_measure
    if setting == "auto":
        if isinstance(model.source, Reaction) and model.n_species == 2:
            return thin_film_steady_state(means[0], means[1], model.source.rate)
        if model.has_source:
            return None
        interior = np.all(means > 0) and means.sum() < 1
        return means if interior else None
    values = np.asarray(parse_floats(setting, "diagnostics.steady"))
    if values.size != model.n_species:
        raise ConfigError(f"diagnostics.steady needs {model.n_species} values, got {values.size}")
    return values


# -- convergence study ----------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    n_cells: int
    h: float
    error: L1Error


@dataclass
class ConvergenceStudy:
    reference: int
    dt: float
    rows: list[ConvergenceRow] = field(default_factory=list)
    orders: list[float] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)


def _solver_kwargs(config: SolverConfig) -> dict[str, Any]:
    return {
        "newton_tol": config.newton_tol,
        "newton_max_iter": config.newton_max_iter,
        "damping_min": config.damping_min,
        "fd_step": config.fd_step,
    }


def run_convergence_case(
    model_name: str,
    model_params: dict[str, str],
    preset: str,
    values: tuple[float, ...],
    a: float,
    b: float,
    n_cells: int,
    t_end: float,
    dt: float,
    solver_kwargs: dict[str, Any],
) -> np.ndarray:
    """One fixed-step run on a uniform interval mesh; returns the final cell values.

    Takes primitive arguments only so it can run in a worker process.
    """
    model = build_model(ModelSpec(name=model_name, params=model_params))
    mesh = build_interval_mesh(a, b, n_cells)
    initial = build_initial(InitialSpec(preset=preset, values=values), mesh, model)
    config = SolverConfig(adaptive=False, fixed_dt=dt, **solver_kwargs)
    return np.array(simulate(initial, mesh, model, config, t_end).final.values)


def convergence_plan(spec: ConvergenceSpec, *, full_scale: bool = False) -> tuple[int, tuple[int, ...], list[str]]:
    """Reference resolution, ascending ladder and header comments."""
    if full_scale or spec.full_scale:
        reference, ladder = FULL_SCALE_REFERENCE, FULL_SCALE_LADDER
        comments = [f"full-scale run: reference {reference} cells, ladder {' '.join(map(str, ladder))}"]
    else:
        reference, ladder = spec.reference, tuple(sorted(spec.ladder))
        comments = [
            f"desk-scale run: reference {reference} cells, ladder {' '.join(map(str, ladder))}",
            f"deviation: the full-size study uses reference {FULL_SCALE_REFERENCE} cells "
            f"and ladder {' '.join(map(str, FULL_SCALE_LADDER))} (--full-scale)",
        ]
    if len(ladder) < 2 or len(set(ladder)) != len(ladder):
        raise ConfigError("convergence.ladder needs at least two distinct resolutions")
    if ladder[0] < 1 or ladder[-1] >= reference:
        raise ConfigError(f"convergence.ladder must lie strictly between 0 and the reference {reference}")
    return reference, ladder, comments


def run_convergence_study(
    config: RunConfig,
    *,
    workers: int = 1,
    full_scale: bool = False,
) -> ConvergenceStudy:
    """Fixed dt = (1/N_ref)² on every resolution; errors against the coarsened reference."""
    if config.mesh.kind != "interval":
        raise ConfigError("the convergence study runs on an interval mesh")
    if config.initial.preset not in ("testcase1", "constant"):
        raise ConfigError("the convergence study supports the testcase1 and constant presets")
    spec = config.convergence
    reference, ladder, comments = convergence_plan(spec, full_scale=full_scale)
    a, b = config.mesh.a, config.mesh.b
    reference_mesh = build_interval_mesh(a, b, reference)
    meshes = [build_interval_mesh(a, b, n) for n in ladder]
    for mesh in meshes:
        check_nested(reference_mesh, mesh)

    dt = (1.0 / reference) ** 2
    comments.append(f"dt {dt!r} on every resolution, t_end {spec.t_end!r}")
    common = (
        config.model.name,
        dict(config.model.params),
        config.initial.preset,
        tuple(config.initial.values),
        a,
        b,
    )
    tail = (spec.t_end, dt, _solver_kwargs(config.solver))
    resolutions = (reference, *ladder)

    tracer = trace.get_tracer(TRACER_NAME)
    with tracer.start_as_current_span("experiments.run_convergence_study") as span:
        ops = SpanOps(span).attrs({"convergence.reference": reference, "convergence.workers": workers})
        start = time.perf_counter()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_convergence_case, *common, n, *tail) for n in resolutions]
                results = [f.result() for f in futures]
        else:
            results = [run_convergence_case(*common, n, *tail) for n in resolutions]

        reference_state = StateField(results[0], spec.t_end)
        study = ConvergenceStudy(reference=reference, dt=dt, comments=comments)
        for n, mesh, values in zip(ladder, meshes, results[1:]):
            error = l1_error(StateField(values, spec.t_end), coarsen(reference_state, reference_mesh, mesh), mesh)
            study.rows.append(ConvergenceRow(n_cells=n, h=mesh.mesh_size, error=error))
            log_json(
                logger,
                "experiments.run_convergence_study",
                "resolution finished",
                fields={"n_cells": n, "err_L1_total": error.total},
            )
        study.orders = convergence_orders([(row.h, row.error.total) for row in study.rows])
        ops.duration_ms((time.perf_counter() - start) * 1000).ok()
    return study


# -- decay study --------------------------------------------------------------


@dataclass
class DecayStudy:
    steady: np.ndarray
    fit: DecayFit | None
    series: list[tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def initial_relative_entropy(self) -> float:
        return self.series[0][2]

    @property
    def final_relative_entropy(self) -> float:
        return self.series[-1][2]

    def mass_drift(self) -> float:
        """Largest relative change of 2·mass(u_1) + mass(u_2) over the run."""
        combination = np.array([row[3] for row in self.series])
        return float(np.max(np.abs(combination - combination[0])) / max(abs(combination[0]), 1e-300))


def run_decay_study(config: RunConfig, spec: DecaySpec | None = None) -> DecayStudy:
    """Reaction thin-film system on the unit square; relative entropy per accepted step."""
    spec = spec or config.decay
    model = build_model(config.model)
    if not isinstance(model.source, Reaction) or model.name != "thin_film":
        raise ConfigError("the decay study needs model.name = thin_film with the reaction source")
    mesh = build_rectangle_mesh(1.0, 1.0, spec.nx, spec.ny)
    initial_spec = replace(config.initial, preset=spec.initial)
    initial = build_initial(initial_spec, mesh, model)
    steady = resolve_steady("auto", model, initial, mesh)

    series: list[tuple[int, float, float, float]] = []

    def record(state: StateField, report) -> None:
        total = masses(state, mesh)
        series.append((report.step, state.t, relative_entropy(state, mesh, steady), 2.0 * total[0] + total[1]))

    simulate(initial, mesh, model, config.solver, spec.t_end, observers=[record], steady=steady)

    start = spec.window_start if spec.window_start is not None else 0.5 * spec.t_end
    end = spec.window_end if spec.window_end is not None else spec.t_end
    fit: DecayFit | None = None
    try:
        if series[0][2] <= RELATIVE_ENTROPY_FLOOR:
            raise DomainError(f"initial relative entropy {series[0][2]!r} is already at equilibrium")
        fit = decay_fit([(t, rel) for _, t, rel, _ in series], window=(start, end))
    except DomainError as err:
        log_json(
            logger,
            "experiments.run_decay_study",
            "decay fit skipped",
            level="warning",
            fields={"reason": str(err)},
        )
    return DecayStudy(steady=steady, fit=fit, series=series)
