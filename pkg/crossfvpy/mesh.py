from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import MeshError, MeshParseError, MeshValidationError
from .logging import log_json
from .state import StateField, check_admissible

logger = logging.getLogger(__name__)

FORMAT_TAG = "FVMESH"
FORMAT_VERSION = 1
DIAMOND_TOLERANCE = 1e-10
DOMAIN_TOLERANCE = 1e-12
QUADRATURE_SUBDIVISIONS = 4


def _frozen(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Mesh:
    """Admissible two-point-flux mesh.

    Interior edge ``e`` joins ``edge_cells[e] = (K, L)`` with the unit normal
    pointing from K to L. ``edge_center_distances[e] = (d(x_K, σ), d(x_L, σ))``.
    Derived quantities (``edge_distances``, ``transmissibilities``,
    ``diamond_measures``) are recomputed from the raw geometry and the
    invariants are validated on construction.
    """

    dimension: int
    centers: np.ndarray
    measures: np.ndarray
    edge_cells: np.ndarray
    edge_measures: np.ndarray
    edge_normals: np.ndarray
    edge_center_distances: np.ndarray
    boundary_cells: np.ndarray
    boundary_measures: np.ndarray
    boundary_distances: np.ndarray
    cell_bounds: np.ndarray | None = None
    domain_measure: float | None = None
    edge_distances: np.ndarray = field(init=False, repr=False)
    transmissibilities: np.ndarray = field(init=False, repr=False)
    diamond_measures: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.dimension not in (1, 2):
            raise MeshError(f"mesh dimension must be 1 or 2, got {self.dimension}")
        n_cells = len(self.measures)
        centers = np.asarray(self.centers, dtype=float).reshape(n_cells, 2)
        object.__setattr__(self, "centers", _frozen(centers))
        object.__setattr__(self, "measures", _frozen(self.measures))
        object.__setattr__(self, "edge_cells", _frozen(np.reshape(self.edge_cells, (-1, 2)), dtype=np.int64))
        object.__setattr__(self, "edge_measures", _frozen(self.edge_measures))
        object.__setattr__(self, "edge_normals", _frozen(np.reshape(self.edge_normals, (-1, 2))))
        object.__setattr__(
            self, "edge_center_distances", _frozen(np.reshape(self.edge_center_distances, (-1, 2)))
        )
        object.__setattr__(self, "boundary_cells", _frozen(self.boundary_cells, dtype=np.int64))
        object.__setattr__(self, "boundary_measures", _frozen(self.boundary_measures))
        object.__setattr__(self, "boundary_distances", _frozen(self.boundary_distances))
        if self.cell_bounds is not None:
            object.__setattr__(self, "cell_bounds", _frozen(np.reshape(self.cell_bounds, (n_cells, 4))))

        _validate_topology(self)
        left, right = self.edge_cells[:, 0], self.edge_cells[:, 1]
        offsets = self.centers[right] - self.centers[left]
        distances = np.hypot(offsets[:, 0], offsets[:, 1])
        object.__setattr__(self, "edge_distances", _frozen(distances))
        with np.errstate(divide="ignore", invalid="ignore"):
            object.__setattr__(self, "transmissibilities", _frozen(self.edge_measures / distances))
        diamonds = self.edge_measures * np.abs(np.einsum("ej,ej->e", offsets, self.edge_normals)) / 2.0
        object.__setattr__(self, "diamond_measures", _frozen(diamonds))
        _validate_geometry(self)

    @property
    def n_cells(self) -> int:
        return len(self.measures)

    @property
    def n_edges(self) -> int:
        return len(self.edge_measures)

    @property
    def n_boundary_edges(self) -> int:
        return len(self.boundary_measures)

    @property
    def total_measure(self) -> float:
        return float(np.sum(self.measures))

    @property
    def mesh_size(self) -> float:
        """Largest cell diameter; without cell bounds, twice the largest center-to-edge distance."""
        if self.cell_bounds is not None:
            widths = self.cell_bounds[:, 1] - self.cell_bounds[:, 0]
            heights = self.cell_bounds[:, 3] - self.cell_bounds[:, 2]
            return float(np.max(np.hypot(widths, heights)))
        candidates = [2.0 * self.edge_center_distances.ravel(), 2.0 * self.boundary_distances]
        return float(max(np.max(c) for c in candidates if c.size))


@dataclass(frozen=True)
class MeshRegularityReport:
    zeta: float
    offending_edge: int | None = None
    offending_kind: str | None = None


def _validate_topology(mesh: Mesh) -> None:
    n_cells = mesh.n_cells
    if n_cells == 0:
        raise MeshValidationError("mesh has at least one cell", kind="cell", index=0)
    for name, array, width in (
        ("edge_measures", mesh.edge_measures, None),
        ("edge_normals", mesh.edge_normals, 2),
        ("edge_center_distances", mesh.edge_center_distances, 2),
    ):
        if len(array) != len(mesh.edge_cells):
            raise MeshError(f"{name} has {len(array)} rows for {len(mesh.edge_cells)} interior edges")
    if not (len(mesh.boundary_cells) == len(mesh.boundary_measures) == len(mesh.boundary_distances)):
        raise MeshError("boundary edge arrays have inconsistent lengths")

    bad = np.flatnonzero(~(mesh.measures > 0))
    if bad.size:
        raise MeshValidationError(
            "positive cell measure", kind="cell", index=int(bad[0]), detail=f"m(K) = {mesh.measures[bad[0]]!r}"
        )
    bad = np.flatnonzero(~(mesh.edge_measures > 0))
    if bad.size:
        raise MeshValidationError(
            "positive edge measure", kind="edge", index=int(bad[0]), detail=f"m(σ) = {mesh.edge_measures[bad[0]]!r}"
        )
    bad = np.flatnonzero(~(mesh.boundary_measures > 0))
    if bad.size:
        raise MeshValidationError("positive edge measure", kind="boundary edge", index=int(bad[0]))
    bad = np.flatnonzero(~(mesh.boundary_distances > 0))
    if bad.size:
        raise MeshValidationError("positive center-to-edge distance", kind="boundary edge", index=int(bad[0]))

    cells = mesh.edge_cells
    bad = np.flatnonzero((cells < 0).any(axis=1) | (cells >= n_cells).any(axis=1) | (cells[:, 0] == cells[:, 1]))
    if bad.size:
        raise MeshValidationError(
            "edge joins two distinct existing cells", kind="edge", index=int(bad[0]), detail=f"cells {cells[bad[0]].tolist()}"
        )
    bad = np.flatnonzero((mesh.boundary_cells < 0) | (mesh.boundary_cells >= n_cells))
    if bad.size:
        raise MeshValidationError("boundary edge references an existing cell", kind="boundary edge", index=int(bad[0]))

    norms = np.hypot(mesh.edge_normals[:, 0], mesh.edge_normals[:, 1])
    bad = np.flatnonzero(np.abs(norms - 1.0) > DIAMOND_TOLERANCE)
    if bad.size:
        raise MeshValidationError("unit edge normal", kind="edge", index=int(bad[0]), detail=f"|ν| = {norms[bad[0]]!r}")
    bad = np.flatnonzero(~(mesh.edge_center_distances > 0).all(axis=1))
    if bad.size:
        raise MeshValidationError("positive center-to-edge distance", kind="edge", index=int(bad[0]))


def _validate_geometry(mesh: Mesh) -> None:
    d = mesh.edge_distances
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise MeshValidationError("distinct cell centers (d_σ > 0)", kind="edge", index=int(bad[0]))

    lhs = mesh.edge_measures * d
    rhs = 2.0 * mesh.diamond_measures
    bad = np.flatnonzero(np.abs(lhs - rhs) > DIAMOND_TOLERANCE * np.maximum(1.0, np.abs(lhs)))
    if bad.size:
        e = int(bad[0])
        raise MeshValidationError(
            "dual-diamond identity m(σ)·d(x_K,x_L) = 2·m(T_K,σ)",
            kind="edge",
            index=e,
            detail=f"{lhs[e]!r} != {rhs[e]!r}",
        )

    split = mesh.edge_center_distances.sum(axis=1)
    bad = np.flatnonzero(np.abs(split - d) > DIAMOND_TOLERANCE * np.maximum(1.0, d))
    if bad.size:
        e = int(bad[0])
        raise MeshValidationError(
            "d(x_K,σ) + d(x_L,σ) = d_σ", kind="edge", index=e, detail=f"{split[e]!r} != {d[e]!r}"
        )

    if mesh.domain_measure is not None:
        total = mesh.total_measure
        if abs(total - mesh.domain_measure) > DOMAIN_TOLERANCE * abs(mesh.domain_measure):
            raise MeshValidationError(
                "cell measures sum to the domain measure",
                kind="domain",
                index=0,
                detail=f"{total!r} != {mesh.domain_measure!r}",
            )


def build_interval_mesh(a: float, b: float, n_cells: int) -> Mesh:
    """Uniform mesh of (a, b); interior edges have unit measure."""
    if not a < b:
        raise MeshError(f"interval needs a < b, got a={a!r}, b={b!r}")
    if int(n_cells) != n_cells or n_cells < 2:
        raise MeshError(f"interval mesh needs at least 2 cells, got {n_cells!r}")
    n_cells = int(n_cells)
    width = (b - a) / n_cells
    nodes = a + width * np.arange(n_cells + 1)
    nodes[-1] = b
    centers = np.column_stack([a + width * (np.arange(n_cells) + 0.5), np.zeros(n_cells)])
    d = np.diff(centers[:, 0])
    return Mesh(
        dimension=1,
        centers=centers,
        measures=np.full(n_cells, width),
        edge_cells=np.column_stack([np.arange(n_cells - 1), np.arange(1, n_cells)]),
        edge_measures=np.ones(n_cells - 1),
        edge_normals=np.tile([1.0, 0.0], (n_cells - 1, 1)),
        edge_center_distances=np.column_stack([d / 2.0, d / 2.0]),
        boundary_cells=np.array([0, n_cells - 1]),
        boundary_measures=np.ones(2),
        boundary_distances=np.full(2, width / 2.0),
        cell_bounds=np.column_stack([nodes[:-1], nodes[1:], np.zeros(n_cells), np.zeros(n_cells)]),
        domain_measure=b - a,
    )


def build_rectangle_mesh(lx: float, ly: float, nx: int, ny: int) -> Mesh:
    """Structured mesh of (0, lx) x (0, ly); cell (i, j) has index j * nx + i."""
    if not (lx > 0 and ly > 0):
        raise MeshError(f"rectangle needs positive side lengths, got lx={lx!r}, ly={ly!r}")
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise MeshError(f"rectangle mesh needs nx, ny >= 2, got nx={nx!r}, ny={ny!r}")
    nx, ny = int(nx), int(ny)
    hx, hy = lx / nx, ly / ny
    xs = hx * (np.arange(nx) + 0.5)
    ys = hy * (np.arange(ny) + 0.5)
    cx, cy = np.meshgrid(xs, ys)
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    index = np.arange(nx * ny).reshape(ny, nx)

    x_left, x_right = index[:, :-1].ravel(), index[:, 1:].ravel()
    y_low, y_high = index[:-1, :].ravel(), index[1:, :].ravel()
    edge_cells = np.concatenate([np.column_stack([x_left, x_right]), np.column_stack([y_low, y_high])])
    edge_measures = np.concatenate([np.full(len(x_left), hy), np.full(len(y_low), hx)])
    edge_normals = np.concatenate([np.tile([1.0, 0.0], (len(x_left), 1)), np.tile([0.0, 1.0], (len(y_low), 1))])
    offsets = centers[edge_cells[:, 1]] - centers[edge_cells[:, 0]]
    d = np.hypot(offsets[:, 0], offsets[:, 1])

    bottom, top = index[0, :], index[-1, :]
    left, right = index[:, 0], index[:, -1]
    boundary_cells = np.concatenate([bottom, top, left, right])
    boundary_measures = np.concatenate([np.full(nx, hx), np.full(nx, hx), np.full(ny, hy), np.full(ny, hy)])
    boundary_distances = np.concatenate(
        [np.full(nx, hy / 2.0), np.full(nx, hy / 2.0), np.full(ny, hx / 2.0), np.full(ny, hx / 2.0)]
    )

    x_nodes = hx * np.arange(nx + 1)
    y_nodes = hy * np.arange(ny + 1)
    x_nodes[-1], y_nodes[-1] = lx, ly
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    ix, iy = ix.ravel(), iy.ravel()
    bounds = np.column_stack([x_nodes[ix], x_nodes[ix + 1], y_nodes[iy], y_nodes[iy + 1]])

    return Mesh(
        dimension=2,
        centers=centers,
        measures=np.full(nx * ny, hx * hy),
        edge_cells=edge_cells,
        edge_measures=edge_measures,
        edge_normals=edge_normals,
        edge_center_distances=np.column_stack([d / 2.0, d / 2.0]),
        boundary_cells=boundary_cells,
        boundary_measures=boundary_measures,
        boundary_distances=boundary_distances,
        cell_bounds=bounds,
        domain_measure=lx * ly,
    )


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def mesh_to_text(mesh: Mesh) -> str:
    lines = [
        f"{FORMAT_TAG} {FORMAT_VERSION} {mesh.dimension}",
        f"{mesh.n_cells} {mesh.n_edges} {mesh.n_boundary_edges}",
    ]
    for (x, y), m in zip(mesh.centers, mesh.measures):
        lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(m)}")
    # the split fields are written only where the edge does not bisect the center segment
    halves = mesh.edge_distances / 2.0
    for (k, l), m, (nu_x, nu_y), (d_k, d_l), half in zip(
        mesh.edge_cells, mesh.edge_measures, mesh.edge_normals, mesh.edge_center_distances, halves
    ):
        line = f"{k} {l} {_fmt(m)} {_fmt(nu_x)} {_fmt(nu_y)}"
        if not d_k == d_l == half:
            line += f" {_fmt(d_k)} {_fmt(d_l)}"
        lines.append(line)
    for k, m, d in zip(mesh.boundary_cells, mesh.boundary_measures, mesh.boundary_distances):
        lines.append(f"{k} {_fmt(m)} {_fmt(d)}")
    return "\n".join(lines) + "\n"


def save_mesh(mesh: Mesh, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(mesh_to_text(mesh), encoding="utf-8")
    return path


class _LineReader:
    def __init__(self, text: str) -> None:
        self._lines = [
            (number, line.split())
            for number, line in enumerate(text.splitlines(), start=1)
            if line.strip() and not line.lstrip().startswith("#")
        ]
        self._pos = 0
        self.last_line = 0

    def next(self, what: str) -> tuple[int, list[str]]:
        if self._pos >= len(self._lines):
            raise MeshParseError(f"unexpected end of file, expected {what}", line=self.last_line + 1)
        number, fields = self._lines[self._pos]
        self._pos += 1
        self.last_line = number
        return number, fields

    def remaining(self) -> int:
        return len(self._lines) - self._pos


def _numbers(fields: list[str], line: int, *, ints: int, floats: int, what: str) -> tuple[list[int], list[float]]:
    try:
        int_part = [int(f) for f in fields[:ints]]
    except ValueError as err:
        raise MeshParseError(f"{what}: expected integer index, got {fields[:ints]}", line=line) from err
    try:
        float_part = [float(f) for f in fields[ints : ints + floats]]
    except ValueError as err:
        raise MeshParseError(f"{what}: expected decimal numbers, got {fields[ints:]}", line=line) from err
    return int_part, float_part


def parse_mesh(text: str) -> Mesh:
    reader = _LineReader(text)
    line, header = reader.next("header")
    if len(header) != 3 or header[0] != FORMAT_TAG:
        raise MeshParseError(f"expected '{FORMAT_TAG} {FORMAT_VERSION} <dim>', got {' '.join(header)!r}", line=line)
    if header[1] != str(FORMAT_VERSION):
        raise MeshParseError(f"unsupported format version {header[1]!r}", line=line)
    if header[2] not in ("1", "2"):
        raise MeshParseError(f"dimension must be 1 or 2, got {header[2]!r}", line=line)
    dimension = int(header[2])

    line, counts = reader.next("counts")
    if len(counts) != 3:
        raise MeshParseError("expected '<n_cells> <n_interior_edges> <n_boundary_edges>'", line=line)
    (n_cells, n_edges, n_boundary), _ = _numbers(counts, line, ints=3, floats=0, what="counts")
    if min(n_cells, n_edges, n_boundary) < 0:
        raise MeshParseError("counts must be nonnegative", line=line)

    centers = np.empty((n_cells, 2))
    measures = np.empty(n_cells)
    for k in range(n_cells):
        line, fields = reader.next(f"cell {k}")
        if len(fields) != 3:
            raise MeshParseError(f"cell {k}: expected '<x> <y> <measure>'", line=line)
        _, (x, y, m) = _numbers(fields, line, ints=0, floats=3, what=f"cell {k}")
        centers[k] = (x, y)
        measures[k] = m

    edge_cells = np.empty((n_edges, 2), dtype=np.int64)
    edge_measures = np.empty(n_edges)
    edge_normals = np.empty((n_edges, 2))
    split = np.full((n_edges, 2), np.nan)
    for e in range(n_edges):
        line, fields = reader.next(f"interior edge {e}")
        if len(fields) not in (5, 7):
            raise MeshParseError(
                f"interior edge {e}: expected '<K> <L> <m_sigma> <nu_x> <nu_y> [<d_K_sigma> <d_L_sigma>]'", line=line
            )
        (k, l), values = _numbers(fields, line, ints=2, floats=len(fields) - 2, what=f"interior edge {e}")
        edge_cells[e] = (k, l)
        edge_measures[e] = values[0]
        edge_normals[e] = values[1:3]
        if len(values) == 5:
            split[e] = values[3:5]

    boundary_cells = np.empty(n_boundary, dtype=np.int64)
    boundary_measures = np.empty(n_boundary)
    boundary_distances = np.empty(n_boundary)
    for b in range(n_boundary):
        line, fields = reader.next(f"boundary edge {b}")
        if len(fields) != 3:
            raise MeshParseError(f"boundary edge {b}: expected '<K> <m_sigma> <d_sigma>'", line=line)
        (k,), (m, d) = _numbers(fields, line, ints=1, floats=2, what=f"boundary edge {b}")
        boundary_cells[b] = k
        boundary_measures[b] = m
        boundary_distances[b] = d

    if reader.remaining():
        line, _ = reader.next("end of file")
        raise MeshParseError("trailing content after the declared edges", line=line)

    missing = np.isnan(split[:, 0])
    if missing.any():
        valid = (edge_cells >= 0).all(axis=1) & (edge_cells < n_cells).all(axis=1)
        rows = np.flatnonzero(missing & valid)
        offsets = centers[edge_cells[rows, 1]] - centers[edge_cells[rows, 0]]
        half = np.hypot(offsets[:, 0], offsets[:, 1]) / 2.0
        split[rows] = np.column_stack([half, half])

    return Mesh(
        dimension=dimension,
        centers=centers,
        measures=measures,
        edge_cells=edge_cells,
        edge_measures=edge_measures,
        edge_normals=edge_normals,
        edge_center_distances=split,
        boundary_cells=boundary_cells,
        boundary_measures=boundary_measures,
        boundary_distances=boundary_distances,
    )


def load_mesh(path: str | Path) -> Mesh:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise MeshError(f"cannot read mesh file {path}: {err}") from err
    mesh = parse_mesh(text)
    log_json(
        logger,
        "mesh.load_mesh",
        "loaded mesh",
        level="debug",
        fields={"path": str(path), "n_cells": mesh.n_cells, "n_edges": mesh.n_edges},
    )
    return mesh


def regularity_zeta(mesh: Mesh, threshold: float | None = None) -> MeshRegularityReport:
    """Largest ζ with d(x_K, σ) >= ζ·d_σ over every cell/edge pair.

    Boundary edges contribute the ratio 1. When ``threshold`` is given and ζ
    falls below it, the report names the edge attaining the minimum.
    """
    # exterior edges measure d_σ from the center itself, ratio 1
    zeta, edge, kind = 1.0, 0, "boundary"
    if mesh.n_edges:
        ratios = (mesh.edge_center_distances / mesh.edge_distances[:, None]).min(axis=1)
        worst = int(np.argmin(ratios))
        if ratios[worst] < zeta:
            zeta, edge, kind = float(ratios[worst]), worst, "interior"
    if threshold is None or zeta >= threshold:
        return MeshRegularityReport(zeta=zeta)
    return MeshRegularityReport(zeta=zeta, offending_edge=edge, offending_kind=kind)


def _quadrature_points(mesh: Mesh, subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    bounds = mesh.cell_bounds
    offsets = (np.arange(subdivisions) + 0.5) / subdivisions
    xs = bounds[:, :1] + (bounds[:, 1:2] - bounds[:, :1]) * offsets
    if mesh.dimension == 1:
        return xs, np.zeros_like(xs)
    ys = bounds[:, 2:3] + (bounds[:, 3:4] - bounds[:, 2:3]) * offsets
    px = np.repeat(xs, subdivisions, axis=1)
    py = np.tile(ys, (1, subdivisions))
    return px, py


def cell_averages(
    field: Callable[[np.ndarray, np.ndarray], np.ndarray],
    mesh: Mesh,
    *,
    subdivisions: int = QUADRATURE_SUBDIVISIONS,
) -> StateField:
    """Midpoint-rule cell averages of ``field(x, y) -> (points, n)`` on a subdivided cell.

    Meshes loaded from file carry no cell bounds; the field is sampled at the
    cell centers instead.
    """
    if mesh.cell_bounds is None:
        log_json(
            logger,
            "mesh.cell_averages",
            "mesh has no cell bounds, sampling the field at cell centers",
            level="warning",
            fields={"n_cells": mesh.n_cells},
        )
        values = _evaluate(field, mesh.centers[:, 0], mesh.centers[:, 1])
    else:
        px, py = _quadrature_points(mesh, subdivisions)
        samples = _evaluate(field, px.ravel(), py.ravel())
        values = samples.reshape(mesh.n_cells, px.shape[1], -1).mean(axis=1)
    check_admissible(values, what="initial cell averages")
    return StateField(values, 0.0)


def _evaluate(field, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    values = np.asarray(field(x, y), dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != len(x):
        raise MeshError(f"field returned {values.shape[0]} rows for {len(x)} points")
    return values


def discrete_gradient(values: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Diamond-wise gradient (m(σ)/m(T_K,σ))·(v_L − v_K)·ν for each interior edge."""
    values = np.asarray(values, dtype=float)
    left, right = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
    jump = values[right] - values[left]
    scale = mesh.edge_measures / mesh.diamond_measures
    return (scale * jump)[:, None] * mesh.edge_normals


def edge_jumps(values: np.ndarray, mesh: Mesh) -> np.ndarray:
    """D_{K,σ} v = v_L − v_K on interior edges; works along the leading axis."""
    values = np.asarray(values, dtype=float)
    return values[mesh.edge_cells[:, 1]] - values[mesh.edge_cells[:, 0]]
