from __future__ import annotations

import logging

import numpy as np
import pytest

from crossfvpy.errors import MeshError, MeshParseError, MeshValidationError, RangeError
from crossfvpy.mesh import (
    Mesh,
    build_interval_mesh,
    build_rectangle_mesh,
    cell_averages,
    discrete_gradient,
    edge_jumps,
    load_mesh,
    mesh_to_text,
    parse_mesh,
    regularity_zeta,
    save_mesh,
)

TWO_CELLS = """\
# two unit cells side by side
FVMESH 1 2
2 1 6
0.5 0.5 1
1.5 0.5 1

0 1 1 1 0
0 1 0.5
0 1 0.5
0 1 0.5
1 1 0.5
1 1 0.5
1 1 0.5
"""


def test_interval_mesh_geometry() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)

    assert mesh.dimension == 1
    assert mesh.n_cells == 4
    assert mesh.n_edges == 3
    assert mesh.n_boundary_edges == 2
    np.testing.assert_allclose(mesh.centers[:, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(mesh.measures, 0.25)
    np.testing.assert_allclose(mesh.transmissibilities, 4.0)
    np.testing.assert_allclose(mesh.boundary_distances, 0.125)
    assert mesh.total_measure == pytest.approx(1.0)
    assert mesh.mesh_size == pytest.approx(0.25)


def test_rectangle_mesh_layout() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 3, 2)

    assert mesh.n_cells == 6
    # x-edges first: (nx - 1) * ny, then y-edges: nx * (ny - 1)
    assert mesh.n_edges == 4 + 3
    assert mesh.n_boundary_edges == 2 * 3 + 2 * 2
    assert mesh.edge_cells[0].tolist() == [0, 1]
    assert mesh.edge_cells[4].tolist() == [0, 3]
    np.testing.assert_allclose(mesh.centers[4], [0.5, 0.75])
    np.testing.assert_allclose(mesh.transmissibilities[:4], 0.5 / (1 / 3))
    np.testing.assert_allclose(mesh.transmissibilities[4:], (1 / 3) / 0.5)
    assert mesh.boundary_cells[:3].tolist() == [0, 1, 2]


@pytest.mark.parametrize("mesh", [build_interval_mesh(-1.0, 2.0, 7), build_rectangle_mesh(2.0, 1.0, 5, 3)])
def test_dual_diamond_identity_and_edge_split(mesh: Mesh) -> None:
    np.testing.assert_allclose(mesh.edge_measures * mesh.edge_distances, 2.0 * mesh.diamond_measures)
    np.testing.assert_allclose(mesh.edge_center_distances.sum(axis=1), mesh.edge_distances)
    assert mesh.total_measure == pytest.approx(mesh.domain_measure)


@pytest.mark.parametrize(
    "args",
    [(1.0, 0.0, 4), (0.0, 1.0, 1), (0.0, 1.0, 2.5)],
)
def test_interval_mesh_rejects_bad_arguments(args) -> None:
    with pytest.raises(MeshError):
        build_interval_mesh(*args)


def test_rectangle_mesh_rejects_bad_arguments() -> None:
    with pytest.raises(MeshError):
        build_rectangle_mesh(1.0, -1.0, 4, 4)
    with pytest.raises(MeshError):
        build_rectangle_mesh(1.0, 1.0, 1, 4)


def test_domain_measure_mismatch_is_reported() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    with pytest.raises(MeshValidationError) as exc:
        Mesh(
            dimension=1,
            centers=mesh.centers,
            measures=mesh.measures,
            edge_cells=mesh.edge_cells,
            edge_measures=mesh.edge_measures,
            edge_normals=mesh.edge_normals,
            edge_center_distances=mesh.edge_center_distances,
            boundary_cells=mesh.boundary_cells,
            boundary_measures=mesh.boundary_measures,
            boundary_distances=mesh.boundary_distances,
            domain_measure=2.0,
        )
    assert exc.value.kind == "domain"


def test_parse_mesh_skips_comments_and_bisects_missing_split() -> None:
    mesh = parse_mesh(TWO_CELLS)

    assert mesh.n_cells == 2
    assert mesh.n_edges == 1
    np.testing.assert_allclose(mesh.edge_center_distances, [[0.5, 0.5]])
    assert mesh.transmissibilities[0] == pytest.approx(1.0)
    assert mesh.cell_bounds is None


def test_saved_mesh_loads_back_identically(tmp_path) -> None:
    mesh = build_rectangle_mesh(1.0, 0.7, 4, 3)
    path = save_mesh(mesh, tmp_path / "rect.fvmesh")

    loaded = load_mesh(path)

    np.testing.assert_array_equal(loaded.centers, mesh.centers)
    np.testing.assert_array_equal(loaded.edge_cells, mesh.edge_cells)
    np.testing.assert_array_equal(loaded.transmissibilities, mesh.transmissibilities)
    np.testing.assert_array_equal(loaded.edge_center_distances, mesh.edge_center_distances)
    assert mesh_to_text(loaded) == mesh_to_text(mesh)


def test_writer_adds_the_split_only_off_the_bisection() -> None:
    base = build_interval_mesh(0.0, 1.0, 4)
    split = base.edge_center_distances.copy()
    split[1] = (0.1, 0.15)
    shifted = Mesh(
        dimension=1,
        centers=base.centers,
        measures=base.measures,
        edge_cells=base.edge_cells,
        edge_measures=base.edge_measures,
        edge_normals=base.edge_normals,
        edge_center_distances=split,
        boundary_cells=base.boundary_cells,
        boundary_measures=base.boundary_measures,
        boundary_distances=base.boundary_distances,
    )

    edge_lines = mesh_to_text(shifted).splitlines()[2 + base.n_cells : 2 + base.n_cells + base.n_edges]

    assert [len(line.split()) for line in edge_lines] == [5, 7, 5]
    assert all(len(line.split()) == 5 for line in mesh_to_text(base).splitlines()[6:9])
    np.testing.assert_array_equal(parse_mesh(mesh_to_text(shifted)).edge_center_distances, split)


@pytest.mark.parametrize(
    "text,line",
    [
        ("MESH 1 2\n", 1),
        ("FVMESH 2 2\n", 1),
        ("FVMESH 1 3\n", 1),
        ("FVMESH 1 2\n1 0 0\n0.5 0.5 x\n", 3),
        ("FVMESH 1 2\n2 1 0\n0.5 0.5 1\n1.5 0.5 1\n0 1 1 1\n", 5),
        ("FVMESH 1 2\n1 0 0\n0.5 0.5 1\n0 1 0.5\n", 4),
        ("# header comment\n\nFVMESH 1 2\n2 0 0\n0.5 0.5 1\n", 6),
    ],
)
def test_parse_mesh_reports_line_numbers(text: str, line: int) -> None:
    with pytest.raises(MeshParseError) as exc:
        parse_mesh(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_non_orthogonal_edge_violates_diamond_identity() -> None:
    text = TWO_CELLS.replace("1.5 0.5 1", "1.5 1.0 1")
    with pytest.raises(MeshValidationError) as exc:
        parse_mesh(text)
    assert exc.value.kind == "edge"
    assert exc.value.index == 0
    assert "dual-diamond" in exc.value.invariant


def test_non_unit_normal_is_rejected() -> None:
    with pytest.raises(MeshValidationError) as exc:
        parse_mesh(TWO_CELLS.replace("0 1 1 1 0", "0 1 1 2 0"))
    assert exc.value.invariant == "unit edge normal"


def test_load_mesh_missing_file(tmp_path) -> None:
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "missing.fvmesh")


def test_regularity_zeta_uniform_mesh() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)

    report = regularity_zeta(mesh)
    assert report.zeta == pytest.approx(0.5)
    assert report.offending_edge is None

    strict = regularity_zeta(mesh, threshold=0.6)
    assert strict.offending_edge == 0
    assert strict.offending_kind == "interior"


def test_cell_averages_are_exact_for_linear_fields() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)

    state = cell_averages(lambda x, y: np.stack([0.2 * x, 0.1 + 0.3 * y], axis=-1), mesh)

    np.testing.assert_allclose(state.values[:, 0], 0.2 * mesh.centers[:, 0])
    np.testing.assert_allclose(state.values[:, 1], 0.1 + 0.3 * mesh.centers[:, 1])
    assert state.t == 0.0


def test_cell_averages_split_discontinuities_by_area() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 3)

    state = cell_averages(lambda x, y: np.where(x < 0.5, 0.8, 0.0), mesh)

    np.testing.assert_allclose(state.values[:, 0], [0.8, 0.4, 0.0])


def test_cell_averages_without_bounds_sample_centers(caplog) -> None:
    mesh = parse_mesh(TWO_CELLS)

    with caplog.at_level(logging.WARNING, logger="crossfvpy.mesh"):
        state = cell_averages(lambda x, y: 0.1 * x, mesh)

    np.testing.assert_allclose(state.values[:, 0], [0.05, 0.15])
    assert "no cell bounds" in caplog.text


def test_cell_averages_reject_inadmissible_data() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    with pytest.raises(RangeError):
        cell_averages(lambda x, y: np.stack([np.full_like(x, 0.7), np.full_like(x, 0.6)], axis=-1), mesh)


def test_discrete_gradient_lies_along_normals() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
    values = mesh.centers[:, 0] + 2.0 * mesh.centers[:, 1]

    gradient = discrete_gradient(values, mesh)
    jumps = edge_jumps(values, mesh)

    expected = (mesh.edge_measures / mesh.diamond_measures * jumps)[:, None] * mesh.edge_normals
    np.testing.assert_allclose(gradient, expected)
    # x-edges see only the x-slope, y-edges only the y-slope
    np.testing.assert_allclose(gradient[:6, 1], 0.0)
    np.testing.assert_allclose(gradient[6:, 0], 0.0)
    assert np.all(gradient[6:, 1] > gradient[:6, 0])
