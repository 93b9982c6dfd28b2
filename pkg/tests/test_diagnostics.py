from __future__ import annotations

import math

import numpy as np
import pytest

from crossfvpy.diagnostics import (
    check_nested,
    coarsen,
    convergence_orders,
    decay_fit,
    discrete_entropy,
    entropy_dissipation,
    entropy_inequality_gap,
    entropy_report,
    h1_norm,
    h1_seminorm,
    l1_error,
    l2_norm,
    masses,
    relative_entropy,
    source_entropy_sign,
    sqrt_dissipation,
    steady_state_distance,
    thin_film_steady_state,
)
from crossfvpy.edge_means import compute_edge_state
from crossfvpy.errors import DomainError, MeshMismatchError, NonNestedMeshError, SingularEdgeError
from crossfvpy.mesh import build_interval_mesh, build_rectangle_mesh, parse_mesh
from crossfvpy.models import Reaction, boltzmann_entropy, make_maxwell_stefan, make_tumor
from crossfvpy.state import StateField

MS = (1 / 0.168, 1 / 0.68, 1 / 0.883)


def test_masses_weight_by_cell_measure() -> None:
    mesh = build_interval_mesh(0.0, 2.0, 4)
    values = np.array([[0.1, 0.2], [0.3, 0.2], [0.5, 0.2], [0.7, 0.2]])

    np.testing.assert_allclose(masses(values, mesh), [0.5 * 1.6, 0.5 * 0.8])


def test_masses_reject_mismatched_state() -> None:
    with pytest.raises(MeshMismatchError):
        masses(np.zeros((3, 2)), build_interval_mesh(0.0, 1.0, 4))


def test_discrete_entropy_extends_to_the_boundary() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 2)
    state = StateField(np.array([[1.0, 0.0], [0.5, 0.5]]))

    value = discrete_entropy(state, mesh, boltzmann_entropy(2))

    # first cell: h(1) + 2 h(0) = 2; second: h(0) + 2 h(1/2)
    second = 1.0 + 2.0 * (0.5 * math.log(0.5) + 0.5)
    assert value == pytest.approx(0.5 * 2.0 + 0.5 * second)


def test_relative_entropy_vanishes_at_the_steady_state() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 3, 3)
    steady = np.array([0.2, 0.3])
    state = StateField(np.tile(steady, (mesh.n_cells, 1)))

    assert relative_entropy(state, mesh, steady) == 0.0
    perturbed = state.values.copy()
    perturbed[0] = [0.3, 0.2]
    assert relative_entropy(perturbed, mesh, steady) > 0.0


@pytest.mark.parametrize("steady", [[0.0, 0.3], [0.6, 0.4], [0.5]])
def test_relative_entropy_rejects_bad_steady_states(steady) -> None:
    mesh = build_interval_mesh(0.0, 1.0, 3)
    state = np.full((3, 2), 0.2)
    with pytest.raises((DomainError, MeshMismatchError)):
        relative_entropy(state, mesh, steady)


def test_dissipation_with_unit_exponent_is_the_h1_seminorm() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    values = np.array([[0.1, 0.3], [0.2, 0.3], [0.2, 0.1], [0.4, 0.1]])
    edges = compute_edge_state(mesh, values, boltzmann_entropy(2))

    dissipation = entropy_dissipation(values, edges, mesh, 1.0)

    expected = h1_seminorm(values[:, 0], mesh) ** 2 + h1_seminorm(values[:, 1], mesh) ** 2
    assert dissipation == pytest.approx(expected)


def test_dissipation_with_half_exponent_divides_by_edge_means() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 2)
    values = np.array([[0.2, 0.1], [0.4, 0.1]])
    edges = compute_edge_state(mesh, values, boltzmann_entropy(2))

    dissipation = entropy_dissipation(values, edges, mesh, 0.5)

    mean = (0.4 - 0.2) / math.log(2.0)
    assert dissipation == pytest.approx(2.0 * 0.2**2 / mean)


def test_dissipation_singular_edges() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 3)
    values = np.array([[0.0, 0.2], [0.3, 0.2], [0.3, 0.2]])
    edges = compute_edge_state(mesh, values, boltzmann_entropy(2))

    with pytest.raises(SingularEdgeError) as exc:
        entropy_dissipation(values, edges, mesh, 0.5)
    assert exc.value.edges == (0,)

    report = entropy_report(values, mesh, make_maxwell_stefan(*MS))
    assert report.dissipation == math.inf
    assert report.relative_entropy is None


def test_entropy_report_with_unit_exponent_model() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 3)
    values = np.array([[0.0, 0.2], [0.3, 0.2], [0.3, 0.2]])

    report = entropy_report(values, mesh, make_tumor(1.0, 1.0), steady=[0.2, 0.2])

    assert math.isfinite(report.dissipation)
    assert report.relative_entropy is not None


def test_sqrt_dissipation_and_norms() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 2)
    values = np.array([[0.25, 0.04], [0.09, 0.04]])

    assert sqrt_dissipation(values, mesh) == pytest.approx(2.0 * (0.3 - 0.5) ** 2)
    assert h1_seminorm(values[:, 0], mesh) == pytest.approx(math.sqrt(2.0) * 0.16)
    assert l2_norm(values[:, 0], mesh) == pytest.approx(math.sqrt(0.5 * (0.25**2 + 0.09**2)))
    assert h1_norm(values[:, 0], mesh) == pytest.approx(
        math.hypot(l2_norm(values[:, 0], mesh), h1_seminorm(values[:, 0], mesh))
    )


def test_entropy_inequality_gap() -> None:
    assert entropy_inequality_gap(2.0, 1.5, 10.0, 0.5, 0.1) == pytest.approx(0.0)
    assert entropy_inequality_gap(2.0, 1.9, 10.0, 0.5, 0.1) < 0.0


def test_coarsen_averages_nested_interval_cells() -> None:
    fine = build_interval_mesh(0.0, 1.0, 8)
    coarse = build_interval_mesh(0.0, 1.0, 4)
    values = np.column_stack([np.arange(8) / 10.0, np.full(8, 0.1)])

    result = coarsen(StateField(values, 0.5), fine, coarse)

    np.testing.assert_allclose(result.values[:, 0], [0.05, 0.25, 0.45, 0.65])
    np.testing.assert_allclose(result.values[:, 1], 0.1)
    assert result.t == 0.5
    np.testing.assert_allclose(masses(result, coarse), masses(values, fine))


def test_coarsen_rectangle() -> None:
    fine = build_rectangle_mesh(1.0, 1.0, 4, 4)
    coarse = build_rectangle_mesh(1.0, 1.0, 2, 2)
    values = np.column_stack([fine.centers[:, 0] * 0.5, fine.centers[:, 1] * 0.2])

    result = coarsen(values, fine, coarse)

    np.testing.assert_allclose(result.values, np.column_stack([coarse.centers[:, 0] * 0.5, coarse.centers[:, 1] * 0.2]))


@pytest.mark.parametrize("coarse_cells", [3, 5])
def test_non_nested_meshes_are_rejected(coarse_cells: int) -> None:
    fine = build_interval_mesh(0.0, 1.0, 8)
    coarse = build_interval_mesh(0.0, 1.0, coarse_cells)

    with pytest.raises(NonNestedMeshError):
        check_nested(fine, coarse)


def test_meshes_without_bounds_cannot_be_coarsened() -> None:
    text = "FVMESH 1 1\n2 1 2\n0.25 0 0.5\n0.75 0 0.5\n0 1 1 1 0\n0 1 0.25\n1 1 0.25\n"
    mesh = parse_mesh(text)

    with pytest.raises(NonNestedMeshError):
        check_nested(mesh, build_interval_mesh(0.0, 1.0, 2))


def test_l1_error_and_steady_distance() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    a = np.full((4, 2), 0.2)
    b = a.copy()
    b[1] = [0.4, 0.1]

    error = l1_error(a, b, mesh)

    np.testing.assert_allclose(error.per_species, [0.05, 0.025])
    assert error.total == pytest.approx(0.075)
    assert steady_state_distance(b, mesh, [0.2, 0.2]) == pytest.approx(0.075)
    with pytest.raises(MeshMismatchError):
        l1_error(a, b[:, :1], mesh)


def test_convergence_orders() -> None:
    errors = [(1 / 40, 4e-3), (1 / 80, 2e-3), (1 / 160, 0.5e-3)]

    np.testing.assert_allclose(convergence_orders(errors), [1.0, 2.0])


@pytest.mark.parametrize(
    "errors",
    [[(0.1, 1e-3)], [(0.1, 1e-3), (0.2, 1e-4)], [(0.1, 1e-3), (0.05, 0.0)]],
)
def test_convergence_orders_reject_bad_input(errors) -> None:
    with pytest.raises(DomainError):
        convergence_orders(errors)


def test_decay_fit_recovers_exponential_rate() -> None:
    t = np.linspace(0.0, 10.0, 41)
    series = list(zip(t, 3.0 * np.exp(-0.7 * t)))

    fit = decay_fit(series)

    assert fit.rate == pytest.approx(0.7)
    assert fit.intercept == pytest.approx(math.log(3.0))
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.window == (5.0, 10.0)
    assert fit.n_points == 21


def test_decay_fit_needs_positive_points() -> None:
    with pytest.raises(DomainError):
        decay_fit([(0.0, 1.0), (1.0, 0.5)])
    with pytest.raises(DomainError):
        decay_fit([(0.0, 1.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], window=(0.0, 3.0))


def test_thin_film_steady_state_solves_the_reaction_balance() -> None:
    steady = thin_film_steady_state()
    u1, u2 = steady
    u0 = 1.0 - u1 - u2

    assert 2 * u1 + u2 == pytest.approx(2 * 9 / 44 + 2 / 11)
    assert abs(Reaction(1000.0).r1(steady)) <= 1e-12
    assert math.log(u1 * u0) - 2 * math.log(u2) == pytest.approx(-math.log(1000.0))
    assert min(u0, u1, u2) > 0


@pytest.mark.parametrize("rate", [1.0, 4.0, 50.0])
def test_thin_film_steady_state_other_rates(rate: float) -> None:
    steady = thin_film_steady_state(0.3, 0.2, rate)

    assert abs(Reaction(rate).r1(steady)) <= 1e-12
    assert 2 * steady[0] + steady[1] == pytest.approx(0.8)


def test_source_production_is_never_positive() -> None:
    rng = np.random.default_rng(4)
    full = 0.01 + 0.97 * rng.dirichlet(np.ones(3), size=500)
    steady = thin_film_steady_state()

    production = source_entropy_sign(full[:, 1:], steady)

    assert np.all(production <= 1e-12 * (1.0 + np.abs(Reaction(1000.0).r1(full[:, 1:]))))
    assert source_entropy_sign(steady, steady)[0] == pytest.approx(0.0, abs=1e-12)
