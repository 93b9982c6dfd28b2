from __future__ import annotations

import numpy as np
import pytest

from crossfvpy import experiments
from crossfvpy.config import Block, ConvergenceSpec, DecaySpec, InitialSpec, MeshSpec, ModelSpec, RunConfig
from crossfvpy.diagnostics import masses, thin_film_steady_state
from crossfvpy.errors import ConfigError, MeshError, ModelError
from crossfvpy.experiments import (
    FULL_SCALE_LADDER,
    FULL_SCALE_REFERENCE,
    TESTCASE2_MEANS,
    blocks_initial,
    build_initial,
    build_mesh,
    build_model,
    convergence_plan,
    reaction_steady_state,
    resolve_steady,
    run_convergence_case,
    run_convergence_study,
    run_decay_study,
)
from crossfvpy.mesh import build_interval_mesh, build_rectangle_mesh, save_mesh
from crossfvpy.models import Reaction

CONVERGENCE_CONFIG = """\
[model]
name = maxwell_stefan

[mesh]
kind = interval
n_cells = 10

[initial]
preset = testcase1

[convergence]
reference = 40
ladder = 20, 5, 10
t_end = 1.25e-3
"""

DECAY_CONFIG = """\
[model]
name = thin_film

[decay]
nx = 4
ny = 4
t_end = 0.05
"""


def test_build_model_defaults() -> None:
    ms = build_model(ModelSpec("maxwell_stefan"))
    film = build_model(ModelSpec("thin_film"))
    tumor = build_model(ModelSpec("tumor"))

    assert ms.params["d0"] == pytest.approx(1 / 0.168)
    assert isinstance(film.source, Reaction)
    assert film.source.rate == 1000.0
    assert film.params["a"] == [[0.0, 1.0, 0.1], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]]
    assert tumor.params == {"beta": 1.0, "theta": 1.0, "delta": 0.0}
    assert build_model(ModelSpec("two_species")).n_species == 2


def test_build_model_reads_string_parameters() -> None:
    film = build_model(ModelSpec("thin_film", {"a": "0 2; 2 0", "reaction": "false"}))
    ms = build_model(ModelSpec("maxwell_stefan", {"d0": "2", "d1": "3"}))

    assert film.n_species == 1
    assert not film.has_source
    assert ms.params["d0"] == 2.0
    assert ms.params["d2"] == pytest.approx(1 / 0.883)


@pytest.mark.parametrize(
    "spec,error",
    [
        (ModelSpec("navier_stokes"), ConfigError),
        (ModelSpec("maxwell_stefan", {"d0": "fast"}), ConfigError),
        (ModelSpec("thin_film", {"reaction": "maybe"}), ConfigError),
        (ModelSpec("thin_film", {"a": "0 1; 1"}), ConfigError),
        (ModelSpec("tumor", {"beta": "1", "theta": "4"}), ModelError),
    ],
)
def test_build_model_rejects_bad_specs(spec: ModelSpec, error: type[Exception]) -> None:
    with pytest.raises(error):
        build_model(spec)


def test_build_mesh_kinds(tmp_path) -> None:
    path = save_mesh(build_interval_mesh(0.0, 1.0, 3), tmp_path / "three.fvmesh")

    assert build_mesh(MeshSpec(kind="interval", n_cells=7)).n_cells == 7
    assert build_mesh(MeshSpec(kind="rectangle", nx=3, ny=2)).n_cells == 6
    assert build_mesh(MeshSpec(kind="file", path=path)).n_cells == 3
    with pytest.raises(MeshError):
        build_mesh(MeshSpec(kind="interval", n_cells=1))


def test_testcase1_initial_averages_the_jump() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 5)

    state = experiments.testcase1_initial(mesh)

    np.testing.assert_allclose(state.values[:, 0], [0.8, 0.8, 0.4, 0.0, 0.0])
    np.testing.assert_allclose(state.values[:, 1], 0.2)


def test_testcase2_initial_has_the_prescribed_means() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 8, 8)

    state = experiments.testcase2_initial(mesh)

    np.testing.assert_allclose(masses(state, mesh), TESTCASE2_MEANS)
    assert state.values[0, 0] == pytest.approx(9 / 11)
    assert state.values[-1, 1] == pytest.approx(8 / 11)
    assert state.values[0, 1] == 0.0


def test_blocks_initial_later_blocks_win() -> None:
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    blocks = (
        Block(0.0, 1.0, 0.0, 0.5, (0.5, 0.1)),
        Block(0.5, 1.0, 0.0, 0.5, (0.2, 0.2)),
    )

    state = blocks_initial(mesh, (0.1, 0.1), blocks)

    np.testing.assert_allclose(state.values, [[0.5, 0.1], [0.2, 0.2], [0.1, 0.1], [0.1, 0.1]])


def test_build_initial_presets() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    film = build_model(ModelSpec("thin_film"))

    steady = build_initial(InitialSpec(preset="steady"), mesh, film)
    single = build_model(ModelSpec("thin_film", {"a": "0 1; 1 0"}))
    constant = build_initial(InitialSpec(preset="constant", values=(0.3,)), mesh, single)

    np.testing.assert_allclose(steady.values, np.tile(reaction_steady_state(film), (4, 1)))
    np.testing.assert_allclose(constant.values, 0.3)


@pytest.mark.parametrize(
    "spec,model",
    [
        (InitialSpec(preset="testcase1"), ModelSpec("thin_film", {"a": "0 1; 1 0"})),
        (InitialSpec(preset="constant", values=(0.1, 0.1, 0.1)), ModelSpec("maxwell_stefan")),
        (InitialSpec(preset="steady"), ModelSpec("maxwell_stefan")),
    ],
)
def test_build_initial_rejects_mismatched_presets(spec: InitialSpec, model: ModelSpec) -> None:
    with pytest.raises(ConfigError):
        build_initial(spec, build_interval_mesh(0.0, 1.0, 4), build_model(model))


def test_resolve_steady_settings() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    ms = build_model(ModelSpec("maxwell_stefan"))
    film = build_model(ModelSpec("thin_film"))
    state = experiments.testcase1_initial(mesh)

    assert resolve_steady("none", ms, state, mesh) is None
    np.testing.assert_allclose(resolve_steady("auto", ms, state, mesh), [0.4, 0.2])
    np.testing.assert_allclose(resolve_steady("0.3 0.1", ms, state, mesh), [0.3, 0.1])
    np.testing.assert_allclose(resolve_steady("auto", film, state, mesh), thin_film_steady_state(0.4, 0.2, 1000.0))
    with pytest.raises(ConfigError):
        resolve_steady("0.3", ms, state, mesh)


def test_resolve_steady_auto_skips_boundary_means() -> None:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    ms = build_model(ModelSpec("maxwell_stefan"))
    state = build_initial(InitialSpec(preset="constant", values=(0.0, 0.5)), mesh, ms)

    assert resolve_steady("auto", ms, state, mesh) is None


def test_convergence_plan_desk_and_full_scale() -> None:
    reference, ladder, comments = convergence_plan(ConvergenceSpec(reference=40, ladder=(20, 5, 10)))
    full_reference, full_ladder, full_comments = convergence_plan(ConvergenceSpec(), full_scale=True)

    assert reference == 40
    assert ladder == (5, 10, 20)
    assert any(line.startswith("deviation:") for line in comments)
    assert full_reference == FULL_SCALE_REFERENCE
    assert full_ladder == FULL_SCALE_LADDER
    assert len(full_comments) == 1


@pytest.mark.parametrize(
    "spec",
    [
        ConvergenceSpec(reference=40, ladder=(10,)),
        ConvergenceSpec(reference=40, ladder=(10, 10)),
        ConvergenceSpec(reference=40, ladder=(10, 40)),
        ConvergenceSpec(reference=40, ladder=(0, 10)),
    ],
)
def test_convergence_plan_rejects_bad_ladders(spec: ConvergenceSpec) -> None:
    with pytest.raises(ConfigError):
        convergence_plan(spec)


def test_run_convergence_case_conserves_mass() -> None:
    values = run_convergence_case("maxwell_stefan", {}, "testcase1", (), 0.0, 1.0, 8, 2e-3, 1e-3, {})

    assert values.shape == (8, 2)
    np.testing.assert_allclose(values.mean(axis=0), [0.4, 0.2], rtol=1e-10)


def test_convergence_study_on_a_small_ladder() -> None:
    config = RunConfig.from_text(CONVERGENCE_CONFIG)

    study = run_convergence_study(config)

    assert study.reference == 40
    assert study.dt == pytest.approx(1 / 1600)
    assert [row.n_cells for row in study.rows] == [5, 10, 20]
    assert all(row.error.total > 0 for row in study.rows)
    assert study.rows[0].error.total > study.rows[-1].error.total
    assert len(study.orders) == 2
    assert any("dt" in line for line in study.comments)


@pytest.mark.parametrize(
    "patch",
    ["[mesh]\nkind = rectangle\n", "[initial]\npreset = testcase2\n"],
)
def test_convergence_study_rejects_unsupported_setups(patch: str) -> None:
    text = CONVERGENCE_CONFIG.replace("[mesh]\nkind = interval\nn_cells = 10\n", "").replace(
        "[initial]\npreset = testcase1\n", ""
    )
    config = RunConfig.from_text(text + "\n" + patch)

    with pytest.raises(ConfigError):
        run_convergence_study(config)


def test_convergence_study_rejects_coarsening_mismatch() -> None:
    config = RunConfig.from_text(CONVERGENCE_CONFIG.replace("ladder = 20, 5, 10", "ladder = 5, 15"))

    with pytest.raises(MeshError):
        run_convergence_study(config)


def test_decay_study_relative_entropy_decreases() -> None:
    config = RunConfig.from_text(DECAY_CONFIG)

    study = run_decay_study(config)

    assert study.final_relative_entropy < study.initial_relative_entropy
    assert study.mass_drift() <= 1e-8
    assert study.fit is not None
    assert study.fit.rate > 0
    assert study.fit.window == (0.025, 0.05)
    assert study.series[0][0] == 0
    assert study.series[-1][1] == 0.05


def test_decay_study_from_the_steady_state_has_no_fit() -> None:
    config = RunConfig.from_text(DECAY_CONFIG)
    spec = DecaySpec(nx=2, ny=2, t_end=1e-3, initial="steady")

    study = run_decay_study(config, spec)

    assert study.fit is None
    assert study.initial_relative_entropy <= 1e-14


def test_decay_study_needs_the_reaction_model() -> None:
    with pytest.raises(ConfigError):
        run_decay_study(RunConfig.from_text(DECAY_CONFIG.replace("thin_film", "maxwell_stefan")))
    with pytest.raises(ConfigError):
        run_decay_study(RunConfig.from_text(DECAY_CONFIG.replace("name = thin_film", "name = thin_film\nreaction = false")))
