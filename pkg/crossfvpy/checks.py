from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .diagnostics import source_entropy_sign, thin_film_steady_state
from .edge_means import chain_rule_residual, generic_edge_mean, h_inverse, log_mean, pair_means
from .errors import EntropySpecError
from .logging import log_json
from .mesh import build_interval_mesh, build_rectangle_mesh
from .models import (
    SAMPLE_MARGIN,
    EntropySpec,
    Model,
    Reaction,
    a_sigma_consistency_check,
    boltzmann_entropy,
    coercivity_constant,
    make_maxwell_stefan,
    make_thin_film,
    make_tumor,
    make_two_species_euler_limit,
    quadratic_form_sample,
    sample_simplex,
)
from .solver import assemble_jacobian, assemble_residual, dense_jacobian, flux_antisymmetry

logger = logging.getLogger(__name__)

CHAIN_RULE_TOLERANCE = 1e-12
GENERIC_MEAN_TOLERANCE = 1e-13
EDGE_SUM_TOLERANCE = 1e-14
COERCIVITY_RELATIVE_TOLERANCE = 1e-10
CONSISTENCY_TOLERANCE = 1e-13
FLUX_STATES = 1_000
# symmetric coefficients with positive off-diagonal entries
COERCIVE_TABLE = ((0.0, 1.0, 2.0), (1.0, 0.0, 1.5), (2.0, 1.5, 0.0))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def default_models() -> dict[str, Model]:
    return {
        "maxwell_stefan": make_maxwell_stefan(1 / 0.168, 1 / 0.68, 1 / 0.883),
        "thin_film": make_thin_film(COERCIVE_TABLE),
        "tumor": make_tumor(1.0, 1.0),
        "two_species": make_two_species_euler_limit(),
    }


def _at_most(name: str, value: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value <= threshold), float(value), float(threshold), detail)


def _at_least(name: str, value: float, threshold: float, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(value >= threshold), float(value), float(threshold), detail)


def _interior_pairs(rng: np.random.Generator, n: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    # every fraction, solvent included, stays at least SAMPLE_MARGIN away from 0
    scale = 1.0 - (n + 1) * SAMPLE_MARGIN
    left = SAMPLE_MARGIN + scale * sample_simplex(rng, n, count)
    right = SAMPLE_MARGIN + scale * sample_simplex(rng, n, count)
    return left[:, 1:], right[:, 1:]


def _chain_rule(rng, samples: int) -> list[CheckResult]:
    rows = []
    for n in (2, 3):
        u_k, u_l = _interior_pairs(rng, n, samples)
        residual = chain_rule_residual(boltzmann_entropy(n), u_k, u_l)
        rows.append(_at_most(f"chain rule residual, n={n}", residual, CHAIN_RULE_TOLERANCE))
    return rows


def _log_mean_properties(rng, samples: int) -> list[CheckResult]:
    count = 10 * samples
    a = rng.uniform(1e-12, 1.0, count)
    b = rng.uniform(1e-12, 1.0, count)
    mean = log_mean(a, b)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return [
        _at_most("log mean symmetry", np.max(np.abs(mean - log_mean(b, a))), 0.0),
        _at_most("log mean idempotence", np.max(np.abs(log_mean(a, a) - a)), 0.0),
        _at_most("log mean within [min, max]", max(np.max(lo - mean), np.max(mean - hi)), 0.0),
        _at_most("log mean <= arithmetic mean", np.max(mean - 0.5 * (a + b)), 0.0),
    ]


def _generic_mean(rng, samples: int) -> CheckResult:
    entropy = boltzmann_entropy(1)
    a = rng.uniform(SAMPLE_MARGIN, 1.0, samples)
    b = rng.uniform(SAMPLE_MARGIN, 1.0, samples)
    gap = np.max(np.abs(generic_edge_mean(entropy, 1, a, b) - log_mean(a, b)))
    return _at_most("generic edge mean matches log mean", gap, GENERIC_MEAN_TOLERANCE)


def _edge_sums(rng, samples: int) -> CheckResult:
    rows = []
    for n in (2, 3):
        left = sample_simplex(rng, n, samples)
        right = sample_simplex(rng, n, samples)
        means, _ = pair_means(boltzmann_entropy(n), left, right)
        rows.append(float(np.max(means.sum(axis=1))) - 1.0)
    return _at_most("edge mean sums <= 1", max(rows), EDGE_SUM_TOLERANCE)


def _hessian_checks(rng, samples: int) -> list[CheckResult]:
    n = 3
    u_sigma = rng.uniform(SAMPLE_MARGIN, 1.0 - SAMPLE_MARGIN, size=(samples, n + 1))
    hessian = boltzmann_entropy(n).hessian(u_sigma)
    smallest = float(np.min(np.linalg.eigvalsh(hessian)))
    identity_gap = float(np.max(np.abs(h_inverse(u_sigma) @ hessian - np.eye(n))))
    return [
        CheckResult("H(u_σ) positive definite", smallest > 0, smallest, 0.0),
        _at_most("Sherman-Morrison inverse of H", identity_gap, 1e-9),
    ]


def _model_checks(models: Mapping[str, Model], samples: int, seed: int) -> list[CheckResult]:
    rows = []
    for name, model in models.items():
        if model.physical_a is not None:
            deviation = a_sigma_consistency_check(model, samples, seed)
            rows.append(_at_most(f"A_σ consistency, {name}", deviation, CONSISTENCY_TOLERANCE))
        sample = quadratic_form_sample(model, samples, seed)
        if name == "two_species":
            rows.append(_at_least(f"quadratic form ratio, {name}", sample.ratio, 1.0 - 1e-12, "exact diagonal form"))
        elif name == "thin_film":
            alpha = coercivity_constant(model.params["a"])
            rows.append(
                _at_least(
                    f"quadratic form ratio, {name}",
                    sample.ratio,
                    alpha * (1.0 - COERCIVITY_RELATIVE_TOLERANCE),
                    f"alpha = {alpha!r}",
                )
            )
        else:
            rows.append(CheckResult(f"quadratic form positive, {name}", sample.positive, sample.ratio, 0.0))
    return rows


def _source_sign(rng, samples: int) -> CheckResult:
    reaction = Reaction(1000.0)
    steady = thin_film_steady_state(rate=reaction.rate)
    u, _ = _interior_pairs(rng, 2, samples)
    production = source_entropy_sign(u, steady, reaction.rate)
    scaled = production / (1.0 + np.abs(reaction.r1(u)))
    return _at_most("reaction entropy production <= 0", float(np.max(scaled)), 1e-12)


def _steady_algebra() -> list[CheckResult]:
    reaction = Reaction(1000.0)
    steady = thin_film_steady_state(rate=reaction.rate)
    u0 = 1.0 - steady.sum()
    # r_1 = 0 means u_2^2 = rate u_1 u_0
    r1 = abs(float(reaction.r1(steady)))
    balance = abs(math.log(reaction.rate * steady[0] * u0) - 2.0 * math.log(steady[1]))
    return [
        _at_most("steady state r_1 = 0", r1, 1e-12),
        _at_most("steady state log balance", balance, 1e-10),
    ]


def _entropy_hypothesis() -> CheckResult:
    failures = 0
    for n in (1, 2, 3):
        try:
            boltzmann_entropy(n)
        except EntropySpecError:
            failures += 1
    # a concave density must be rejected
    try:
        EntropySpec.from_functions(
            lambda x: -(x**2), lambda x: -2.0 * x, lambda x: np.full_like(x, -2.0), n_species=2, name="concave"
        )
        failures += 1
    except EntropySpecError:
        pass
    return _at_most("entropy density validation", failures, 0.0)


def _solver_oracles(rng) -> list[CheckResult]:
    mesh = build_interval_mesh(0.0, 1.0, 4)
    model = make_maxwell_stefan(1 / 0.168, 1 / 0.68, 1 / 0.883)
    u_old, _ = _interior_pairs(rng, 2, mesh.n_cells)
    u_new, _ = _interior_pairs(rng, 2, mesh.n_cells)
    dt = 1e-3
    colored = assemble_jacobian(u_new, u_old, dt, mesh, model).toarray()
    dense = dense_jacobian(u_new, u_old, dt, mesh, model)
    constant = np.tile(u_old[:1], (mesh.n_cells, 1))
    residual = assemble_residual(constant, constant, dt, mesh, model)
    grid = build_rectangle_mesh(1.0, 1.0, 3, 3)
    states, _ = _interior_pairs(rng, 2, FLUX_STATES * grid.n_cells)
    gap = max(flux_antisymmetry(state, grid, model) for state in states.reshape(FLUX_STATES, grid.n_cells, 2))
    return [
        _at_most("colored Jacobian equals dense Jacobian", float(np.max(np.abs(colored - dense))), 0.0),
        _at_most("residual at a constant state", float(np.max(np.abs(residual))), 0.0),
        _at_most("interior flux antisymmetry", gap, 0.0, f"{FLUX_STATES} states"),
    ]


def run_check_suite(
    seed: int = 0,
    samples: int = 10_000,
    models: Mapping[str, Model] | None = None,
) -> list[CheckResult]:
    """Sampled and deterministic invariant checks; every row reports its worst value."""
    rng = np.random.default_rng(seed)
    models = default_models() if models is None else dict(models)
    rows: list[CheckResult] = []
    if samples <= 0:
        log_json(
            logger,
            "checks.run_check_suite",
            "sample count is zero, sampled checks pass vacuously",
            level="warning",
            fields={"samples": samples},
        )
    else:
        sampled: list[Callable[[], list[CheckResult] | CheckResult]] = [
            lambda: _chain_rule(rng, samples),
            lambda: _log_mean_properties(rng, samples),
            lambda: _generic_mean(rng, samples),
            lambda: _edge_sums(rng, samples),
            lambda: _hessian_checks(rng, samples),
            lambda: _model_checks(models, samples, seed),
            lambda: _source_sign(rng, samples),
        ]
        for check in sampled:
            result = check()
            rows.extend(result if isinstance(result, list) else [result])
    rows.extend(_steady_algebra())
    rows.append(_entropy_hypothesis())
    rows.extend(_solver_oracles(rng))

    failed = [row.name for row in rows if not row.passed]
    log_json(
        logger,
        "checks.run_check_suite",
        "check suite finished",
        level="warning" if failed else "info",
        fields={"seed": seed, "samples": samples, "checks": len(rows), "failed": failed},
    )
    return rows


def format_table(rows: list[CheckResult]) -> str:
    width = max((len(row.name) for row in rows), default=10)
    lines = [f"{'check':<{width}}  {'status':<6}  {'value':>24}  {'threshold':>24}"]
    for row in rows:
        status = "PASS" if row.passed else "FAIL"
        line = f"{row.name:<{width}}  {status:<6}  {row.value:>24.17g}  {row.threshold:>24.17g}"
        if row.detail:
            line = f"{line}  {row.detail}"
        lines.append(line)
    return "\n".join(lines)
