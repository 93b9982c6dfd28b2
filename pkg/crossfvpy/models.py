from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import xlogy

from .errors import EntropySpecError, ModelError, SingularDenominatorError

ScalarFn = Callable[[np.ndarray], np.ndarray]

# sample points for the convexity checks on (0, 1)
_PROBE = np.linspace(1e-6, 1.0 - 1e-6, 1001)
SAMPLE_MARGIN = 1e-3


@dataclass(frozen=True)
class EntropyComponent:
    """h_i with its first two derivatives.

    ``dh_difference(a, b)`` may return h_i'(b) - h_i'(a) more accurately than
    subtracting the two values; the generic edge mean uses it when present.
    """

    h: ScalarFn
    dh: ScalarFn
    d2h: ScalarFn
    dh_difference: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def prime_difference(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.dh_difference is not None:
            return self.dh_difference(a, b)
        return self.dh(b) - self.dh(a)


@dataclass(frozen=True, eq=False)
class EntropySpec:
    """Additive entropy density h(u) = Σ_{i=0}^n h_i(u_i); index 0 is the solvent."""

    components: tuple[EntropyComponent, ...]
    name: str = "custom"
    kind: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", tuple(self.components))
        if len(self.components) < 2:
            raise EntropySpecError("an entropy needs the solvent and at least one species")
        for index, component in enumerate(self.components):
            _check_component(component, index)

    @classmethod
    def from_functions(
        cls,
        h: ScalarFn,
        dh: ScalarFn,
        d2h: ScalarFn,
        n_species: int,
        *,
        name: str = "custom",
        dh_difference: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    ) -> EntropySpec:
        component = EntropyComponent(h=h, dh=dh, d2h=d2h, dh_difference=dh_difference)
        return cls(components=(component,) * (n_species + 1), name=name)

    @property
    def n_species(self) -> int:
        return len(self.components) - 1

    @property
    def is_boltzmann(self) -> bool:
        return self.kind == "boltzmann"

    def density(self, full: np.ndarray) -> np.ndarray:
        """h(u) for full vectors (..., n+1), solvent first."""
        full = np.asarray(full, dtype=float)
        return sum(c.h(full[..., i]) for i, c in enumerate(self.components))

    def prime(self, full: np.ndarray) -> np.ndarray:
        full = np.asarray(full, dtype=float)
        return np.stack([c.dh(full[..., i]) for i, c in enumerate(self.components)], axis=-1)

    def gradient(self, full: np.ndarray) -> np.ndarray:
        """∂h/∂u_i = h_i'(u_i) - h_0'(u_0) for i = 1..n."""
        primes = self.prime(full)
        return primes[..., 1:] - primes[..., :1]

    def second(self, index: int, x: np.ndarray) -> np.ndarray:
        return self.components[index].d2h(np.asarray(x, dtype=float))

    def hessian(self, u_sigma: np.ndarray) -> np.ndarray:
        """H_ij = δ_ij h_i''(u_i) + h_0''(u_0), batched over leading axes."""
        u_sigma = np.asarray(u_sigma, dtype=float)
        n = self.n_species
        solvent = self.second(0, u_sigma[..., 0])
        diagonal = np.stack([self.second(i, u_sigma[..., i]) for i in range(1, n + 1)], axis=-1)
        matrix = np.broadcast_to(solvent[..., None, None], u_sigma.shape[:-1] + (n, n)).copy()
        idx = np.arange(n)
        matrix[..., idx, idx] += diagonal
        return matrix


def _check_component(component: EntropyComponent, index: int) -> None:
    with np.errstate(all="ignore"):
        second = np.asarray(component.d2h(_PROBE), dtype=float)
        values = np.asarray(component.h(_PROBE), dtype=float)
    if second.shape != _PROBE.shape or not np.all(np.isfinite(second)):
        raise EntropySpecError(f"h_{index}'' must be finite on (0, 1)")
    if np.any(second <= 0):
        raise EntropySpecError(f"h_{index}'' must be positive on (0, 1)")
    if np.any(np.diff(second) >= 0):
        raise EntropySpecError(f"h_{index}'' must be strictly decreasing on (0, 1)")
    if np.any(values < -1e-12):
        raise EntropySpecError(f"h_{index} must be nonnegative on (0, 1); add a constant")


def _boltzmann_h(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return xlogy(x, x) - x + 1.0


def _log_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log1p((b - a) / a)


def _reciprocal(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 1.0 / np.asarray(x, dtype=float)


_BOLTZMANN = EntropyComponent(h=_boltzmann_h, dh=np.log, d2h=_reciprocal, dh_difference=_log_ratio)


def boltzmann_entropy(n_species: int) -> EntropySpec:
    """h_i(x) = x(log x - 1) + 1 for every index, extended by continuity to x = 0."""
    if n_species < 1:
        raise EntropySpecError(f"n_species must be at least 1, got {n_species}")
    return EntropySpec(components=(_BOLTZMANN,) * (n_species + 1), name="boltzmann", kind="boltzmann")


@dataclass(frozen=True)
class Reaction:
    """Source (r_1, -2 r_1) with r_1(u) = (u_2^+)^2 - rate·u_1^+·(1 - u_1 - u_2)^+."""

    rate: float = 1000.0

    def r1(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        u1, u2 = u[..., 0], u[..., 1]
        u0 = 1.0 - u1 - u2
        return np.maximum(u2, 0.0) ** 2 - self.rate * np.maximum(u1, 0.0) * np.maximum(u0, 0.0)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        r = self.r1(u)
        return np.stack([r, -2.0 * r], axis=-1)


def thin_film_reaction(rate: float = 1000.0) -> Reaction:
    if rate <= 0:
        raise ModelError(f"reaction rate must be positive, got {rate}")
    return Reaction(rate=float(rate))


@dataclass(frozen=True, eq=False)
class Model:
    """Cross-diffusion model.

    ``a_sigma`` maps edge means (E, n+1), solvent first, to (E, n, n).
    ``physical_a`` maps species fractions (P, n) to the continuous A(u).
    ``source`` maps cell values (N, n) to rates (N, n).
    """

    name: str
    n_species: int
    entropy: EntropySpec
    a_sigma: Callable[[np.ndarray], np.ndarray]
    physical_a: Callable[[np.ndarray], np.ndarray] | None = None
    source: Callable[[np.ndarray], np.ndarray] | None = None
    exponent_s: float = 0.5
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.entropy.n_species != self.n_species:
            raise ModelError(
                f"entropy has {self.entropy.n_species} species, model {self.name!r} has {self.n_species}"
            )
        if not (0 < self.exponent_s <= 1):
            raise ModelError(f"exponent_s must lie in (0, 1], got {self.exponent_s}")

    @property
    def has_source(self) -> bool:
        return self.source is not None

    def diffusion(self, u_sigma: np.ndarray) -> np.ndarray:
        """A_σ for one mean vector (n+1,) or a batch (E, n+1)."""
        u_sigma = np.asarray(u_sigma, dtype=float)
        if u_sigma.ndim == 1:
            return self.a_sigma(u_sigma[None, :])[0]
        return self.a_sigma(u_sigma)

    def rates(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.source is None:
            return np.zeros_like(u)
        return np.asarray(self.source(u), dtype=float)


def _checked(denominator: np.ndarray, what: str) -> np.ndarray:
    zero = np.flatnonzero(denominator == 0)
    if zero.size:
        raise SingularDenominatorError(f"{what} vanishes at edge {int(zero[0])} ({zero.size} edges)")
    return denominator


def _matrix2(a11, a12, a21, a22) -> np.ndarray:
    return np.stack([np.stack([a11, a12], axis=-1), np.stack([a21, a22], axis=-1)], axis=-2)


def _with_solvent(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.concatenate([1.0 - u.sum(axis=-1, keepdims=True), u], axis=-1)


def make_maxwell_stefan(d0: float, d1: float, d2: float) -> Model:
    if min(d0, d1, d2) <= 0:
        raise ModelError(f"Maxwell-Stefan coefficients must be positive, got {(d0, d1, d2)}")

    def a_sigma(us: np.ndarray) -> np.ndarray:
        u0, u1, u2 = us[:, 0], us[:, 1], us[:, 2]
        alpha = _checked(d1 * d2 * u0 + d0 * d1 * u1 + d0 * d2 * u2, "α_σ")
        return _matrix2(
            d2 * (u2 + u0) + d0 * u1,
            (d0 - d1) * u1,
            (d0 - d2) * u2,
            d1 * (u1 + u0) + d0 * u2,
        ) / alpha[:, None, None]

    def physical(u: np.ndarray) -> np.ndarray:
        u1, u2 = u[:, 0], u[:, 1]
        alpha = _checked(d1 * d2 * (1.0 - u1 - u2) + d0 * d1 * u1 + d0 * d2 * u2, "α")
        return _matrix2(
            d2 + (d0 - d2) * u1,
            (d0 - d1) * u1,
            (d0 - d2) * u2,
            d1 + (d0 - d1) * u2,
        ) / alpha[:, None, None]

    return Model(
        name="maxwell_stefan",
        n_species=2,
        entropy=boltzmann_entropy(2),
        a_sigma=a_sigma,
        physical_a=physical,
        exponent_s=0.5,
        params={"d0": d0, "d1": d1, "d2": d2},
    )


def _coefficient_table(a: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    table = np.array(a, dtype=float)
    if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] < 2:
        raise ModelError(f"thin-film coefficients must be a square (n+1)x(n+1) table, got shape {table.shape}")
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ModelError("thin-film coefficients must be finite and nonnegative")
    return table


def make_thin_film(a: Sequence[Sequence[float]] | np.ndarray, source: Callable | None = None) -> Model:
    """A_ii = Σ_{k≠i} (a_ik - a_i0) u_k + a_i0, A_ij = -(a_ij - a_i0) u_i, indices 0..n."""
    table = _coefficient_table(a)
    n = table.shape[0] - 1
    a0 = table[1:, 0]
    offset = table[1:, 1:] - a0[:, None]
    np.fill_diagonal(offset, 0.0)
    idx = np.arange(n)

    def a_sigma(us: np.ndarray) -> np.ndarray:
        u = us[:, 1:]
        matrix = -offset[None, :, :] * u[:, :, None]
        matrix[:, idx, idx] = u @ offset.T + a0
        return matrix

    def physical(u: np.ndarray) -> np.ndarray:
        return a_sigma(_with_solvent(u))

    params: dict[str, Any] = {"a": table.tolist()}
    if isinstance(source, Reaction):
        params["reaction_rate"] = source.rate
    return Model(
        name="thin_film",
        n_species=n,
        entropy=boltzmann_entropy(n),
        a_sigma=a_sigma,
        physical_a=physical,
        source=source,
        exponent_s=0.5,
        params=params,
    )


def coercivity_constant(a: Sequence[Sequence[float]] | np.ndarray) -> float:
    """Smallest off-diagonal coefficient a_ij (solvent row included)."""
    table = _coefficient_table(a)
    mask = ~np.eye(table.shape[0], dtype=bool)
    return float(np.min(table[mask]))


def make_tumor(beta: float, theta: float, delta: float = 0.0) -> Model:
    if beta <= 0:
        raise ModelError(f"tumor model needs beta > 0, got {beta}")
    if not theta < 4.0 / np.sqrt(beta):
        raise ModelError(f"tumor model needs theta < 4/sqrt(beta) = {4.0 / np.sqrt(beta)!r}, got {theta}")
    if delta < 0:
        raise ModelError(f"artificial diffusion must be nonnegative, got {delta}")

    def _core(u1, u2, rest1, rest2) -> np.ndarray:
        # rest1 stands for 1 - u_1, rest2 for 1 - u_2
        return _matrix2(
            2.0 * u1 * rest1 - beta * theta * u1 * u2**2,
            -2.0 * beta * u1 * u2 * (1.0 + theta * u1),
            -2.0 * u1 * u2 + beta * theta * rest2 * u2**2,
            2.0 * beta * u2 * rest2 * (1.0 + theta * u1),
        )

    def a_sigma(us: np.ndarray) -> np.ndarray:
        u0, u1, u2 = us[:, 0], us[:, 1], us[:, 2]
        scale = _checked(u0 + u1 + u2, "a(u_σ)")
        matrix = _core(u1, u2, u0 + u2, u0 + u1) / scale[:, None, None]
        return matrix + delta * np.eye(2)

    def physical(u: np.ndarray) -> np.ndarray:
        u1, u2 = u[:, 0], u[:, 1]
        return _core(u1, u2, 1.0 - u1, 1.0 - u2) + delta * np.eye(2)

    return Model(
        name="tumor",
        n_species=2,
        entropy=boltzmann_entropy(2),
        a_sigma=a_sigma,
        physical_a=physical,
        exponent_s=1.0 if delta == 0 else 0.5,
        params={"beta": beta, "theta": theta, "delta": delta},
    )


def make_two_species_euler_limit() -> Model:
    def a_sigma(us: np.ndarray) -> np.ndarray:
        u0, u1, u2 = us[:, 0], us[:, 1], us[:, 2]
        scale = _checked(u0 + u1 + u2, "a(u_σ)")
        return _matrix2(u0 + u2, -u1, -u2, u0 + u1) / scale[:, None, None]

    def physical(u: np.ndarray) -> np.ndarray:
        u1, u2 = u[:, 0], u[:, 1]
        return _matrix2(1.0 - u1, -u1, -u2, 1.0 - u2)

    return Model(
        name="two_species",
        n_species=2,
        entropy=boltzmann_entropy(2),
        a_sigma=a_sigma,
        physical_a=physical,
        exponent_s=0.5,
    )


def sample_simplex(rng: np.random.Generator, n_species: int, samples: int) -> np.ndarray:
    """Uniform points of D as full vectors (samples, n+1), solvent first."""
    return rng.dirichlet(np.ones(n_species + 1), size=samples)


def a_sigma_consistency_check(model: Model, samples: int, seed: int) -> float:
    """Max entrywise |A_σ((u_0, u)) - A(u)| over uniform samples of D with u_0 = 1 - Σu."""
    if model.physical_a is None:
        raise ModelError(f"model {model.name!r} has no physical diffusion matrix to compare against")
    if samples <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    u = sample_simplex(rng, model.n_species, samples)[:, 1:]
    edge = model.a_sigma(_with_solvent(u))
    reference = model.physical_a(u)
    return float(np.max(np.abs(edge - reference)))


@dataclass(frozen=True)
class QuadraticFormSample:
    """Smallest observed zᵀH A_σ z / Σ u_i^{2(s-1)} z_i² and the sample attaining it."""

    ratio: float
    u_sigma: np.ndarray | None = None
    z: np.ndarray | None = None

    @property
    def positive(self) -> bool:
        return self.ratio > 0


def quadratic_form_sample(
    model: Model,
    samples: int,
    seed: int,
    *,
    margin: float = SAMPLE_MARGIN,
) -> QuadraticFormSample:
    """Worst ratio over edge means u_σ of random pairs in D, which keep Σ_i u_{i,σ} <= 1."""
    from .edge_means import pair_means

    if samples <= 0:
        return QuadraticFormSample(ratio=float("inf"))
    rng = np.random.default_rng(seed)
    n = model.n_species
    scale = 1.0 - (n + 1) * margin
    left = margin + scale * sample_simplex(rng, n, samples)
    right = margin + scale * sample_simplex(rng, n, samples)
    u_sigma, _ = pair_means(model.entropy, left, right)
    z = rng.standard_normal((samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    product = model.entropy.hessian(u_sigma) @ model.diffusion(u_sigma)
    form = np.einsum("pi,pij,pj->p", z, product, z)
    weight = np.sum(u_sigma[:, 1:] ** (2.0 * (model.exponent_s - 1.0)) * z**2, axis=1)
    ratios = form / weight
    worst = int(np.argmin(ratios))
    return QuadraticFormSample(ratio=float(ratios[worst]), u_sigma=u_sigma[worst], z=z[worst])


@dataclass(frozen=True)
class SourceConditionSample:
    growth: float
    lower: float


def source_condition_sample(model: Model, samples: int, seed: int) -> SourceConditionSample:
    """Empirical C_f and c_f for Σ f_i ∂h/∂u_i <= C_f (1 + h) and f_i >= -c_f u_i."""
    if model.source is None or samples <= 0:
        return SourceConditionSample(growth=0.0, lower=0.0)
    rng = np.random.default_rng(seed)
    full = sample_simplex(rng, model.n_species, samples)
    u = full[:, 1:]
    f = model.rates(u)
    production = np.sum(f * model.entropy.gradient(full), axis=1) / (1.0 + model.entropy.density(full))
    lower = np.max(-f / u)
    return SourceConditionSample(growth=float(np.max(production)), lower=float(max(0.0, lower)))
