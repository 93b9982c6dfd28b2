from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NoRootError, SingularEdgeError
from .mesh import Mesh
from .models import EntropySpec
from .state import StateField, solvent_fraction

NEAR_EQUAL = 1e-13
BISECTION_TOL = 1e-14
BISECTION_MAX_ITER = 60

# branch tags per edge and index
BRANCH_MEAN = 1
BRANCH_EQUAL = 2
BRANCH_ZERO = 3


def _as_array(value) -> tuple[np.ndarray, bool]:
    array = np.asarray(value, dtype=float)
    return array, array.ndim == 0


def _check_nonnegative(*arrays: np.ndarray) -> None:
    for array in arrays:
        if np.any(np.isnan(array)):
            raise DomainError("edge mean of NaN")
        if np.any(array < 0):
            raise DomainError(f"edge mean needs nonnegative values, got {np.min(array)!r}")


def _branches(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    branch = np.full(np.broadcast(a, b).shape, BRANCH_ZERO, dtype=np.int8)
    positive = (a > 0) & (b > 0)
    branch[positive & (a == b)] = BRANCH_EQUAL
    branch[positive & (a != b)] = BRANCH_MEAN
    return branch


def _log_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    out = np.zeros(np.broadcast(a, b).shape)
    positive = lo > 0
    gap = hi - lo
    near = positive & (gap < NEAR_EQUAL * hi)
    far = positive & ~near
    arithmetic = 0.5 * (lo + hi)
    out[near] = arithmetic[near]
    if np.any(far):
        ratio = gap[far] / lo[far]
        value = gap[far] / np.log1p(ratio)
        out[far] = np.clip(value, lo[far], np.minimum(hi[far], arithmetic[far]))
    return out


def log_mean(a, b):
    """Logarithmic mean with the zero branch: 0 unless both arguments are positive.

    Relative gaps below 1e-13 fall back to the arithmetic mean.
    """
    a, scalar_a = _as_array(a)
    b, scalar_b = _as_array(b)
    _check_nonnegative(a, b)
    out = _log_mean(np.atleast_1d(a), np.atleast_1d(b))
    return float(out[0]) if scalar_a and scalar_b else out


def _bisect(entropy: EntropySpec, species: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    component = entropy.components[species]
    delta = hi - lo
    target = component.prime_difference(lo, hi)

    def g(m: np.ndarray) -> np.ndarray:
        return component.d2h(m) * delta - target

    g_lo, g_hi = g(lo), g(hi)
    slack = 1e-12 * (np.abs(component.d2h(lo) * delta) + np.abs(target))
    broken = (g_lo < -slack) | (g_hi > slack) | ~np.isfinite(g_lo) | ~np.isfinite(g_hi)
    if np.any(broken):
        k = int(np.flatnonzero(broken)[0])
        raise NoRootError(
            f"chain-rule equation for index {species} has no sign change on [{lo[k]!r}, {hi[k]!r}]"
        )

    left, right = lo.copy(), hi.copy()
    for _ in range(BISECTION_MAX_ITER):
        if np.all(right - left <= BISECTION_TOL):
            break
        mid = 0.5 * (left + right)
        above = g(mid) > 0
        left = np.where(above, mid, left)
        right = np.where(above, right, mid)
    return 0.5 * (left + right)


def generic_edge_mean(entropy: EntropySpec, species: int, a, b):
    """Solve h_i''(m)(b - a) = h_i'(b) - h_i'(a) for m between a and b."""
    a, scalar_a = _as_array(a)
    b, scalar_b = _as_array(b)
    _check_nonnegative(a, b)
    a, b = np.broadcast_arrays(np.atleast_1d(a), np.atleast_1d(b))
    out = np.zeros(a.shape)
    branch = _branches(a, b)
    equal = branch == BRANCH_EQUAL
    out[equal] = a[equal]
    solve = branch == BRANCH_MEAN
    if np.any(solve):
        lo = np.minimum(a[solve], b[solve])
        hi = np.maximum(a[solve], b[solve])
        out[solve] = _bisect(entropy, species, lo, hi)
    return float(out[0]) if scalar_a and scalar_b else out


def pair_means(entropy: EntropySpec, left: np.ndarray, right: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Means and branch tags for full vectors (..., n+1) on both sides of each edge."""
    _check_nonnegative(left, right)
    branches = _branches(left, right)
    if entropy.is_boltzmann:
        return _log_mean(left, right), branches
    means = np.empty(np.broadcast(left, right).shape)
    for i in range(entropy.n_species + 1):
        means[..., i] = generic_edge_mean(entropy, i, left[..., i], right[..., i])
    return means, branches


@dataclass(frozen=True, eq=False)
class EdgeState:
    """Per-interior-edge means u_σ (E, n+1), solvent in column 0, and branch tags."""

    means: np.ndarray
    branches: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.means.shape[0]

    def mean_sums(self) -> np.ndarray:
        return self.means.sum(axis=1)


def compute_edge_state(mesh: Mesh, state: StateField | np.ndarray, entropy: EntropySpec) -> EdgeState:
    values = state.values if isinstance(state, StateField) else np.asarray(state, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    full = np.concatenate([solvent_fraction(values)[:, None], values], axis=1)
    left = full[mesh.edge_cells[:, 0]]
    right = full[mesh.edge_cells[:, 1]]
    means, branches = pair_means(entropy, left, right)
    return EdgeState(means=means, branches=branches)


def h_matrix(entropy: EntropySpec, u_sigma: np.ndarray) -> np.ndarray:
    u_sigma = np.asarray(u_sigma, dtype=float)
    flat = u_sigma.reshape(-1, u_sigma.shape[-1])
    zero = np.flatnonzero(np.any(flat <= 0, axis=1))
    if zero.size:
        raise SingularEdgeError(
            f"H(u_σ) needs positive means, {zero.size} edge(s) touch zero", edges=zero[:16]
        )
    return entropy.hessian(u_sigma)


def h_inverse(u_sigma: np.ndarray) -> np.ndarray:
    """Inverse of the Boltzmann H: diag(u) - u uᵀ/β with β = Σ_{i=0}^n u_{i,σ}."""
    u_sigma = np.asarray(u_sigma, dtype=float)
    if np.any(u_sigma <= 0):
        raise SingularEdgeError("H(u_σ) needs positive means")
    species = u_sigma[..., 1:]
    beta = u_sigma.sum(axis=-1)
    n = species.shape[-1]
    diagonal = species[..., :, None] * np.eye(n)
    return diagonal - species[..., :, None] * species[..., None, :] / beta[..., None, None]


def _interior(u: np.ndarray, what: str) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    full = np.concatenate([1.0 - u.sum(axis=1, keepdims=True), u], axis=1)
    if not np.all(np.isfinite(full)) or np.any(full <= 0):
        raise DomainError(f"{what} must lie strictly inside the simplex")
    return full


def chain_rule_residual(entropy: EntropySpec, u_K: np.ndarray, u_L: np.ndarray) -> float:
    """max |H(u_σ)(u_L - u_K) - (∂h(u_L) - ∂h(u_K))| over species (and over a batch of pairs)."""
    full_k = _interior(u_K, "u_K")
    full_l = _interior(u_L, "u_L")
    means, _ = pair_means(entropy, full_k, full_l)
    jump = full_l[:, 1:] - full_k[:, 1:]
    lhs = np.einsum("pij,pj->pi", entropy.hessian(means), jump)
    differences = np.stack(
        [c.prime_difference(full_k[:, i], full_l[:, i]) for i, c in enumerate(entropy.components)], axis=-1
    )
    rhs = differences[:, 1:] - differences[:, :1]
    return float(np.max(np.abs(lhs - rhs)))
