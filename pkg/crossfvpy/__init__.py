from .config import ObservabilitySettings, RunConfig, SolverConfig
from .diagnostics import (
    coarsen,
    convergence_orders,
    decay_fit,
    discrete_entropy,
    entropy_dissipation,
    h1_seminorm,
    l1_error,
    relative_entropy,
    thin_film_steady_state,
)
from .edge_means import EdgeState, chain_rule_residual, compute_edge_state, generic_edge_mean, h_matrix, log_mean
from .errors import CrossFVError
from .logging import build_payload, log_json
from .mesh import Mesh, build_interval_mesh, build_rectangle_mesh, cell_averages, load_mesh, regularity_zeta
from .models import (
    EntropySpec,
    Model,
    a_sigma_consistency_check,
    boltzmann_entropy,
    make_maxwell_stefan,
    make_thin_film,
    make_tumor,
    make_two_species_euler_limit,
    quadratic_form_sample,
)
from .otel import configure_logging, init_otel
from .solver import (
    SimulationResult,
    StepReport,
    advance_adaptive,
    assemble_jacobian,
    assemble_residual,
    newton_solve,
    simulate,
)
from .span import SpanAttrKeys, SpanOps, set_span_attrs
from .state import StateField

__version__ = "0.1.0"

__all__ = [
    "CrossFVError",
    "EdgeState",
    "EntropySpec",
    "Mesh",
    "Model",
    "ObservabilitySettings",
    "RunConfig",
    "SimulationResult",
    "SolverConfig",
    "SpanAttrKeys",
    "SpanOps",
    "StateField",
    "StepReport",
    "a_sigma_consistency_check",
    "advance_adaptive",
    "assemble_jacobian",
    "assemble_residual",
    "boltzmann_entropy",
    "build_interval_mesh",
    "build_payload",
    "build_rectangle_mesh",
    "cell_averages",
    "chain_rule_residual",
    "coarsen",
    "compute_edge_state",
    "configure_logging",
    "convergence_orders",
    "decay_fit",
    "discrete_entropy",
    "entropy_dissipation",
    "generic_edge_mean",
    "h1_seminorm",
    "h_matrix",
    "init_otel",
    "l1_error",
    "load_mesh",
    "log_json",
    "log_mean",
    "make_maxwell_stefan",
    "make_thin_film",
    "make_tumor",
    "make_two_species_euler_limit",
    "newton_solve",
    "quadratic_form_sample",
    "regularity_zeta",
    "relative_entropy",
    "set_span_attrs",
    "simulate",
    "thin_film_steady_state",
]
