from __future__ import annotations

from typing import Sequence


class CrossFVError(Exception):
    error_code = "CROSSFV_ERROR"
    exit_code = 2


class ConfigError(CrossFVError, ValueError):
    error_code = "CONFIG_ERROR"
    exit_code = 1


class MeshError(CrossFVError, ValueError):
    error_code = "MESH_INVALID"
    exit_code = 1


class MeshParseError(MeshError):
    error_code = "MESH_PARSE"

    def __init__(self, message: str, *, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class MeshValidationError(MeshError):
    error_code = "MESH_INVARIANT"

    def __init__(self, invariant: str, *, kind: str, index: int, detail: str = "") -> None:
        message = f"{invariant} violated at {kind} {index}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.invariant = invariant
        self.kind = kind
        self.index = index


class NonNestedMeshError(MeshError):
    error_code = "MESH_NOT_NESTED"


class MeshMismatchError(CrossFVError, ValueError):
    error_code = "MESH_MISMATCH"
    exit_code = 1


class ModelError(CrossFVError, ValueError):
    error_code = "MODEL_INVALID"
    exit_code = 1


class DomainError(CrossFVError, ValueError):
    error_code = "DOMAIN"


class RangeError(DomainError):
    error_code = "RANGE"
    exit_code = 1


class EntropySpecError(CrossFVError, ValueError):
    error_code = "ENTROPY_SPEC"
    exit_code = 1


class NoRootError(CrossFVError, ArithmeticError):
    error_code = "NO_ROOT"


class SingularDenominatorError(CrossFVError, ArithmeticError):
    error_code = "SINGULAR_DENOMINATOR"


class SingularEdgeError(CrossFVError, ArithmeticError):
    error_code = "SINGULAR_EDGE"

    def __init__(self, message: str, *, edges: Sequence[int] = ()) -> None:
        super().__init__(message)
        self.edges = tuple(int(e) for e in edges)


class SolverError(CrossFVError, RuntimeError):
    error_code = "SOLVER"


class NewtonDiverged(SolverError):
    error_code = "NEWTON_DIVERGED"


class LinearSolveFailure(SolverError):
    error_code = "LINEAR_SOLVE"


class DtUnderflow(SolverError):
    error_code = "DT_UNDERFLOW"
