from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from config import get_settings


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max-iter"


@dataclass(frozen=True)
class SocBlock:
    """Second-order cone ||x[tail]|| <= x[head]"""
    name: str
    tail: Tuple[int, ...]
    head: int

    @property
    def columns(self) -> Tuple[int, ...]:
        # head first, the order solvers expect
        return (self.head,) + tuple(self.tail)

    @property
    def size(self) -> int:
        return 1 + len(self.tail)


@dataclass(frozen=True)
class ConicProgram:
    """
    min c'x + d  s.t.  a_eq x = b_eq,  a_in x <= b_in,  lower <= x <= upper,
    and x[block] in SOC for every cone block.

    Rows carry names and block tags so multipliers are addressable by name.
    """
    c: np.ndarray
    d: float
    a_eq: sp.csr_matrix
    b_eq: np.ndarray
    a_in: sp.csr_matrix
    b_in: np.ndarray
    cones: Tuple[SocBlock, ...]
    lower: np.ndarray
    upper: np.ndarray
    columns: Tuple[str, ...]
    eq_rows: Tuple[str, ...]
    in_rows: Tuple[str, ...]
    eq_blocks: Tuple[str, ...]
    in_blocks: Tuple[str, ...]
    name: str = "program"
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.columns)
        if len(set(self.columns)) != n:
            raise ValueError(f"{self.name}: column names are not unique")
        if self.c.shape != (n,) or self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError(f"{self.name}: objective or bound length differs from column count {n}")
        if self.a_eq.shape != (len(self.eq_rows), n) or self.b_eq.shape != (len(self.eq_rows),):
            raise ValueError(f"{self.name}: equality block shape mismatch")
        if self.a_in.shape != (len(self.in_rows), n) or self.b_in.shape != (len(self.in_rows),):
            raise ValueError(f"{self.name}: inequality block shape mismatch")
        if len(self.eq_blocks) != len(self.eq_rows) or len(self.in_blocks) != len(self.in_rows):
            raise ValueError(f"{self.name}: every row needs a block tag")
        for cone in self.cones:
            if any(not 0 <= k < n for k in cone.columns):
                raise ValueError(f"{self.name}: cone {cone.name} references a column out of range")
            if self.lower[cone.head] < 0:
                raise ValueError(f"{self.name}: cone {cone.name} head column must be flagged nonnegative")
        object.__setattr__(self, "index", {name: k for k, name in enumerate(self.columns)})

    @property
    def n_var(self) -> int:
        return len(self.columns)

    def rows_in_block(self, block: str, kind: str = "eq") -> List[int]:
        tags = self.eq_blocks if kind == "eq" else self.in_blocks
        return [k for k, tag in enumerate(tags) if tag == block]

    def columns_with_prefix(self, prefix: str) -> List[int]:
        return [k for k, name in enumerate(self.columns) if name.startswith(prefix)]

    def value(self, x: np.ndarray, name: str) -> float:
        return float(x[self.index[name]])


@dataclass(frozen=True)
class ConeDims:
    l: int
    q: Tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)


@dataclass(frozen=True)
class StandardForm:
    """min c'x s.t. A x = b, G x + s = h, s in K(dims); rows of G ordered nonnegative first."""
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    dims: ConeDims
    offset: float
    columns: Tuple[str, ...]
    eq_names: Tuple[str, ...]
    g_names: Tuple[str, ...]
    g_kinds: Tuple[str, ...]


class SolverSettings(BaseModel):
    tolerance: float = Field(1e-8, gt=0)
    max_iter: int = Field(100, ge=1)
    regularization: float = Field(1e-9, ge=0)
    refinement_steps: int = Field(1, ge=0)
    verbose: bool = False
    backend: str = "ipm"
    log_path: Optional[str] = None

    @classmethod
    def from_settings(cls, **overrides) -> "SolverSettings":
        settings = get_settings()
        values = dict(
            tolerance=settings.SOLVER_TOLERANCE,
            max_iter=settings.SOLVER_MAX_ITER,
            regularization=settings.SOLVER_REGULARIZATION,
            refinement_steps=settings.SOLVER_REFINEMENT_STEPS,
            verbose=settings.SOLVER_VERBOSE,
            backend=settings.SOLVER_BACKEND,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class ConicSolution:
    status: SolveStatus
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    dims: ConeDims
    objective: float
    dual_objective: float
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    solve_time: float = 0.0
    history: List[dict] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL

    @property
    def z_nonnegative(self) -> np.ndarray:
        return self.z[: self.dims.l]

    def z_cones(self) -> List[np.ndarray]:
        blocks, start = [], self.dims.l
        for size in self.dims.q:
            blocks.append(self.z[start:start + size])
            start += size
        return blocks
