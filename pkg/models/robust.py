from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, Field

from models.conic import ConicProgram, StandardForm
from models.uncertainty import UncertaintySpec


class RobustMode(str, Enum):
    DETERMINISTIC = "deterministic"
    FULL = "full"
    BUDGET = "budget"


@dataclass(frozen=True)
class RobustBlocks:
    """
    Matrix blocks of the robust primal at mu = 0, sliced out of the built
    program by column group and row block:

        P x + Q y = f,  M x + N y <= e,  y_c + V x + W y = 0            (base)
        P x + Q y^ + h_E psi + K_E mu = f,  M x + N y^ + h_I psi <= e^  (worst case)
        y^_c + V x + W y^ = 0,  h_r psi <= r
    """
    program: ConicProgram
    x_columns: Tuple[str, ...]
    y_columns: Tuple[str, ...]
    yc_columns: Tuple[str, ...]
    y_hat_columns: Tuple[str, ...]
    yc_hat_columns: Tuple[str, ...]
    psi_column: str
    coordinate_names: Tuple[str, ...]
    P: sp.csr_matrix
    Q: sp.csr_matrix
    f: np.ndarray
    M: sp.csr_matrix
    N: sp.csr_matrix
    e: np.ndarray
    V: sp.csr_matrix
    W: sp.csr_matrix
    e_hat: np.ndarray
    h_E: np.ndarray
    h_I: np.ndarray
    K_E: sp.csr_matrix
    h_r: np.ndarray
    r: np.ndarray
    limit_rows: Tuple[str, ...]
    limit_hat_rows: Tuple[str, ...]
    balance_hat_rows: Tuple[str, ...]


@dataclass(frozen=True)
class DualRcProgram:
    """Dual robust counterpart together with what is needed to read the robust primal back"""
    program: ConicProgram
    primal: ConicProgram
    primal_form: StandardForm
    sensitivity: sp.csr_matrix
    unc: UncertaintySpec
    orientation: np.ndarray
    alpha: np.ndarray
    big_m: float
    mode: RobustMode
    stationarity_rows: Tuple[str, ...]
    x_rows: Tuple[str, ...]
    psi_row: Optional[str]

    @property
    def interval(self) -> np.ndarray:
        """Degenerate epigraph interval sigma * alpha * mu_bar per coordinate"""
        return self.orientation * self.alpha * self.unc.mu_bar


class RobustSetpoints(BaseModel):
    case_name: str
    mode: RobustMode
    p_g: List[float] = Field(..., description="Base-point active power per generator, pu")
    c_ii: List[float] = Field(..., description="Squared terminal voltage per generator, pu")
    q_r: List[float] = Field(default_factory=list, description="Scheduled RES reactive output, pu")
    participation: List[float]
    coordinate_names: List[str] = Field(default_factory=list)
    mu_bar: List[float] = Field(default_factory=list)
    mu_star: List[float] = Field(default_factory=list)
    r_values: List[float] = Field(default_factory=list, description="Objective sensitivity to each deviation")
    complementarity: List[float] = Field(default_factory=list, description="min(R+, R-) of the reported split")
    split_overlap: List[float] = Field(default_factory=list, description="min(R+, R-) as the solver left it")
    alpha: Optional[List[float]] = None
    gamma: Optional[int] = None
    psi: float = 0.0
    psi_window: Tuple[float, float] = (0.0, 0.0)
    objective: float
    solver_gap: float = 0.0
    big_m: Optional[float] = None
    saturated: bool = False
    orientation_rounds: int = 0
    iterations: int = 0
    solve_time: float = 0.0
    warnings: List[str] = Field(default_factory=list)

    @property
    def v_g(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.c_ii))

    @property
    def x_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.p_g), np.asarray(self.c_ii)])

    @property
    def complementarity_max(self) -> float:
        return max(self.complementarity, default=0.0)


class GapReport(BaseModel):
    rc_objective: float
    primal_objective: Optional[float] = None
    relative_gap: Optional[float] = None
    max_setpoint_diff: Optional[float] = None
    primal_status: str
    message: str = ""


class BudgetSelection(BaseModel):
    gamma: int
    alpha: List[float]
    ranking: List[int] = Field(..., description="Coordinate indices ordered by |t| in the full solve")
    t_values: List[float]
    full_objective: float
    setpoints: RobustSetpoints


class ParticipationRefinement(BaseModel):
    participation: List[float]
    base_objective: float
    refined_objective: Optional[float] = None
    reduction_percent: Optional[float] = None
    status: str
    message: str = ""


class ExactnessResiduals(BaseModel):
    status: str
    sense: str
    cone_residual: Optional[float] = None
    angle_residual: Optional[float] = None
    worst_pair: Optional[str] = None


class ExactnessReport(BaseModel):
    base: List[ExactnessResiduals]
    worst_case: List[ExactnessResiduals]
    tolerance: float

    @staticmethod
    def _best(results: List[ExactnessResiduals]) -> Optional[ExactnessResiduals]:
        solved = [r for r in results if r.cone_residual is not None]
        return min(solved, key=lambda r: r.cone_residual, default=None)

    @property
    def best_base(self) -> Optional[ExactnessResiduals]:
        return self._best(self.base)

    @property
    def best_worst_case(self) -> Optional[ExactnessResiduals]:
        return self._best(self.worst_case)

    @property
    def exact(self) -> bool:
        picks = [self.best_base, self.best_worst_case]
        return all(p is not None and p.cone_residual <= self.tolerance for p in picks)

    def summary(self) -> Dict[str, Optional[float]]:
        base, worst = self.best_base, self.best_worst_case
        return {
            "base_cone_residual": base.cone_residual if base else None,
            "base_angle_residual": base.angle_residual if base else None,
            "worst_case_cone_residual": worst.cone_residual if worst else None,
            "worst_case_angle_residual": worst.angle_residual if worst else None,
        }
