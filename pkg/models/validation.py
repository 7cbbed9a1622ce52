from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from models.uncertainty import ScenarioLabel

CONSTRAINT_FAMILIES = ("flow", "res_q", "gen_p", "gen_q", "ramp", "voltage", "angle", "angle_diff")


class Verdict(str, Enum):
    ROBUST = "robust"
    NOT_ROBUST = "not robust"


@dataclass(frozen=True)
class PfSolution:
    """Converged (or last) iterate of the distributed-slack power flow"""
    scenario_id: int
    converged: bool
    iterations: int
    mismatch: float
    v: np.ndarray
    theta: np.ndarray
    psi: float
    p_ft: np.ndarray
    p_tf: np.ndarray
    q_ft: np.ndarray
    q_tf: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    p_r: np.ndarray
    q_r: np.ndarray
    message: str = ""


class ViolationRecord(BaseModel):
    family: str
    element: str
    value: float
    limit: float
    margin: float = Field(..., description="Distance to the limit; negative when violated")


class ConstraintEvaluation(BaseModel):
    worst: Dict[str, ViolationRecord] = Field(default_factory=dict, description="Smallest margin per family")
    violations: List[ViolationRecord] = Field(default_factory=list)

    @property
    def violated(self) -> bool:
        return bool(self.violations)

    @property
    def violated_families(self) -> List[str]:
        return sorted({v.family for v in self.violations})


class ScenarioRecord(BaseModel):
    id: int
    label: ScenarioLabel
    converged: bool
    iterations: int
    psi: float
    violated: bool
    margins: Dict[str, float] = Field(default_factory=dict)
    families: List[str] = Field(default_factory=list)


class EnvelopeEntry(BaseModel):
    family: str
    element: str
    min_value: float
    max_value: float
    lower_limit: Optional[float] = None
    upper_limit: Optional[float] = None


class ValidationReport(BaseModel):
    case_name: str
    setpoints_mode: str
    mode: ScenarioLabel
    n_scenarios: int
    seed: int
    violation_count: int
    divergence_count: int
    violation_probability: float = Field(..., description="Fraction of scenarios with a violation or divergence")
    family_histogram: Dict[str, int] = Field(default_factory=dict)
    verdict: Verdict
    eta: Optional[float] = None
    envelope: List[EnvelopeEntry] = Field(default_factory=list)
    scenarios: List[ScenarioRecord] = Field(default_factory=list)
    wall_time: float = 0.0

    @property
    def violation_percent(self) -> float:
        return 100.0 * self.violation_probability

    @property
    def robust(self) -> bool:
        return self.verdict == Verdict.ROBUST

    def envelope_frame(self) -> pd.DataFrame:
        columns = list(EnvelopeEntry.model_fields)
        return pd.DataFrame([entry.model_dump() for entry in self.envelope], columns=columns)

    def scenario_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.scenarios:
            row = {"id": record.id, "label": record.label.value, "converged": record.converged,
                   "iterations": record.iterations, "psi": record.psi, "violated": record.violated}
            row.update({f"margin_{family}": record.margins.get(family) for family in CONSTRAINT_FAMILIES})
            rows.append(row)
        return pd.DataFrame(rows)
