import json
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator

from models.robust import (
    BudgetSelection,
    ExactnessReport,
    GapReport,
    ParticipationRefinement,
    RobustSetpoints,
)
from models.validation import ValidationReport
from utils.helpers import config_hash

# fields that locate a run but do not change its result
_IDENTITY_EXCLUDE = {"output_dir"}


class SolveMode(str, Enum):
    DETERMINISTIC = "deterministic"
    ROBUST = "robust"


class StudyConfig(BaseModel):
    case_path: str
    case_format: Optional[str] = Field(None, description="mcase or native-json; inferred from the suffix when unset")
    mode: SolveMode = SolveMode.ROBUST
    res_penetration: float = Field(0.0, ge=0.0, le=1.0)
    res_placement: str = "largest-load"
    res_rating_factor: Optional[float] = Field(None, gt=0.0)
    load_uncertainty: float = Field(0.0, ge=0.0, le=1.0)
    res_uncertainty: float = Field(0.0, ge=0.0, le=1.0)
    gamma: Optional[int] = Field(None, ge=0, description="Uncertainty budget; None keeps every coordinate")
    eps_theta: Optional[float] = Field(None, gt=0.0)
    ramp_fraction: Optional[float] = Field(None, ge=0.0)
    ramp_mode: Optional[str] = None
    linearize_quadratic: bool = False
    solver_tolerance: Optional[float] = Field(None, gt=0.0)
    check_exactness: bool = False
    refine_participation: bool = False
    n_scenarios: int = Field(10000, ge=1)
    seed: int = 0
    output_dir: str = "results"

    @field_validator("gamma", mode="before")
    @classmethod
    def parse_gamma(cls, value):
        if isinstance(value, str):
            if value.strip().lower() in ("full", "all", ""):
                return None
            return int(value)
        return value

    @field_validator("ramp_mode")
    @classmethod
    def check_ramp_mode(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value not in ("scaled", "literal"):
            raise ValueError("ramp_mode must be 'scaled' or 'literal'")
        return value

    @property
    def identity(self) -> str:
        """SHA-256 of the canonical configuration, output location excluded"""
        return config_hash(self.model_dump(mode="json", exclude=_IDENTITY_EXCLUDE))

    @property
    def short_id(self) -> str:
        return self.identity[:12]

    @classmethod
    def from_file(cls, path: str, **overrides) -> "StudyConfig":
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.model_validate(data)


class SolutionArtifact(BaseModel):
    config_hash: str
    config: StudyConfig
    setpoints: RobustSetpoints
    strong_duality: Optional[GapReport] = None
    exactness: Optional[ExactnessReport] = None
    refinement: Optional[ParticipationRefinement] = None
    budget: Optional[BudgetSelection] = None
    timing: Dict[str, float] = Field(default_factory=dict,
                                     description="Wall-clock figures; the only field that differs between identical runs")


class ValidationArtifact(BaseModel):
    config_hash: str
    setpoints_path: str
    report: ValidationReport
    timing: Dict[str, float] = Field(default_factory=dict)


class RunManifest(BaseModel):
    config_hash: str
    command: str
    versions: Dict[str, str]
    wall_time: float
    timestamp: str
    artifacts: List[str] = Field(default_factory=list)
    status: str
    message: str = ""
