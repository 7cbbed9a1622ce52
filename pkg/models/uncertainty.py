from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class InjectionKind(str, Enum):
    LOAD = "load"
    RES = "res"


class ScenarioLabel(str, Enum):
    IN_RANGE = "in-range"
    OUT_OF_RANGE = "out-of-range"


class UncertainInjection(BaseModel):
    """One coordinate of the uncertainty box"""
    model_config = ConfigDict(frozen=True)

    kind: InjectionKind
    index: int = Field(..., description="Position in case.loads or case.res_units")
    bus: int
    nominal: float = Field(..., description="Forecast injection P_d or P_r, per-unit")
    mu_bar: float = Field(..., ge=0.0, description="Half-width of the symmetric box, per-unit")

    @property
    def name(self) -> str:
        return f"{self.kind.value}[{self.index}]@{self.bus}"


class UncertaintySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    coordinates: List[UncertainInjection] = []
    gamma: Optional[int] = Field(None, description="Budget; None means every coordinate may deviate")
    big_m: Optional[float] = Field(None, description="Big-M bound T; None selects it from the data scale")

    @model_validator(mode="after")
    def check_budget(self):
        if self.gamma is not None and not 0 <= self.gamma <= len(self.coordinates):
            raise ValueError(f"budget {self.gamma} outside [0, {len(self.coordinates)}]")
        if self.big_m is not None and self.big_m <= 0:
            raise ValueError("big_m must be positive")
        return self

    @property
    def size(self) -> int:
        return len(self.coordinates)

    @property
    def mu_bar(self) -> np.ndarray:
        return np.array([c.mu_bar for c in self.coordinates], dtype=float)

    @property
    def nominal(self) -> np.ndarray:
        return np.array([c.nominal for c in self.coordinates], dtype=float)

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.coordinates]

    def stress_orientation(self) -> np.ndarray:
        """Loads up, RES down"""
        return np.array([1.0 if c.kind == InjectionKind.LOAD else -1.0 for c in self.coordinates])

    def masked(self, alpha: np.ndarray) -> "UncertaintySpec":
        """Copy with mu_bar zeroed where alpha is zero"""
        coordinates = [
            c.model_copy(update={"mu_bar": c.mu_bar * float(a)})
            for c, a in zip(self.coordinates, alpha)
        ]
        return UncertaintySpec(coordinates=coordinates, gamma=None, big_m=self.big_m)

    def res_mu_bar(self, n_res: int) -> np.ndarray:
        """Deviation bound per RES unit (zero for units outside the box)"""
        bound = np.zeros(n_res)
        for c in self.coordinates:
            if c.kind == InjectionKind.RES:
                bound[c.index] = c.mu_bar
        return bound


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    label: ScenarioLabel
    mu: List[float]

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)
