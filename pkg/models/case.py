import math
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEFAULT_THETA_LIMIT = math.pi / 2
DEFAULT_ANGLE_DIFF_LIMIT = math.pi / 4
PARTICIPATION_SUM_TOL = 1e-9


class BusType(str, Enum):
    REFERENCE = "reference"
    GENERATOR = "generator"
    LOAD_ONLY = "load-only"


class Bus(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    type: BusType
    v_min: float
    v_max: float
    theta_min: float = -DEFAULT_THETA_LIMIT
    theta_max: float = DEFAULT_THETA_LIMIT
    gs: float = Field(0.0, description="Shunt conductance at V = 1 pu, per-unit")
    bs: float = Field(0.0, description="Shunt susceptance at V = 1 pu, per-unit")

    @model_validator(mode="after")
    def check_limits(self):
        if not 0 < self.v_min <= self.v_max:
            raise ValueError(f"bus {self.id}: need 0 < v_min <= v_max, got [{self.v_min}, {self.v_max}]")
        if self.theta_min > self.theta_max:
            raise ValueError(f"bus {self.id}: theta_min exceeds theta_max")
        return self


class Branch(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    tap_ratio: float = Field(1.0, description="Off-nominal tap magnitude |t|, from side")
    tap_shift: float = Field(0.0, description="Phase shift of the tap in radians")
    p_max: float = Field(0.0, description="Active flow limit in pu; 0 means unlimited")
    theta_diff_max: float = DEFAULT_ANGLE_DIFF_LIMIT

    @model_validator(mode="after")
    def check_branch(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: from and to bus are equal")
        if self.x == 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: zero series reactance")
        if self.tap_ratio <= 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: tap ratio must be positive")
        if self.p_max < 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: negative flow limit")
        if self.theta_diff_max <= 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: angle difference limit must be positive")
        return self

    @property
    def p_min(self) -> float:
        return -self.p_max

    @property
    def theta_diff_min(self) -> float:
        return -self.theta_diff_max

    @property
    def limited(self) -> bool:
        return self.p_max > 0

    def admittances(self):
        """Return (Y_ff, Y_ft, Y_tf, Y_tt) of the branch pi model"""
        y = 1.0 / complex(self.r, self.x)
        tap = self.tap_ratio * np.exp(1j * self.tap_shift)
        y_ff = (y + 0.5j * self.b_sh) / (self.tap_ratio ** 2)
        y_ft = -y / np.conj(tap)
        y_tf = -y / tap
        y_tt = y + 0.5j * self.b_sh
        return y_ff, y_ft, y_tf, y_tt


class Generator(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus: int
    a: float = Field(..., description="Linear cost coefficient, $/pu-h")
    b: float = Field(0.0, description="No-load cost, $/h")
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    ramp_limit: Optional[float] = None
    participation: Optional[float] = None

    @model_validator(mode="after")
    def check_generator(self):
        if self.a <= 0:
            raise ValueError(f"generator at bus {self.bus}: cost coefficient a must be positive")
        if self.b < 0:
            raise ValueError(f"generator at bus {self.bus}: cost coefficient b must be non-negative")
        if self.p_min > self.p_max:
            raise ValueError(f"generator at bus {self.bus}: p_min exceeds p_max")
        if self.q_min > self.q_max:
            raise ValueError(f"generator at bus {self.bus}: q_min exceeds q_max")
        if self.ramp_limit is not None and self.ramp_limit < 0:
            raise ValueError(f"generator at bus {self.bus}: negative ramp limit")
        if self.participation is not None and self.participation < 0:
            raise ValueError(f"generator at bus {self.bus}: negative participation factor")
        return self

    @property
    def dispatchable(self) -> bool:
        return self.p_max > self.p_min


class LoadPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus: int
    p_d: float
    q_d: float
    lr: Optional[float] = Field(None, description="Reactive coupling ratio tan(phi)")

    @field_validator("p_d", "q_d")
    @classmethod
    def check_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("load values must be finite")
        return value

    @model_validator(mode="before")
    @classmethod
    def fill_ratio(cls, data):
        if isinstance(data, dict) and data.get("lr") is None:
            p_d = float(data.get("p_d", 0.0))
            # constant power factor; undefined ratio keeps Q as a fixed injection
            data = {**data, "lr": float(data.get("q_d", 0.0)) / p_d if p_d > 0 else 0.0}
        return data

    @field_validator("lr")
    @classmethod
    def check_ratio(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not math.isfinite(value):
            raise ValueError("lr must be finite")
        return value

    @property
    def coupled(self) -> bool:
        """Whether the reactive demand follows the active demand"""
        return self.p_d > 0


class ResUnit(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus: int
    p_r: float
    s_max: float

    @model_validator(mode="after")
    def check_rating(self):
        if not 0 <= self.p_r <= self.s_max:
            raise ValueError(f"RES at bus {self.bus}: need 0 <= p_r <= s_max")
        return self

    @property
    def q_limit(self) -> float:
        return math.sqrt(max(self.s_max ** 2 - self.p_r ** 2, 0.0))


class NetworkCase(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "case"
    base_mva: float = 100.0
    buses: List[Bus]
    branches: List[Branch]
    generators: List[Generator]
    loads: List[LoadPoint] = []
    res_units: List[ResUnit] = []

    @model_validator(mode="after")
    def check_case(self):
        if self.base_mva <= 0:
            raise ValueError("base_mva must be positive")
        ids = [bus.id for bus in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        if ids != sorted(ids):
            raise ValueError("buses must be ordered by id")
        references = [bus.id for bus in self.buses if bus.type == BusType.REFERENCE]
        if len(references) != 1:
            raise ValueError(f"exactly one reference bus required, found {len(references)}")
        known = set(ids)
        for branch in self.branches:
            for end in (branch.from_bus, branch.to_bus):
                if end not in known:
                    raise ValueError(f"branch references unknown bus {end}")
        for kind, items in (("generator", self.generators), ("load", self.loads), ("RES", self.res_units)):
            for item in items:
                if item.bus not in known:
                    raise ValueError(f"{kind} references unknown bus {item.bus}")
        if not self.generators:
            raise ValueError("at least one generator is required")
        rho = [g.participation for g in self.generators]
        if all(value is not None for value in rho) and abs(sum(rho) - 1.0) > PARTICIPATION_SUM_TOL:
            raise ValueError(f"participation factors sum to {sum(rho)}, expected 1")
        if len(self.buses) > 1:
            position = {bus_id: k for k, bus_id in enumerate(ids)}
            rows = [position[br.from_bus] for br in self.branches]
            cols = [position[br.to_bus] for br in self.branches]
            graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
            count, _ = connected_components(graph, directed=False)
            if count != 1:
                raise ValueError(f"network graph is not connected ({count} islands)")
        return self

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_index(self) -> Dict[int, int]:
        return {bus.id: k for k, bus in enumerate(self.buses)}

    @property
    def reference_bus(self) -> Bus:
        return next(bus for bus in self.buses if bus.type == BusType.REFERENCE)

    @property
    def generator_buses(self) -> List[int]:
        """Sorted ids of buses hosting at least one generator"""
        return sorted({g.bus for g in self.generators})

    def generators_at(self, bus_id: int) -> List[int]:
        return [k for k, g in enumerate(self.generators) if g.bus == bus_id]

    def loads_at(self, bus_id: int) -> List[int]:
        return [k for k, load in enumerate(self.loads) if load.bus == bus_id]

    def res_at(self, bus_id: int) -> List[int]:
        return [k for k, unit in enumerate(self.res_units) if unit.bus == bus_id]

    def participation(self) -> np.ndarray:
        return np.array([g.participation or 0.0 for g in self.generators])

    def pair_keys(self) -> List[tuple]:
        """Unordered bus pairs joined by at least one branch, ordered by (low, high) id"""
        return sorted({tuple(sorted((br.from_bus, br.to_bus))) for br in self.branches})

    def to_mw(self, value: float) -> float:
        return value * self.base_mva
