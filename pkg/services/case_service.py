import io
import json
import math
import os
import re
from typing import Dict, IO, List, Optional, Union

import numpy as np
import scipy.sparse as sp
from pydantic import ValidationError

from config import get_settings
from models.case import (
    DEFAULT_ANGLE_DIFF_LIMIT,
    BusType,
    NetworkCase,
    ResUnit,
)
from utils.exceptions import CaseFormatError, CaseValidationError, ModelBuildError
from utils.helpers import case_format, stable_json_dumps
from utils.log import log

CASE_FORMATS = ("mcase", "native-json")
NATIVE_FORMAT_TAG = "robust-acopf-case"

_BLOCK_START = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
_SCALAR = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[;]+);")

# MATPOWER column positions
BUS_COLUMNS = {"id": 0, "type": 1, "pd": 2, "qd": 3, "gs": 4, "bs": 5, "vmax": 11, "vmin": 12}
GEN_COLUMNS = {"bus": 0, "qmax": 3, "qmin": 4, "status": 7, "pmax": 8, "pmin": 9}
BRANCH_COLUMNS = {"f": 0, "t": 1, "r": 2, "x": 3, "b": 4, "rate_a": 5, "tap": 8, "shift": 9,
                  "status": 10, "angmin": 11, "angmax": 12}


class CaseService:
    def __init__(self, settings=None):
        self.settings = settings or get_settings()

    def load_case(self, path: str, fmt: Optional[str] = None, **options) -> NetworkCase:
        """Read a case file, inferring the format from the extension when not given"""
        if fmt is None:
            fmt = case_format(path)
            if fmt is None:
                raise CaseFormatError("cannot infer case format from extension", location=path)
        with open(path, "rb") as handle:
            name = os.path.splitext(os.path.basename(path))[0]
            return self.parse_case(handle, fmt, name=name, source_name=path, **options)

    def parse_case(self, source: Union[bytes, str, IO], fmt: str, name: str = "case",
                   source_name: str = "<input>", linearize_quadratic: bool = False) -> NetworkCase:
        """Parse a case in MATPOWER subset or native JSON format into a validated per-unit case"""
        if fmt not in CASE_FORMATS:
            raise CaseFormatError(f"unknown case format {fmt!r}; expected one of {CASE_FORMATS}")
        if hasattr(source, "read"):
            source = source.read()
        if isinstance(source, bytes):
            try:
                source = source.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CaseFormatError(f"not UTF-8 text: {e}", location=source_name)

        if fmt == "mcase":
            raw = self._parse_mcase(source, name, source_name, linearize_quadratic)
        else:
            raw = self._parse_native(source, source_name)
        return self._finalize(raw)

    def dump_case(self, case: NetworkCase) -> str:
        """Canonical native JSON with stable key order"""
        payload = case.model_dump(mode="json")
        payload["format"] = NATIVE_FORMAT_TAG
        return stable_json_dumps(payload)

    def _parse_native(self, text: str, source_name: str) -> Dict:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise CaseFormatError(e.msg, location=f"{source_name}:{e.lineno}:{e.colno}")
        if not isinstance(data, dict):
            raise CaseFormatError("top-level JSON value must be an object", location=source_name)
        data = dict(data)
        tag = data.pop("format", NATIVE_FORMAT_TAG)
        if tag != NATIVE_FORMAT_TAG:
            raise CaseFormatError(f"unexpected format tag {tag!r}", location=source_name)
        return data

    def _parse_mcase(self, text: str, name: str, source_name: str, linearize_quadratic: bool) -> Dict:
        tables: Dict[str, List[List[float]]] = {}
        scalars: Dict[str, float] = {}
        current, rows = None, []

        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("%", 1)[0].strip()
            if not line:
                continue
            location = f"{source_name}:{lineno}"
            if current is None:
                start = _BLOCK_START.match(line)
                if start:
                    current, rows = start.group(1), []
                    line = start.group(2)
                else:
                    scalar = _SCALAR.match(line)
                    if scalar:
                        value = scalar.group(2).strip().strip("'\"")
                        try:
                            scalars[scalar.group(1)] = float(value)
                        except ValueError:
                            scalars[scalar.group(1)] = value
                    continue
            closing = "]" in line
            body = line.split("]", 1)[0]
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append([float(token) for token in tokens])
                except ValueError:
                    raise CaseFormatError(f"non-numeric entry in mpc.{current}", location=location)
            if closing:
                tables[current] = rows
                current = None
        if current is not None:
            raise CaseFormatError(f"unterminated matrix mpc.{current}", location=source_name)

        for required in ("bus", "gen", "branch", "gencost"):
            if required not in tables:
                raise CaseFormatError(f"missing mpc.{required} table", location=source_name)
        base = scalars.get("baseMVA", 100.0)
        if not isinstance(base, float):
            raise CaseFormatError("baseMVA is not numeric", location=source_name)

        self._check_width(tables["bus"], 13, "bus", source_name)
        self._check_width(tables["gen"], 10, "gen", source_name)
        self._check_width(tables["branch"], 11, "branch", source_name)

        gen_rows = [row for row in tables["gen"]]
        cost_rows = tables["gencost"][: len(gen_rows)]
        if len(cost_rows) < len(gen_rows):
            raise CaseFormatError("gencost has fewer rows than gen", location=source_name)

        generators, gen_buses = [], set()
        for k, (row, cost) in enumerate(zip(gen_rows, cost_rows)):
            if row[GEN_COLUMNS["status"]] <= 0:
                continue
            p_max = row[GEN_COLUMNS["pmax"]] / base
            p_min = row[GEN_COLUMNS["pmin"]] / base
            a, b = self._linear_cost(cost, base, p_min, p_max, linearize_quadratic, f"{source_name}:gencost[{k + 1}]")
            bus_id = int(row[GEN_COLUMNS["bus"]])
            gen_buses.add(bus_id)
            generators.append({
                "bus": bus_id, "a": a, "b": b, "p_min": p_min, "p_max": p_max,
                "q_min": row[GEN_COLUMNS["qmin"]] / base, "q_max": row[GEN_COLUMNS["qmax"]] / base,
            })

        buses, loads = [], []
        for row in tables["bus"]:
            bus_id = int(row[BUS_COLUMNS["id"]])
            code = int(row[BUS_COLUMNS["type"]])
            if code == 4:
                raise CaseValidationError(f"bus {bus_id} is isolated", field="bus.type")
            if code == 3:
                bus_type = BusType.REFERENCE
            elif bus_id in gen_buses:
                bus_type = BusType.GENERATOR
            else:
                bus_type = BusType.LOAD_ONLY
            buses.append({
                "id": bus_id, "type": bus_type, "v_min": row[BUS_COLUMNS["vmin"]], "v_max": row[BUS_COLUMNS["vmax"]],
                "gs": row[BUS_COLUMNS["gs"]] / base, "bs": row[BUS_COLUMNS["bs"]] / base,
            })
            p_d, q_d = row[BUS_COLUMNS["pd"]] / base, row[BUS_COLUMNS["qd"]] / base
            if p_d != 0 or q_d != 0:
                loads.append({"bus": bus_id, "p_d": p_d, "q_d": q_d})

        branches = []
        for row in tables["branch"]:
            if row[BRANCH_COLUMNS["status"]] <= 0:
                continue
            branch = {
                "from_bus": int(row[BRANCH_COLUMNS["f"]]), "to_bus": int(row[BRANCH_COLUMNS["t"]]),
                "r": row[BRANCH_COLUMNS["r"]], "x": row[BRANCH_COLUMNS["x"]], "b_sh": row[BRANCH_COLUMNS["b"]],
                "tap_ratio": row[BRANCH_COLUMNS["tap"]] or 1.0,
                "tap_shift": math.radians(row[BRANCH_COLUMNS["shift"]]),
                "p_max": row[BRANCH_COLUMNS["rate_a"]] / base,
                "theta_diff_max": DEFAULT_ANGLE_DIFF_LIMIT,
            }
            if len(row) > BRANCH_COLUMNS["angmax"]:
                low, high = row[BRANCH_COLUMNS["angmin"]], row[BRANCH_COLUMNS["angmax"]]
                unlimited = (low <= -360 and high >= 360) or (low == 0 and high == 0)
                if not unlimited:
                    branch["theta_diff_max"] = math.radians(min(abs(low), abs(high)))
            branches.append(branch)

        return {"name": name, "base_mva": base, "buses": buses, "branches": branches,
                "generators": generators, "loads": loads, "res_units": []}

    @staticmethod
    def _check_width(rows: List[List[float]], width: int, table: str, source_name: str):
        for k, row in enumerate(rows):
            if len(row) < width:
                raise CaseFormatError(f"mpc.{table} row {k + 1} has {len(row)} columns, need {width}",
                                      location=source_name)

    @staticmethod
    def _linear_cost(cost: List[float], base: float, p_min: float, p_max: float,
                     linearize_quadratic: bool, location: str):
        """Return (a in $/pu-h, b in $/h) from a polynomial gencost row"""
        if int(cost[0]) != 2:
            raise CaseFormatError("only polynomial cost rows (model 2) are supported", location=location)
        n_cost = int(cost[3])
        coefficients = cost[4:4 + n_cost]
        if len(coefficients) != n_cost:
            raise CaseFormatError("gencost row is shorter than NCOST", location=location)
        # highest order first, MW units
        padded = [0.0] * (3 - n_cost) + list(coefficients) if n_cost <= 3 else None
        if padded is None or any(c != 0 for c in coefficients[: max(n_cost - 3, 0)]):
            raise CaseFormatError("cost polynomials above degree 2 are not supported", location=location)
        c2, c1, c0 = padded[-3] * base ** 2, padded[-2] * base, padded[-1]
        if c2 != 0:
            if not linearize_quadratic:
                raise CaseFormatError("quadratic cost row; enable linearize_quadratic to use the tangent at p_max/2",
                                      location=location)
            p0 = 0.5 * p_max
            # the intercept is clipped at zero to keep b >= 0
            return 2.0 * c2 * p0 + c1, max(c0 - c2 * p0 ** 2, 0.0)
        return c1, c0

    def _finalize(self, raw: Dict) -> NetworkCase:
        """Sort by bus id, fill participation and ramp defaults and validate"""
        raw = dict(raw)
        raw["buses"] = sorted(raw.get("buses", []), key=lambda bus: bus["id"])
        for key in ("generators", "loads", "res_units"):
            raw[key] = sorted(raw.get(key, []), key=lambda item: item["bus"])
        raw["branches"] = sorted(raw.get("branches", []), key=lambda br: (min(br["from_bus"], br["to_bus"]),
                                                                          max(br["from_bus"], br["to_bus"])))
        generators = [dict(g) for g in raw["generators"]]
        if any(g.get("participation") is None for g in generators):
            dispatchable = [g["p_max"] > g["p_min"] and g["a"] > 0 for g in generators]
            if not any(dispatchable):
                raise CaseValidationError("no dispatchable generator to absorb mismatch", field="generators")
            inverse = [1.0 / g["a"] if ok else 0.0 for g, ok in zip(generators, dispatchable)]
            total = sum(inverse)
            for g, weight in zip(generators, inverse):
                g["participation"] = weight / total
        for g in generators:
            if g.get("ramp_limit") is None:
                g["ramp_limit"] = self.settings.RAMP_FRACTION * max(g["p_max"], 0.0)
        raw["generators"] = generators
        try:
            return NetworkCase.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(part) for part in first.get("loc", ()))
            raise CaseValidationError(first.get("msg", str(e)), field=field or None)

    def build_admittance(self, case: NetworkCase) -> sp.csr_matrix:
        """Complex bus admittance matrix G + jB with from-side tap convention"""
        index = case.bus_index
        n = case.n_bus
        rows, cols, vals = [], [], []
        for branch in case.branches:
            if branch.r == 0 and branch.x == 0:
                raise ModelBuildError(f"branch {branch.from_bus}-{branch.to_bus} has zero series impedance")
            f, t = index[branch.from_bus], index[branch.to_bus]
            y_ff, y_ft, y_tf, y_tt = branch.admittances()
            rows += [f, f, t, t]
            cols += [f, t, f, t]
            vals += [y_ff, y_ft, y_tf, y_tt]
        for k, bus in enumerate(case.buses):
            if bus.gs or bus.bs:
                rows.append(k)
                cols.append(k)
                vals.append(complex(bus.gs, bus.bs))
        return sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()

    def place_res(self, case: NetworkCase, penetration: float, seed: int = 0,
                  placement: str = "largest-load", rating_factor: Optional[float] = None) -> NetworkCase:
        """Add RES units at load buses until their output equals penetration x conventional capacity"""
        if not 0.0 <= penetration <= 1.0:
            raise CaseValidationError("penetration must lie in [0, 1]", field="penetration")
        if penetration == 0.0:
            return case
        rating_factor = rating_factor or self.settings.RES_RATING_FACTOR
        target = penetration * sum(g.p_max for g in case.generators)

        bus_load: Dict[int, float] = {}
        for load in case.loads:
            bus_load[load.bus] = bus_load.get(load.bus, 0.0) + load.p_d
        order = sorted((bus for bus, p in bus_load.items() if p > 0), key=lambda bus: (-bus_load[bus], bus))
        if placement == "random":
            order = [order[k] for k in np.random.default_rng(seed).permutation(len(order))]
        elif placement != "largest-load":
            raise CaseValidationError(f"unknown placement rule {placement!r}", field="placement")
        if not order:
            log("No load buses available for RES placement; case unchanged", "warning")
            return case

        placed, remaining = [], target
        for bus in order:
            amount = min(bus_load[bus], remaining)
            if amount <= 0:
                break
            placed.append([bus, amount])
            remaining -= amount
        if remaining > 1e-12:
            scale = target / sum(amount for _, amount in placed)
            log(f"RES target {target:.4f} pu exceeds load-bus hosting capacity; scaling units by {scale:.4f}", "warning")
            placed = [[bus, amount * scale] for bus, amount in placed]

        units = list(case.res_units) + [
            ResUnit(bus=bus, p_r=amount, s_max=rating_factor * amount) for bus, amount in placed
        ]
        units.sort(key=lambda unit: unit.bus)
        return case.model_copy(update={"res_units": units})

    def apply_ramp_limits(self, case: NetworkCase, fraction: Optional[float] = None, mode: Optional[str] = None,
                          base_points: Optional[np.ndarray] = None) -> NetworkCase:
        """Set every generator's ramp limit from p_max (scaled) or from a base-point dispatch (literal)"""
        fraction = self.settings.RAMP_FRACTION if fraction is None else fraction
        mode = mode or self.settings.RAMP_MODE
        if mode == "scaled":
            limits = [fraction * max(g.p_max, 0.0) for g in case.generators]
        elif mode == "literal":
            if base_points is None or len(base_points) != len(case.generators):
                raise ModelBuildError("literal ramp mode needs one base point per generator")
            limits = [fraction * abs(float(p)) for p in base_points]
        else:
            raise ModelBuildError(f"unknown ramp mode {mode!r}")
        generators = [g.model_copy(update={"ramp_limit": limit}) for g, limit in zip(case.generators, limits)]
        return case.model_copy(update={"generators": generators})


def read_text(source: Union[str, bytes]) -> io.BytesIO:
    """Wrap in-memory case text as a byte stream"""
    return io.BytesIO(source.encode("utf-8") if isinstance(source, str) else source)
