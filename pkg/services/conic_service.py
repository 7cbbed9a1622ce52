from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from models.conic import ConeDims, ConicProgram, ConicSolution, SocBlock, StandardForm
from utils.exceptions import ModelBuildError, SolverError, UnknownConstraintError


class ProgramBuilder:
    """Incremental construction of a ConicProgram"""

    def __init__(self, name: str = "program"):
        self.name = name
        self._columns: List[str] = []
        self._index: Dict[str, int] = {}
        self._cost: List[float] = []
        self._lower: List[float] = []
        self._upper: List[float] = []
        self._offset = 0.0
        self._eq: List[Tuple[str, str, Dict[int, float], float]] = []
        self._in: List[Tuple[str, str, Dict[int, float], float]] = []
        self._cones: List[SocBlock] = []

    def add_var(self, name: str, lower: float = -np.inf, upper: float = np.inf, cost: float = 0.0) -> int:
        if name in self._index:
            raise ModelBuildError(f"{self.name}: duplicate variable {name}")
        self._index[name] = len(self._columns)
        self._columns.append(name)
        self._cost.append(cost)
        self._lower.append(lower)
        self._upper.append(upper)
        return self._index[name]

    def col(self, name: str) -> int:
        return self._index[name]

    def has(self, name: str) -> bool:
        return name in self._index

    def set_cost(self, col: int, cost: float):
        self._cost[col] = cost

    def add_offset(self, value: float):
        self._offset += value

    def add_eq(self, name: str, coeffs: Dict[int, float], rhs: float, block: str):
        self._eq.append((name, block, dict(coeffs), float(rhs)))

    def add_le(self, name: str, coeffs: Dict[int, float], rhs: float, block: str):
        self._in.append((name, block, dict(coeffs), float(rhs)))

    def add_range(self, name: str, coeffs: Dict[int, float], low: float, high: float, block: str):
        """low <= coeffs'x <= high as two rows; infinite sides are skipped"""
        if np.isfinite(high):
            self.add_le(f"{name}:ub", coeffs, high, block)
        if np.isfinite(low):
            self.add_le(f"{name}:lb", {k: -v for k, v in coeffs.items()}, -low, block)

    def add_soc(self, name: str, tail: Iterable[int], head: int):
        self._lower[head] = max(self._lower[head], 0.0)
        self._cones.append(SocBlock(name=name, tail=tuple(tail), head=head))

    @staticmethod
    def _matrix(rows, n: int) -> sp.csr_matrix:
        data, ri, ci = [], [], []
        for r, (_, _, coeffs, _) in enumerate(rows):
            for col, val in coeffs.items():
                if val != 0.0:
                    ri.append(r)
                    ci.append(col)
                    data.append(val)
        matrix = sp.coo_matrix((data, (ri, ci)), shape=(len(rows), n))
        return matrix.tocsr()

    def seal(self) -> ConicProgram:
        n = len(self._columns)
        return ConicProgram(
            c=np.array(self._cost, dtype=float),
            d=float(self._offset),
            a_eq=self._matrix(self._eq, n),
            b_eq=np.array([row[3] for row in self._eq], dtype=float),
            a_in=self._matrix(self._in, n),
            b_in=np.array([row[3] for row in self._in], dtype=float),
            cones=tuple(self._cones),
            lower=np.array(self._lower, dtype=float),
            upper=np.array(self._upper, dtype=float),
            columns=tuple(self._columns),
            eq_rows=tuple(row[0] for row in self._eq),
            in_rows=tuple(row[0] for row in self._in),
            eq_blocks=tuple(row[1] for row in self._eq),
            in_blocks=tuple(row[1] for row in self._in),
            name=self.name,
        )


class ConicService:
    def assemble_standard_form(self, program: ConicProgram) -> StandardForm:
        """Translate a program into min c'x s.t. Ax = b, Gx + s = h, s in K"""
        n = program.n_var
        if program.a_eq.shape[1] != n or program.a_in.shape[1] != n:
            raise ModelBuildError(f"{program.name}: constraint matrices do not match {n} columns")

        heads = {cone.head for cone in program.cones}
        blocks = [program.a_in]
        rhs = [program.b_in]
        names = list(program.in_rows)
        kinds = ["in"] * len(program.in_rows)

        lb_cols = [j for j in range(n) if np.isfinite(program.lower[j])
                   and not (j in heads and program.lower[j] == 0.0)]
        ub_cols = [j for j in range(n) if np.isfinite(program.upper[j])]
        if lb_cols:
            blocks.append(sp.csr_matrix((-np.ones(len(lb_cols)), (np.arange(len(lb_cols)), lb_cols)),
                                        shape=(len(lb_cols), n)))
            rhs.append(-program.lower[lb_cols])
            names += [f"lb:{program.columns[j]}" for j in lb_cols]
            kinds += ["lb"] * len(lb_cols)
        if ub_cols:
            blocks.append(sp.csr_matrix((np.ones(len(ub_cols)), (np.arange(len(ub_cols)), ub_cols)),
                                        shape=(len(ub_cols), n)))
            rhs.append(program.upper[ub_cols])
            names += [f"ub:{program.columns[j]}" for j in ub_cols]
            kinds += ["ub"] * len(ub_cols)
        n_linear = len(names)

        q = []
        for cone in program.cones:
            cols = cone.columns
            blocks.append(sp.csr_matrix((-np.ones(len(cols)), (np.arange(len(cols)), cols)),
                                        shape=(len(cols), n)))
            rhs.append(np.zeros(len(cols)))
            names += [f"soc:{cone.name}[{k}]" for k in range(len(cols))]
            kinds += ["soc"] * len(cols)
            q.append(len(cols))

        G = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
        return StandardForm(
            c=program.c.copy(),
            A=program.a_eq.tocsc(),
            b=program.b_eq.copy(),
            G=G,
            h=np.concatenate(rhs) if rhs else np.zeros(0),
            dims=ConeDims(l=n_linear, q=tuple(q)),
            offset=program.d,
            columns=program.columns,
            eq_names=program.eq_rows,
            g_names=tuple(names),
            g_kinds=tuple(kinds),
        )

    def named_values(self, program: ConicProgram, x: np.ndarray) -> Dict[str, float]:
        """Translate a primal vector back to model symbols"""
        return {name: float(x[k]) for k, name in enumerate(program.columns)}

    def extract_duals(self, solution: ConicSolution, program: ConicProgram,
                      form: Optional[StandardForm] = None) -> pd.DataFrame:
        """
        Named multiplier table. Equality multipliers follow the gradient
        convention (min x s.t. x = 3 gives +1); inequality, bound and cone
        multipliers are nonnegative / cone-feasible.
        """
        if not solution.optimal:
            raise SolverError(f"multipliers requested from a {solution.status.value} solution")
        form = form or self.assemble_standard_form(program)
        records = []
        for k, name in enumerate(program.eq_rows):
            records.append((name, "eq", program.eq_blocks[k], -float(solution.y[k])))
        in_blocks = iter(program.in_blocks)
        for k, (name, kind) in enumerate(zip(form.g_names, form.g_kinds)):
            if kind == "in":
                block = next(in_blocks)
            elif kind == "soc":
                block = "cone"
            else:
                block = "bounds"
            records.append((name, kind, block, float(solution.z[k])))
        table = pd.DataFrame.from_records(records, columns=["name", "kind", "block", "multiplier"])
        return table.set_index("name")

    @staticmethod
    def multiplier(table: pd.DataFrame, name: str) -> float:
        if name not in table.index:
            raise UnknownConstraintError(f"no constraint named {name}")
        return float(table.at[name, "multiplier"])

    def residuals(self, program: ConicProgram, x: np.ndarray) -> Dict[str, float]:
        """Maximum violation of each constraint family at a primal point"""
        eq = program.a_eq @ x - program.b_eq
        ineq = program.a_in @ x - program.b_in
        cone = [np.linalg.norm(x[list(c.tail)]) - x[c.head] for c in program.cones]
        return {
            "equality": float(np.max(np.abs(eq))) if eq.size else 0.0,
            "inequality": float(max(np.max(ineq), 0.0)) if ineq.size else 0.0,
            "bounds": float(max(np.max(program.lower - x), np.max(x - program.upper), 0.0)),
            "cone": float(max(max(cone), 0.0)) if cone else 0.0,
        }

    def dump_program(self, program: ConicProgram) -> str:
        """Plain-text dump for diffing and external cross-checks"""
        def row_text(matrix, r):
            start, end = matrix.indptr[r], matrix.indptr[r + 1]
            terms = [f"{matrix.data[k]:+.12g} {program.columns[matrix.indices[k]]}" for k in range(start, end)]
            return " ".join(terms) if terms else "0"

        lines = [f"program {program.name}", f"variables {program.n_var}"]
        objective = [f"{program.c[j]:+.12g} {name}" for j, name in enumerate(program.columns) if program.c[j] != 0]
        lines.append(f"minimize {' '.join(objective) or '0'} {program.d:+.12g}")
        for r, name in enumerate(program.eq_rows):
            lines.append(f"eq {name} [{program.eq_blocks[r]}]: {row_text(program.a_eq, r)} = {program.b_eq[r]:.12g}")
        for r, name in enumerate(program.in_rows):
            lines.append(f"le {name} [{program.in_blocks[r]}]: {row_text(program.a_in, r)} <= {program.b_in[r]:.12g}")
        for j, name in enumerate(program.columns):
            if np.isfinite(program.lower[j]) or np.isfinite(program.upper[j]):
                lines.append(f"bound {name}: [{program.lower[j]:.12g}, {program.upper[j]:.12g}]")
        for cone in program.cones:
            tail = ", ".join(program.columns[k] for k in cone.tail)
            lines.append(f"soc {cone.name}: ||({tail})|| <= {program.columns[cone.head]}")
        return "\n".join(lines) + "\n"
