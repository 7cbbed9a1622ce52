import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import ValidationError

from config import get_settings
from models.case import NetworkCase
from models.conic import ConicProgram, ConicSolution, SolverSettings, StandardForm
from models.robust import RobustBlocks
from models.uncertainty import InjectionKind, UncertainInjection, UncertaintySpec
from services.case_service import CaseService
from services.conic_service import ConicService, ProgramBuilder
from services.ipm_service import get_solver
from utils.exceptions import ModelBuildError, UncertaintyError
from utils.log import log

OBJECTIVES = ("cost", "max_q", "min_q", "max_q_hat", "min_q_hat")


@dataclass
class _Layout:
    """Column groups of a built program"""
    x: List[str] = field(default_factory=list)
    y: List[str] = field(default_factory=list)
    yc: List[str] = field(default_factory=list)
    y_hat: List[str] = field(default_factory=list)
    yc_hat: List[str] = field(default_factory=list)


def pair_name(pair: Tuple[int, int]) -> str:
    return f"{pair[0]},{pair[1]}"


def x_columns(case: NetworkCase) -> List[str]:
    """Setpoint columns: base-point P_g of every generator and c_ii of every generator bus"""
    return [f"Pg[{k}]" for k in range(len(case.generators))] + [f"cii[{bus}]" for bus in case.generator_buses]


class OpfService:
    def __init__(self, settings=None, case_service: Optional[CaseService] = None,
                 conic_service: Optional[ConicService] = None, solver=None):
        self.settings = settings or get_settings()
        self.case_service = case_service or CaseService(self.settings)
        self.conic_service = conic_service or ConicService()
        self.solver = solver

    def build_uncertainty(self, case: NetworkCase, load_fraction: float = 0.0, res_fraction: float = 0.0,
                          gamma: Optional[int] = None, big_m: Optional[float] = None) -> UncertaintySpec:
        """Symmetric box with half-widths given as fractions of the nominal injections"""
        for label, value in (("load", load_fraction), ("RES", res_fraction)):
            if not 0.0 <= value <= 1.0:
                raise UncertaintyError(f"{label} uncertainty fraction {value} outside [0, 1]")
            if value > self.settings.UNCERTAINTY_WARN_LEVEL:
                log(f"{label} uncertainty {value:.0%} is beyond the short-term range this model targets", "warning")

        coordinates = []
        for k, load in enumerate(case.loads):
            if load_fraction * load.p_d > 0:
                coordinates.append(UncertainInjection(kind=InjectionKind.LOAD, index=k, bus=load.bus,
                                                      nominal=load.p_d, mu_bar=load_fraction * load.p_d))
        for k, unit in enumerate(case.res_units):
            if res_fraction * unit.p_r > 0:
                coordinates.append(UncertainInjection(kind=InjectionKind.RES, index=k, bus=unit.bus,
                                                      nominal=unit.p_r, mu_bar=res_fraction * unit.p_r))
        try:
            return UncertaintySpec(coordinates=coordinates, gamma=gamma, big_m=big_m)
        except ValidationError as e:
            raise UncertaintyError(e.errors()[0].get("msg", str(e)))

    def build_deterministic(self, case: NetworkCase, eps_theta: Optional[float] = None, objective: str = "cost",
                            fix_x: Optional[Dict[str, float]] = None) -> ConicProgram:
        """SOC-relaxed ACOPF with the linearized arctangent band"""
        program, _ = self._build(case, eps_theta, robust=False, objective=objective, fix_x=fix_x)
        return program

    def build_robust_primal(self, case: NetworkCase, unc: UncertaintySpec, mu: Sequence[float],
                            eps_theta: Optional[float] = None, participation: str = "fixed",
                            psi_fixed: Optional[float] = None, fix_x: Optional[Dict[str, float]] = None,
                            objective: str = "cost") -> ConicProgram:
        """
        Base-case and worst-case network blocks sharing the setpoints x and
        the mismatch psi, for a fixed deviation vector mu.

        With participation="variable" the factors rho become columns and psi
        is frozen at psi_fixed, so every rho * psi term stays linear.
        """
        program, _ = self._build(case, eps_theta, robust=True, unc=unc, mu=mu, participation=participation,
                                 psi_fixed=psi_fixed, objective=objective, fix_x=fix_x)
        return program

    def assemble_robust_blocks(self, case: NetworkCase, unc: UncertaintySpec,
                               eps_theta: Optional[float] = None) -> RobustBlocks:
        """Slice the robust primal at mu = 0 into its named matrix blocks"""
        program, layout = self._build(case, eps_theta, robust=True, unc=unc, mu=np.zeros(unc.size))
        sensitivity = self.mu_sensitivity(program, case, unc)
        col = program.index

        def cols(names):
            return [col[name] for name in names]

        def rows(block, kind):
            return program.rows_in_block(block, kind)

        balance, link, limits = rows("balance", "eq"), rows("link", "eq"), rows("limits", "in")
        balance_hat, limits_hat, ramp = rows("balance_hat", "eq"), rows("limits_hat", "in"), rows("ramp", "in")
        a_eq, a_in = program.a_eq.tocsr(), program.a_in.tocsr()
        x, y, psi = cols(layout.x), cols(layout.y), col["psi"]

        return RobustBlocks(
            program=program,
            x_columns=tuple(layout.x),
            y_columns=tuple(layout.y),
            yc_columns=tuple(layout.yc),
            y_hat_columns=tuple(layout.y_hat),
            yc_hat_columns=tuple(layout.yc_hat),
            psi_column="psi",
            coordinate_names=tuple(unc.names),
            P=a_eq[balance][:, x],
            Q=a_eq[balance][:, y],
            f=program.b_eq[balance],
            M=a_in[limits][:, x],
            N=a_in[limits][:, y],
            e=program.b_in[limits],
            V=a_eq[link][:, x],
            W=a_eq[link][:, y],
            e_hat=program.b_in[limits_hat],
            h_E=a_eq[balance_hat][:, psi].toarray().ravel(),
            h_I=a_in[limits_hat][:, psi].toarray().ravel(),
            K_E=-sensitivity[balance_hat],
            h_r=a_in[ramp][:, psi].toarray().ravel(),
            r=program.b_in[ramp],
            limit_rows=tuple(program.in_rows[k] for k in limits),
            limit_hat_rows=tuple(program.in_rows[k] for k in limits_hat),
            balance_hat_rows=tuple(program.eq_rows[k] for k in balance_hat),
        )

    @staticmethod
    def blocks_summary(blocks: RobustBlocks) -> Dict:
        """Dimensions of every block, for debugging output"""
        summary = {"columns": {
            "x": len(blocks.x_columns), "y": len(blocks.y_columns), "y_c": len(blocks.yc_columns),
            "y_hat": len(blocks.y_hat_columns), "y_c_hat": len(blocks.yc_hat_columns), "psi": 1,
        }, "uncertain": len(blocks.coordinate_names)}
        for name in ("P", "Q", "M", "N", "V", "W", "K_E"):
            matrix = getattr(blocks, name)
            summary[name] = {"shape": list(matrix.shape), "nnz": int(matrix.nnz)}
        for name in ("f", "e", "e_hat", "h_E", "h_I", "h_r", "r"):
            summary[name] = {"length": int(getattr(blocks, name).shape[0])}
        return summary

    @staticmethod
    def mu_sensitivity(program: ConicProgram, case: NetworkCase, unc: UncertaintySpec) -> sp.csr_matrix:
        """B with b_eq(mu) = b_eq(0) + B mu on the worst-case balance rows"""
        row = {name: k for k, name in enumerate(program.eq_rows)}
        data, ri, ci = [], [], []
        for j, coordinate in enumerate(unc.coordinates):
            for name, value in OpfService._coordinate_rows(case, coordinate):
                if name not in row:
                    raise ModelBuildError(f"{program.name}: no balance row {name} for {coordinate.name}")
                if value != 0.0:
                    ri.append(row[name])
                    ci.append(j)
                    data.append(value)
        return sp.coo_matrix((data, (ri, ci)), shape=(len(program.eq_rows), unc.size)).tocsr()

    @staticmethod
    def _coordinate_rows(case: NetworkCase, coordinate: UncertainInjection) -> List[Tuple[str, float]]:
        if coordinate.kind == InjectionKind.LOAD:
            load = case.loads[coordinate.index]
            return [(f"Pbal_hat[{load.bus}]", 1.0), (f"Qbal_hat[{load.bus}]", load.lr)]
        unit = case.res_units[coordinate.index]
        return [(f"Pbal_hat[{unit.bus}]", -1.0)]

    def solve(self, program: ConicProgram,
              settings: Optional[SolverSettings] = None) -> Tuple[ConicSolution, StandardForm]:
        form = self.conic_service.assemble_standard_form(program)
        solver = self.solver or get_solver(settings)
        return solver.solve(form, settings), form

    @staticmethod
    def operating_point(case: NetworkCase, program: ConicProgram, x: np.ndarray) -> Dict[str, List[float]]:
        """Setpoints and RES reactive schedule read from a primal vector"""
        return {
            "p_g": [program.value(x, f"Pg[{k}]") for k in range(len(case.generators))],
            "c_ii": [program.value(x, f"cii[{g.bus}]") for g in case.generators],
            "q_r": [program.value(x, f"Qr[{k}]") for k in range(len(case.res_units))],
        }

    def _build(self, case: NetworkCase, eps_theta: Optional[float], robust: bool,
               unc: Optional[UncertaintySpec] = None, mu: Optional[Sequence[float]] = None,
               participation: str = "fixed", psi_fixed: Optional[float] = None, objective: str = "cost",
               fix_x: Optional[Dict[str, float]] = None) -> Tuple[ConicProgram, _Layout]:
        eps_theta = self.settings.EPS_THETA if eps_theta is None else eps_theta
        if eps_theta <= 0:
            raise ModelBuildError("eps_theta must be positive")
        if objective not in OBJECTIVES:
            raise ModelBuildError(f"unknown objective {objective!r}")
        if participation not in ("fixed", "variable"):
            raise ModelBuildError(f"unknown participation mode {participation!r}")
        if not robust and objective.endswith("_hat"):
            raise ModelBuildError("worst-case reactive objective needs the robust model")

        ybus = self.case_service.build_admittance(case).tocsr()
        builder = ProgramBuilder(f"{'robust' if robust else 'deterministic'}:{case.name}")
        layout = _Layout()

        for k, gen in enumerate(case.generators):
            builder.add_var(f"Pg[{k}]", cost=gen.a if objective == "cost" else 0.0)
            layout.x.append(f"Pg[{k}]")
        for bus in case.generator_buses:
            builder.add_var(f"cii[{bus}]")
            layout.x.append(f"cii[{bus}]")
        if objective == "cost":
            builder.add_offset(sum(g.b for g in case.generators))

        base_res = [unit.q_limit for unit in case.res_units]
        self._add_block(builder, case, ybus, eps_theta, "", layout.y, layout.yc, base_res, objective)

        if robust:
            if unc is None or mu is None:
                raise ModelBuildError("robust model needs an uncertainty set and a deviation vector")
            mu = np.asarray(mu, dtype=float)
            if mu.shape != (unc.size,):
                raise ModelBuildError(f"deviation vector has length {mu.size}, uncertainty set has {unc.size}")
            shift: Dict[str, float] = defaultdict(float)
            for coordinate, value in zip(unc.coordinates, mu):
                for name, coefficient in self._coordinate_rows(case, coordinate):
                    shift[name] += coefficient * value

            agc = self._add_agc(builder, case, participation, psi_fixed)
            hat_res = self._worst_case_res_bounds(case, unc)
            self._add_block(builder, case, ybus, eps_theta, "_hat", layout.y_hat, layout.yc_hat, hat_res,
                            objective, agc=agc, shift=shift)

        if fix_x:
            tol = self.settings.EXACTNESS_FIX_TOL
            for name, value in fix_x.items():
                if not builder.has(name):
                    raise ModelBuildError(f"cannot fix unknown column {name}")
                builder.add_range(f"fix[{name}]", {builder.col(name): 1.0}, value - tol, value + tol, "fix")

        return builder.seal(), layout

    def _add_agc(self, builder: ProgramBuilder, case: NetworkCase, participation: str,
                 psi_fixed: Optional[float]) -> List[Dict[int, float]]:
        """Per-generator linear expression of the AGC response rho_k * psi"""
        if participation == "fixed":
            psi = builder.add_var("psi")
            rho = case.participation()
            return [{psi: float(rho[k])} if rho[k] != 0 else {} for k in range(len(case.generators))]

        if psi_fixed is None:
            raise ModelBuildError("variable participation needs a frozen psi")
        columns = [builder.add_var(f"rho[{k}]") for k in range(len(case.generators))]
        builder.add_eq("rho_sum", {col: 1.0 for col in columns}, 1.0, "participation")
        for k, col in enumerate(columns):
            builder.add_le(f"rho[{k}]:lb", {col: -1.0}, 0.0, "participation")
        return [{col: float(psi_fixed)} if psi_fixed != 0 else {} for col in columns]

    @staticmethod
    def _worst_case_res_bounds(case: NetworkCase, unc: UncertaintySpec) -> List[float]:
        bounds = []
        for k, (unit, mu_bar) in enumerate(zip(case.res_units, unc.res_mu_bar(len(case.res_units)))):
            reach = unit.s_max ** 2 - (unit.p_r + mu_bar) ** 2
            if reach < 0:
                raise ModelBuildError(
                    f"RES unit {k} at bus {unit.bus}: p_r + mu_bar = {unit.p_r + mu_bar:.4f} exceeds "
                    f"rating {unit.s_max:.4f}; raise the rating factor or shrink the RES uncertainty")
            bounds.append(math.sqrt(reach))
        return bounds

    @staticmethod
    def _add_block(builder: ProgramBuilder, case: NetworkCase, ybus: sp.csr_matrix, eps_theta: float, sfx: str,
                   y_cols: List[str], yc_cols: List[str], res_bounds: List[float], objective: str,
                   agc: Optional[List[Dict[int, float]]] = None, shift: Optional[Dict[str, float]] = None):
        """
        One network block. The base block (sfx "") and the worst-case block
        (sfx "_hat") emit rows in the same order; the worst-case block reuses
        P_g and the generator-bus c_ii columns.
        """
        shift = shift or {}
        hatted = bool(sfx)
        balance, link, limits = f"balance{sfx}", f"link{sfx}", f"limits{sfx}"
        gen_buses = set(case.generator_buses)
        q_cost = {"max_q": -1.0, "min_q": 1.0} if not hatted else {"max_q_hat": -1.0, "min_q_hat": 1.0}

        def var(name: str, cone: bool = False, cost: float = 0.0) -> int:
            index = builder.add_var(name, cost=cost)
            (yc_cols if cone else y_cols).append(name)
            return index

        for k in range(len(case.generators)):
            var(f"Qg{sfx}[{k}]", cost=q_cost.get(objective, 0.0))
        for k in range(len(case.res_units)):
            var(f"Qr{sfx}[{k}]")
        cii = {}
        for bus in case.buses:
            if bus.id in gen_buses:
                cii[bus.id] = builder.col(f"cii[{bus.id}]")
            else:
                cii[bus.id] = var(f"cii{sfx}[{bus.id}]")
        theta = {bus.id: var(f"theta{sfx}[{bus.id}]") for bus in case.buses}
        p_inj = {bus.id: var(f"Pi{sfx}[{bus.id}]") for bus in case.buses}
        q_inj = {bus.id: var(f"Qi{sfx}[{bus.id}]") for bus in case.buses}

        pairs = case.pair_keys()
        c, s = {}, {}
        for pair in pairs:
            c[pair] = var(f"c{sfx}[{pair_name(pair)}]")
            s[pair] = var(f"s{sfx}[{pair_name(pair)}]")
        cone_cols = {}
        for pair in pairs:
            cone_cols[pair] = [var(f"{tag}{sfx}[{pair_name(pair)}]", cone=True) for tag in "CSED"]
        p_ft = [var(f"Pft{sfx}[{k}]") for k in range(len(case.branches))]
        p_tf = [var(f"Ptf{sfx}[{k}]") for k in range(len(case.branches))]

        index = case.bus_index
        neighbours: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
        for pair in pairs:
            neighbours[pair[0]].append(pair)
            neighbours[pair[1]].append(pair)

        def acc(coeffs: Dict[int, float], col: int, value: float):
            coeffs[col] = coeffs.get(col, 0.0) + value

        # nodal balances
        for bus in case.buses:
            row = {p_inj[bus.id]: -1.0}
            for k in case.generators_at(bus.id):
                acc(row, builder.col(f"Pg[{k}]"), 1.0)
                for col, value in (agc[k] if agc else {}).items():
                    acc(row, col, value)
            rhs = sum(case.loads[k].p_d for k in case.loads_at(bus.id))
            rhs -= sum(case.res_units[k].p_r for k in case.res_at(bus.id))
            name = f"Pbal{sfx}[{bus.id}]"
            builder.add_eq(name, row, rhs + shift.get(name, 0.0), balance)
        for bus in case.buses:
            row = {q_inj[bus.id]: -1.0}
            for k in case.generators_at(bus.id):
                acc(row, builder.col(f"Qg{sfx}[{k}]"), 1.0)
            for k in case.res_at(bus.id):
                acc(row, builder.col(f"Qr{sfx}[{k}]"), 1.0)
            rhs = sum(case.loads[k].q_d for k in case.loads_at(bus.id))
            name = f"Qbal{sfx}[{bus.id}]"
            builder.add_eq(name, row, rhs + shift.get(name, 0.0), balance)

        # injections from the admittance matrix
        for bus in case.buses:
            i = index[bus.id]
            y_ii = ybus[i, i]
            p_row = {p_inj[bus.id]: -1.0}
            q_row = {q_inj[bus.id]: -1.0}
            acc(p_row, cii[bus.id], y_ii.real)
            acc(q_row, cii[bus.id], -y_ii.imag)
            for pair in neighbours[bus.id]:
                other = pair[1] if pair[0] == bus.id else pair[0]
                y_ij = ybus[i, index[other]]
                sign = 1.0 if pair[0] == bus.id else -1.0
                acc(p_row, c[pair], y_ij.real)
                acc(p_row, s[pair], sign * y_ij.imag)
                acc(q_row, s[pair], sign * y_ij.real)
                acc(q_row, c[pair], -y_ij.imag)
            builder.add_eq(f"Pinj{sfx}[{bus.id}]", p_row, 0.0, balance)
            builder.add_eq(f"Qinj{sfx}[{bus.id}]", q_row, 0.0, balance)

        # branch flows
        for k, branch in enumerate(case.branches):
            pair = tuple(sorted((branch.from_bus, branch.to_bus)))
            sign = 1.0 if pair[0] == branch.from_bus else -1.0
            y_ff, y_ft, y_tf, y_tt = branch.admittances()
            row = {p_ft[k]: -1.0}
            acc(row, cii[branch.from_bus], y_ff.real)
            acc(row, c[pair], y_ft.real)
            acc(row, s[pair], sign * y_ft.imag)
            builder.add_eq(f"Pft{sfx}[{k}]", row, 0.0, balance)
            row = {p_tf[k]: -1.0}
            acc(row, cii[branch.to_bus], y_tt.real)
            acc(row, c[pair], y_tf.real)
            acc(row, s[pair], -sign * y_tf.imag)
            builder.add_eq(f"Ptf{sfx}[{k}]", row, 0.0, balance)

        builder.add_eq(f"theta_ref{sfx}", {theta[case.reference_bus.id]: 1.0}, 0.0, balance)

        # rotated-cone linkage
        for pair in pairs:
            big_c, big_s, big_e, big_d = cone_cols[pair]
            a, b = pair
            tag = pair_name(pair)
            builder.add_eq(f"linkC{sfx}[{tag}]", {big_c: 1.0, c[pair]: -2.0}, 0.0, link)
            builder.add_eq(f"linkS{sfx}[{tag}]", {big_s: 1.0, s[pair]: -2.0}, 0.0, link)
            builder.add_eq(f"linkE{sfx}[{tag}]", {big_e: 1.0, cii[a]: -1.0, cii[b]: 1.0}, 0.0, link)
            builder.add_eq(f"linkD{sfx}[{tag}]", {big_d: 1.0, cii[a]: -1.0, cii[b]: -1.0}, 0.0, link)

        # limits
        for k, gen in enumerate(case.generators):
            row = {builder.col(f"Pg[{k}]"): 1.0}
            for col, value in (agc[k] if agc else {}).items():
                acc(row, col, value)
            builder.add_range(f"Pg{sfx}[{k}]", row, gen.p_min, gen.p_max, limits)
        for k, gen in enumerate(case.generators):
            builder.add_range(f"Qg{sfx}[{k}]", {builder.col(f"Qg{sfx}[{k}]"): 1.0}, gen.q_min, gen.q_max, limits)
        for k, bound in enumerate(res_bounds):
            builder.add_range(f"Qr{sfx}[{k}]", {builder.col(f"Qr{sfx}[{k}]"): 1.0}, -bound, bound, limits)
        for bus in case.buses:
            builder.add_range(f"cii{sfx}[{bus.id}]", {cii[bus.id]: 1.0}, bus.v_min ** 2, bus.v_max ** 2, limits)
        for bus in case.buses:
            builder.add_range(f"theta{sfx}[{bus.id}]", {theta[bus.id]: 1.0}, bus.theta_min, bus.theta_max, limits)
        for pair in pairs:
            row = {theta[pair[0]]: 1.0, theta[pair[1]]: -1.0, s[pair]: -1.0}
            builder.add_range(f"band{sfx}[{pair_name(pair)}]", row, -eps_theta, eps_theta, limits)
        for k, branch in enumerate(case.branches):
            row = {theta[branch.from_bus]: 1.0, theta[branch.to_bus]: -1.0}
            builder.add_range(f"dtheta{sfx}[{k}]", row, branch.theta_diff_min, branch.theta_diff_max, limits)
        for k, branch in enumerate(case.branches):
            if branch.limited:
                builder.add_range(f"Pft{sfx}[{k}]", {p_ft[k]: 1.0}, branch.p_min, branch.p_max, limits)
                builder.add_range(f"Ptf{sfx}[{k}]", {p_tf[k]: 1.0}, branch.p_min, branch.p_max, limits)

        if hatted and agc is not None:
            for k, gen in enumerate(case.generators):
                if agc[k] and gen.ramp_limit is not None:
                    builder.add_range(f"ramp[{k}]", agc[k], -gen.ramp_limit, gen.ramp_limit, "ramp")
            # P_g - rho psi: box scenarios opposite to mu* move the units the other way
            for k, gen in enumerate(case.generators):
                if agc[k]:
                    row = {builder.col(f"Pg[{k}]"): 1.0}
                    for col, value in agc[k].items():
                        acc(row, col, -value)
                    builder.add_range(f"Pg_mirror[{k}]", row, gen.p_min, gen.p_max, "mirror")

        for pair in pairs:
            big_c, big_s, big_e, big_d = cone_cols[pair]
            builder.add_soc(f"cone{sfx}[{pair_name(pair)}]", (big_c, big_s, big_e), big_d)
