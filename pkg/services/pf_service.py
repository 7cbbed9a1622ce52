import math
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from config import get_settings
from models.case import NetworkCase
from models.robust import RobustSetpoints
from models.uncertainty import InjectionKind, Scenario, UncertaintySpec
from models.validation import ConstraintEvaluation, PfSolution, ViolationRecord
from services.case_service import CaseService
from utils.exceptions import ModelBuildError, UncertaintyError

# family, element, value, lower bound, upper bound
Quantity = Tuple[str, str, float, Optional[float], Optional[float]]

# networks up to this size run Newton on dense matrices
DENSE_BUS_LIMIT = 400


def dsbus_dv(ybus: Union[sp.spmatrix, np.ndarray], v: np.ndarray):
    """Partial derivatives of the bus injections w.r.t. voltage magnitude and angle (polar)"""
    i_bus = ybus @ v
    v_norm = v / np.abs(v)
    if not sp.issparse(ybus):
        diag = np.diag_indices(v.size)
        ds_dvm = v[:, None] * np.conj(ybus * v_norm[None, :])
        ds_dvm[diag] += np.conj(i_bus) * v_norm
        ds_dva = -1j * v[:, None] * np.conj(ybus * v[None, :])
        ds_dva[diag] += 1j * v * np.conj(i_bus)
        return ds_dvm, ds_dva
    diag_v = sp.diags(v)
    diag_i = sp.diags(i_bus)
    diag_vnorm = sp.diags(v_norm)
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return sp.csr_matrix(ds_dvm), sp.csr_matrix(ds_dva)


def _stack(blocks: List[List[sp.spmatrix]]) -> sp.csc_matrix:
    """Block matrix that tolerates empty block rows and columns"""
    rows = []
    for row in blocks:
        parts = [block for block in row if block.shape[1] > 0]
        if row[0].shape[0] > 0 and parts:
            rows.append(sp.hstack(parts, format="csr"))
    return sp.vstack(rows, format="csc")


def _int_array(values) -> np.ndarray:
    return np.asarray(list(values), dtype=int)


class QuantityLayout:
    """
    Every quantity bounded in the exact ACOPF, in a fixed order that depends
    on the case only: rated flows, RES apparent power, per generator P, Q and
    ramp, per bus |V| and angle, per branch angle difference.
    """

    def __init__(self, case: NetworkCase, participation: Optional[List[float]] = None):
        self.rho = case.participation() if participation is None else np.asarray(participation, dtype=float)
        index = case.bus_index
        entries: List[Tuple[str, str, Optional[float], Optional[float]]] = []

        self.rated = _int_array(k for k, branch in enumerate(case.branches) if branch.limited)
        for k in self.rated:
            branch = case.branches[k]
            entries.append(("flow", f"branch[{k}]:{branch.from_bus}-{branch.to_bus}", None, branch.p_max))
        for k, unit in enumerate(case.res_units):
            entries.append(("res_q", f"res[{k}]@{unit.bus}", None, unit.s_max))

        # gen_p, gen_q and |rho psi| are stacked as [p_g, q_g, ramp]; gen_order picks them in layout order
        n_gen = len(case.generators)
        gen_order = []
        for k, gen in enumerate(case.generators):
            element = f"gen[{k}]@{gen.bus}"
            entries.append(("gen_p", element, gen.p_min, gen.p_max))
            entries.append(("gen_q", element, gen.q_min, gen.q_max))
            gen_order += [k, n_gen + k]
            if gen.ramp_limit is not None:
                entries.append(("ramp", element, None, gen.ramp_limit))
                gen_order.append(2 * n_gen + k)
        self.gen_order = _int_array(gen_order)

        for bus in case.buses:
            entries.append(("voltage", f"bus[{bus.id}]", bus.v_min, bus.v_max))
            entries.append(("angle", f"bus[{bus.id}]", bus.theta_min, bus.theta_max))
        for k, branch in enumerate(case.branches):
            entries.append(("angle_diff", f"branch[{k}]:{branch.from_bus}-{branch.to_bus}",
                            branch.theta_diff_min, branch.theta_diff_max))
        self.from_idx = _int_array(index[b.from_bus] for b in case.branches)
        self.to_idx = _int_array(index[b.to_bus] for b in case.branches)

        self.entries = entries
        self.families = np.array([e[0] for e in entries], dtype=object)
        self.lower = np.array([-np.inf if e[2] is None else e[2] for e in entries], dtype=float)
        self.upper = np.array([np.inf if e[3] is None else e[3] for e in entries], dtype=float)
        self.is_flow = self.families == "flow"
        self.groups: Dict[str, np.ndarray] = {}
        for family in dict.fromkeys(self.families):
            self.groups[family] = np.flatnonzero(self.families == family)

    def values(self, pf: PfSolution) -> np.ndarray:
        flows = np.maximum(np.abs(pf.p_ft[self.rated]), np.abs(pf.p_tf[self.rated]))
        res = np.hypot(pf.p_r, pf.q_r)
        gen = np.concatenate([pf.p_g, pf.q_g, np.abs(self.rho * pf.psi)])[self.gen_order]
        bus = np.column_stack([pf.v, pf.theta]).ravel()
        diff = pf.theta[self.from_idx] - pf.theta[self.to_idx]
        return np.concatenate([flows, res, gen, bus, diff]).astype(float)

    def quantities(self, values: np.ndarray) -> List[Quantity]:
        return [(family, element, float(value), lower, upper)
                for (family, element, lower, upper), value in zip(self.entries, values)]

    def margins(self, values: np.ndarray) -> np.ndarray:
        """Distance to the nearer bound; flows are measured relative to the rating"""
        with np.errstate(invalid="ignore", divide="ignore"):
            to_upper = self.upper - values
            to_lower = values - self.lower
            margin = np.where(to_upper <= to_lower, to_upper, to_lower)
            margin = np.where(self.is_flow, to_upper / self.upper, margin)
        return margin


class PfNetwork:
    """Scenario-independent arrays of one case, setpoint vector and uncertainty set"""

    def __init__(self, case: NetworkCase, setpoints: RobustSetpoints, unc: UncertaintySpec,
                 ybus: Optional[sp.spmatrix] = None, case_service: Optional[CaseService] = None):
        ybus = (case_service or CaseService()).build_admittance(case) if ybus is None else ybus
        n = case.n_bus
        index = case.bus_index
        self.n = n
        self.dense = n <= DENSE_BUS_LIMIT
        self.ybus = ybus.toarray() if self.dense else sp.csr_matrix(ybus)

        self.ref = index[case.reference_bus.id]
        self.gen_bus = _int_array(index[g.bus] for g in case.generators)
        gen_mask = np.zeros(n, dtype=bool)
        gen_mask[self.gen_bus] = True
        self.vm0 = np.ones(n)
        self.vm0[self.gen_bus] = np.sqrt(np.maximum(np.asarray(setpoints.c_ii, dtype=float), 0.0))
        self.non_ref = _int_array(i for i in range(n) if i != self.ref)
        self.pq = np.flatnonzero(~gen_mask)

        self.load_bus = _int_array(index[load.bus] for load in case.loads)
        self.p_d = np.array([load.p_d for load in case.loads], dtype=float)
        self.q_d = np.array([load.q_d for load in case.loads], dtype=float)
        self.lr = np.array([load.lr or 0.0 for load in case.loads], dtype=float)
        self.res_bus = _int_array(index[unit.bus] for unit in case.res_units)
        self.p_r = np.array([unit.p_r for unit in case.res_units], dtype=float)
        self.s_max = np.array([unit.s_max for unit in case.res_units], dtype=float)
        self.q_r = np.asarray(setpoints.q_r, dtype=float) if case.res_units else np.zeros(0)

        coordinates = list(enumerate(unc.coordinates))
        self.load_coord = _int_array(j for j, c in coordinates if c.kind == InjectionKind.LOAD)
        self.load_target = _int_array(c.index for _, c in coordinates if c.kind == InjectionKind.LOAD)
        self.res_coord = _int_array(j for j, c in coordinates if c.kind == InjectionKind.RES)
        self.res_target = _int_array(c.index for _, c in coordinates if c.kind == InjectionKind.RES)

        self.p_g = np.asarray(setpoints.p_g, dtype=float)
        self.rho = np.asarray(setpoints.participation, dtype=float)
        self.rho_bus = np.bincount(self.gen_bus, weights=self.rho, minlength=n)
        self.p_gen_bus = np.bincount(self.gen_bus, weights=self.p_g, minlength=n)

        branches = case.branches
        self.from_idx = _int_array(index[b.from_bus] for b in branches)
        self.to_idx = _int_array(index[b.to_bus] for b in branches)
        admittances = np.array([b.admittances() for b in branches], dtype=complex).reshape(-1, 4)
        self.y_ff, self.y_ft, self.y_tf, self.y_tt = admittances.T

        self.reactive_groups = []
        for bus in case.generator_buses:
            gens = case.generators_at(bus)
            q_min = np.array([case.generators[k].q_min for k in gens])
            span = np.array([case.generators[k].q_max - case.generators[k].q_min for k in gens])
            self.reactive_groups.append((index[bus], _int_array(gens), q_min, span))

        self.layout = QuantityLayout(case, setpoints.participation)

    def injections(self, mu: np.ndarray):
        """Scheduled P (without the AGC column), fixed Q, and the RES operating point of one scenario"""
        p_d, q_d, p_r = self.p_d.copy(), self.q_d.copy(), self.p_r.copy()
        if self.load_coord.size:
            np.add.at(p_d, self.load_target, mu[self.load_coord])
            np.add.at(q_d, self.load_target, self.lr[self.load_target] * mu[self.load_coord])
        if self.res_coord.size:
            np.add.at(p_r, self.res_target, mu[self.res_coord])
        reach = np.sqrt(np.maximum(self.s_max ** 2 - p_r ** 2, 0.0))
        q_r = np.clip(self.q_r, -reach, reach)

        n = self.n
        p_spec = (self.p_gen_bus - np.bincount(self.load_bus, weights=p_d, minlength=n)
                  + np.bincount(self.res_bus, weights=p_r, minlength=n))
        q_fixed = (np.bincount(self.res_bus, weights=q_r, minlength=n)
                   - np.bincount(self.load_bus, weights=q_d, minlength=n))
        return p_spec, q_fixed, p_r, q_r

    def split_reactive(self, s_calc: np.ndarray, q_fixed: np.ndarray) -> np.ndarray:
        """Share each generator bus's reactive output in proportion to the reactive ranges"""
        q_g = np.zeros(self.p_g.size)
        for i, gens, q_min, span in self.reactive_groups:
            q_total = s_calc[i].imag - q_fixed[i]
            if span.sum() <= 0:
                q_g[gens] = q_total / gens.size
            else:
                q_g[gens] = q_min + (q_total - q_min.sum()) * span / span.sum()
        return q_g


class PowerFlowService:
    def __init__(self, settings=None, case_service: Optional[CaseService] = None):
        self.settings = settings or get_settings()
        self.case_service = case_service or CaseService(self.settings)

    def prepare(self, case: NetworkCase, setpoints: RobustSetpoints, unc: UncertaintySpec,
                ybus: Optional[sp.spmatrix] = None) -> PfNetwork:
        """Arrays shared by every scenario run on one setpoint vector"""
        self._check_setpoints(case, setpoints)
        return PfNetwork(case, setpoints, unc, ybus=ybus, case_service=self.case_service)

    def run_pf(self, case: NetworkCase, setpoints: RobustSetpoints, scenario: Scenario,
               unc: UncertaintySpec, ybus: Optional[sp.csr_matrix] = None,
               network: Optional[PfNetwork] = None) -> PfSolution:
        """
        Distributed-slack Newton-Raphson power flow for one scenario.

        Unknowns are the angles at every bus but the reference, the voltage
        magnitudes at buses without a generator, and the mismatch psi shared
        by the generators through their participation factors. Generator
        buses hold |V| = sqrt(c_ii) from the setpoints; there is no PV to PQ
        switching. Divergence and a singular Jacobian are reported through
        the converged flag.
        """
        self._check_dimensions(case, setpoints, scenario, unc)
        net = network or self.prepare(case, setpoints, unc, ybus)
        p_spec, q_fixed, p_r, q_r = net.injections(scenario.vector)
        ybus, pq, non_ref = net.ybus, net.pq, net.non_ref
        n, n_va, n_vm = net.n, non_ref.size, pq.size

        vm = net.vm0.copy()
        va = np.zeros(n)
        psi = 0.0
        v = vm * np.exp(1j * va)

        def mismatch(v: np.ndarray, psi: float) -> np.ndarray:
            s_calc = v * np.conj(ybus @ v)
            f_p = s_calc.real - (p_spec + net.rho_bus * psi)
            f_q = s_calc.imag[pq] - q_fixed[pq]
            return np.concatenate([f_p, f_q])

        tol, max_it = self.settings.PF_TOLERANCE, self.settings.PF_MAX_ITER
        f = mismatch(v, psi)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        converged = norm < tol
        iterations, message = 0, ""
        while not converged and iterations < max_it:
            iterations += 1
            try:
                dx = -self._newton_solve(net, v, f)
            except (RuntimeError, np.linalg.LinAlgError) as e:
                message = f"singular Jacobian at iteration {iterations}: {e}"
                break
            if not np.all(np.isfinite(dx)):
                message = f"non-finite Newton step at iteration {iterations}"
                break
            va[non_ref] += dx[:n_va]
            vm[pq] += dx[n_va:n_va + n_vm]
            psi += float(dx[-1])
            v = vm * np.exp(1j * va)
            with np.errstate(over="ignore", invalid="ignore"):
                f = mismatch(v, psi)
            norm = float(np.max(np.abs(f)))
            if not math.isfinite(norm):
                message = f"mismatch overflow at iteration {iterations}"
                break
            converged = norm < tol
        if not converged and not message:
            message = f"no convergence after {iterations} iterations (mismatch {norm:.3e} pu)"

        return self._solution(net, scenario.id, v, psi, q_fixed, p_r, q_r, converged, iterations, norm, message)

    @staticmethod
    def _newton_solve(net: PfNetwork, v: np.ndarray, f: np.ndarray) -> np.ndarray:
        ds_dvm, ds_dva = dsbus_dv(net.ybus, v)
        pq, non_ref = net.pq, net.non_ref
        n, n_va, n_vm = net.n, non_ref.size, pq.size
        if net.dense:
            jacobian = np.zeros((n + n_vm, n_va + n_vm + 1))
            jacobian[:n, :n_va] = ds_dva.real[:, non_ref]
            jacobian[:n, n_va:n_va + n_vm] = ds_dvm.real[:, pq]
            jacobian[:n, -1] = -net.rho_bus
            jacobian[n:, :n_va] = ds_dva.imag[np.ix_(pq, non_ref)]
            jacobian[n:, n_va:n_va + n_vm] = ds_dvm.imag[np.ix_(pq, pq)]
            return np.linalg.solve(jacobian, f)
        psi_col = sp.csr_matrix(-net.rho_bus.reshape(-1, 1))
        jacobian = _stack([
            [ds_dva[:, non_ref].real, ds_dvm[:, pq].real, psi_col],
            [ds_dva[pq][:, non_ref].imag, ds_dvm[pq][:, pq].imag, sp.csr_matrix((n_vm, 1))],
        ])
        return splu(jacobian).solve(f)

    @staticmethod
    def _check_dimensions(case: NetworkCase, setpoints: RobustSetpoints, scenario: Scenario,
                          unc: UncertaintySpec):
        PowerFlowService._check_setpoints(case, setpoints)
        if len(scenario.mu) != unc.size:
            raise UncertaintyError(f"scenario {scenario.id} has {len(scenario.mu)} deviations, "
                                   f"uncertainty set has {unc.size}")

    @staticmethod
    def _check_setpoints(case: NetworkCase, setpoints: RobustSetpoints):
        n_gen = len(case.generators)
        if len(setpoints.p_g) != n_gen or len(setpoints.c_ii) != n_gen or len(setpoints.participation) != n_gen:
            raise ModelBuildError(f"setpoints for {case.name} do not carry one entry per generator ({n_gen})")
        if case.res_units and len(setpoints.q_r) != len(case.res_units):
            raise ModelBuildError(f"setpoints carry {len(setpoints.q_r)} RES schedules, case has "
                                  f"{len(case.res_units)} units")

    @staticmethod
    def _solution(net: PfNetwork, scenario_id: int, v: np.ndarray, psi: float, q_fixed: np.ndarray,
                  p_r: np.ndarray, q_r: np.ndarray, converged: bool, iterations: int, norm: float,
                  message: str) -> PfSolution:
        v_f, v_t = v[net.from_idx], v[net.to_idx]
        s_ft = v_f * np.conj(net.y_ff * v_f + net.y_ft * v_t)
        s_tf = v_t * np.conj(net.y_tf * v_f + net.y_tt * v_t)
        s_calc = v * np.conj(net.ybus @ v)
        return PfSolution(
            scenario_id=scenario_id,
            converged=converged,
            iterations=iterations,
            mismatch=norm,
            v=np.abs(v),
            theta=np.angle(v),
            psi=psi,
            p_ft=s_ft.real,
            p_tf=s_tf.real,
            q_ft=s_ft.imag,
            q_tf=s_tf.imag,
            p_g=net.p_g + net.rho * psi,
            q_g=net.split_reactive(s_calc, q_fixed),
            p_r=p_r,
            q_r=q_r,
            message=message,
        )

    def monitored_quantities(self, case: NetworkCase, pf: PfSolution,
                             participation: Optional[List[float]] = None,
                             layout: Optional[QuantityLayout] = None) -> List[Quantity]:
        """
        Every quantity bounded in the exact ACOPF, as (family, element, value,
        lower, upper). The order depends on the case only, so the values of
        different scenarios line up element by element.
        """
        layout = layout or QuantityLayout(case, participation)
        return layout.quantities(layout.values(pf))

    def evaluate_constraints(self, case: NetworkCase, pf: PfSolution,
                             participation: Optional[List[float]] = None,
                             quantities: Optional[List[Quantity]] = None,
                             layout: Optional[QuantityLayout] = None) -> ConstraintEvaluation:
        """Worst margin per constraint family and every violation beyond the feasibility tolerance"""
        if quantities is not None:
            return self._evaluate_list(quantities)
        layout = layout or QuantityLayout(case, participation)
        return self.evaluate_values(layout, layout.values(pf))

    def evaluate_values(self, layout: QuantityLayout, values: np.ndarray) -> ConstraintEvaluation:
        """Vectorized check of one value vector laid out by layout"""
        tol = self.settings.FEASIBILITY_TOL
        margins = layout.margins(values)

        def record(k: int) -> ViolationRecord:
            family, element, lower, upper = layout.entries[k]
            return self._margin(family, element, float(values[k]), lower, upper)

        worst = {}
        for family, members in layout.groups.items():
            worst[family] = record(int(members[np.argmin(margins[members])]))
        violations = [record(int(k)) for k in np.flatnonzero(margins < -tol)]
        return ConstraintEvaluation(worst=worst, violations=violations)

    def _evaluate_list(self, quantities: List[Quantity]) -> ConstraintEvaluation:
        tol = self.settings.FEASIBILITY_TOL
        worst: Dict[str, ViolationRecord] = {}
        violations: List[ViolationRecord] = []
        for family, element, value, lower, upper in quantities:
            record = self._margin(family, element, value, lower, upper)
            if family not in worst or record.margin < worst[family].margin:
                worst[family] = record
            if record.margin < -tol:
                violations.append(record)
        return ConstraintEvaluation(worst=worst, violations=violations)

    @staticmethod
    def _margin(family: str, element: str, value: float, lower: Optional[float],
                upper: Optional[float]) -> ViolationRecord:
        if family == "flow":
            # relative to the rating
            return ViolationRecord(family=family, element=element, value=value, limit=upper,
                                   margin=(upper - value) / upper)
        to_upper = upper - value if upper is not None else math.inf
        to_lower = value - lower if lower is not None else math.inf
        if to_upper <= to_lower:
            return ViolationRecord(family=family, element=element, value=value, limit=upper, margin=to_upper)
        return ViolationRecord(family=family, element=element, value=value, limit=lower, margin=to_lower)
