import math
from dataclasses import replace
from typing import List, Optional, Tuple

import numpy as np

from config import get_settings
from models.case import NetworkCase
from models.conic import ConicProgram, ConicSolution, SolverSettings, SolveStatus
from models.robust import (
    BudgetSelection,
    DualRcProgram,
    ExactnessReport,
    ExactnessResiduals,
    GapReport,
    ParticipationRefinement,
    RobustMode,
    RobustSetpoints,
)
from models.uncertainty import UncertaintySpec
from services.conic_service import ConicService, ProgramBuilder
from services.opf_service import OpfService, pair_name, x_columns
from utils.exceptions import ModelBuildError, SolverError, UncertaintyError
from utils.log import banner, log

# |R| below this fraction of max(1, max |R|) is a tie and orients to +mu_bar
SIGN_TIE_TOL = 1e-6
SATURATION_MARGIN = 1e-6

# the dual reports the opposite certificate of the robust primal
_PRIMAL_STATUS = {
    SolveStatus.INFEASIBLE: SolveStatus.UNBOUNDED,
    SolveStatus.UNBOUNDED: SolveStatus.INFEASIBLE,
    SolveStatus.MAX_ITER: SolveStatus.MAX_ITER,
}


class RobustService:
    def __init__(self, settings=None, opf_service: Optional[OpfService] = None,
                 conic_service: Optional[ConicService] = None):
        self.settings = settings or get_settings()
        self.conic_service = conic_service or ConicService()
        self.opf_service = opf_service or OpfService(self.settings, conic_service=self.conic_service)

    def build_dual_rc(self, case: NetworkCase, unc: UncertaintySpec, mode: str = "full",
                      alpha: Optional[np.ndarray] = None, orientation: Optional[np.ndarray] = None,
                      eps_theta: Optional[float] = None) -> DualRcProgram:
        """
        Dual of the robust primal with the epigraph of the worst-case term.

        Every primal column has a stationarity row named "stat:<column>"; the
        multipliers of these rows are the robust primal point. In budget mode
        alpha masks coordinates out of the box.
        """
        mode = RobustMode(mode)
        if mode == RobustMode.DETERMINISTIC:
            raise ModelBuildError("the dual robust counterpart has no deterministic mode")
        if mode == RobustMode.BUDGET:
            if alpha is None:
                raise ModelBuildError("budget mode needs the alpha assignment; use select_budget")
            alpha = np.asarray(alpha, dtype=float)
            if alpha.shape != (unc.size,) or np.any((alpha != 0) & (alpha != 1)):
                raise ModelBuildError("alpha must hold one 0/1 entry per uncertain coordinate")
        else:
            alpha = np.ones(unc.size)
        orientation = unc.stress_orientation() if orientation is None else np.asarray(orientation, dtype=float)

        active = unc.masked(alpha) if mode == RobustMode.BUDGET else unc
        primal = self.opf_service.build_robust_primal(case, active, np.zeros(unc.size), eps_theta=eps_theta)
        form = self.conic_service.assemble_standard_form(primal)
        sensitivity = self.opf_service.mu_sensitivity(primal, case, unc)

        big_m = unc.big_m
        if big_m is None:
            finite = np.concatenate([form.b, primal.b_in])
            scale = float(np.max(np.abs(finite))) if finite.size else 0.0
            big_m = self.settings.BIG_M_FACTOR * max(1.0, scale)

        x_set = set(x_columns(case))
        stationarity = tuple(f"stat:{name}" for name in primal.columns)
        drc = DualRcProgram(
            program=None,
            primal=primal,
            primal_form=form,
            sensitivity=sensitivity,
            unc=unc,
            orientation=orientation,
            alpha=alpha,
            big_m=big_m,
            mode=mode,
            stationarity_rows=stationarity,
            x_rows=tuple(f"stat:{name}" for name in primal.columns if name in x_set),
            psi_row="stat:psi" if "psi" in primal.index else None,
        )
        return replace(drc, program=self._dual_program(drc, x_set))

    def _dual_program(self, drc: DualRcProgram, x_set: set) -> ConicProgram:
        form, primal = drc.primal_form, drc.primal
        builder = ProgramBuilder(f"dual-rc:{primal.name}")
        builder.add_offset(-form.offset)

        y = [builder.add_var(f"y:{name}", cost=form.b[i]) for i, name in enumerate(form.eq_names)]
        z = [builder.add_var(f"z:{name}", lower=0.0 if k < form.dims.l else -np.inf, cost=form.h[k])
             for k, name in enumerate(form.g_names)]
        start = form.dims.l
        for cone, size in zip(primal.cones, form.dims.q):
            block = z[start:start + size]
            builder.add_soc(f"dual:{cone.name}", block[1:], block[0])
            start += size

        a_t, g_t = form.A.T.tocsr(), form.G.T.tocsr()
        for j, name in enumerate(primal.columns):
            coeffs = {}
            for k in range(a_t.indptr[j], a_t.indptr[j + 1]):
                coeffs[y[a_t.indices[k]]] = coeffs.get(y[a_t.indices[k]], 0.0) + a_t.data[k]
            for k in range(g_t.indptr[j], g_t.indptr[j + 1]):
                coeffs[z[g_t.indices[k]]] = coeffs.get(z[g_t.indices[k]], 0.0) + g_t.data[k]
            if name in x_set:
                block = "x_recovery"
            elif name == "psi":
                block = "psi_recovery"
            else:
                block = "y_recovery"
            builder.add_eq(f"stat:{name}", coeffs, -form.c[j], block)

        b_t = drc.sensitivity.T.tocsr()
        interval = drc.interval
        for j in range(drc.unc.size):
            r = builder.add_var(f"R[{j}]")
            r_plus = builder.add_var(f"Rp[{j}]", lower=0.0, upper=drc.big_m)
            r_minus = builder.add_var(f"Rm[{j}]", lower=0.0, upper=drc.big_m)
            t = builder.add_var(f"t[{j}]", cost=-1.0)
            coeffs = {r: 1.0}
            for k in range(b_t.indptr[j], b_t.indptr[j + 1]):
                coeffs[y[b_t.indices[k]]] = b_t.data[k]
            builder.add_eq(f"R[{j}]", coeffs, 0.0, "sensitivity")
            builder.add_eq(f"split[{j}]", {r_plus: 1.0, r_minus: -1.0, r: -1.0}, 0.0, "split")
            builder.add_le(f"epigraph[{j}]", {t: 1.0, r_plus: -interval[j], r_minus: interval[j]}, 0.0, "epigraph")
        return builder.seal()

    def reorient(self, drc: DualRcProgram, orientation: np.ndarray) -> DualRcProgram:
        """Same dual program with another worst-case vertex orientation"""
        updated = replace(drc, orientation=np.asarray(orientation, dtype=float))
        return replace(updated, program=self._dual_program(updated, set(x_columns_of(drc))))

    def solve_rc_and_recover(self, drc: DualRcProgram, case: NetworkCase,
                             settings: Optional[SolverSettings] = None) -> RobustSetpoints:
        """
        Solve the dual RC, updating the vertex orientation to sign(R) until it
        repeats, and read the robust setpoints from the stationarity multipliers.
        """
        settings = settings or SolverSettings.from_settings()
        banner()
        log(f"Solving dual robust counterpart of {case.name} ({drc.mode.value}, {drc.unc.size} uncertain injections)")

        width = drc.alpha * drc.unc.mu_bar
        candidates: List[Tuple[float, DualRcProgram, ConicSolution]] = []
        seen = set()
        current = drc
        rounds = 0
        for rounds in range(1, self.settings.ORIENTATION_MAX_ROUNDS + 1):
            solution, _ = self.opf_service.solve(current.program, settings)
            if not solution.optimal:
                status = _PRIMAL_STATUS.get(solution.status, solution.status)
                raise SolverError(f"dual robust counterpart of {case.name}: robust primal is {status.value}",
                                  status=status.value)
            candidates.append((-solution.objective, current, solution))
            seen.add(tuple(current.orientation))

            r_values = np.array([current.program.value(solution.x, f"R[{j}]") for j in range(current.unc.size)])
            proposed = orientation_of(r_values)
            proposed = np.where(width > 0, proposed, current.orientation)
            if np.array_equal(proposed, current.orientation) or tuple(proposed) in seen:
                break
            log(f"Orientation round {rounds}: objective {-solution.objective:.6f}, "
                f"{int(np.sum(proposed != current.orientation))} coordinates flip")
            current = self.reorient(current, proposed)

        objective, best, solution = max(candidates, key=lambda item: item[0])
        setpoints = self._recover(best, case, solution, objective, rounds)
        banner()
        return setpoints

    def _recover(self, drc: DualRcProgram, case: NetworkCase, solution: ConicSolution,
                 objective: float, rounds: int) -> RobustSetpoints:
        program, primal = drc.program, drc.primal
        table = self.conic_service.extract_duals(solution, program)
        x_full = table.loc[list(drc.stationarity_rows), "multiplier"].to_numpy(dtype=float)
        point = self.opf_service.operating_point(case, primal, x_full)

        n = drc.unc.size
        r_values = np.array([program.value(solution.x, f"R[{j}]") for j in range(n)])
        r_plus = np.array([program.value(solution.x, f"Rp[{j}]") for j in range(n)])
        r_minus = np.array([program.value(solution.x, f"Rm[{j}]") for j in range(n)])
        overlap = np.minimum(r_plus, r_minus)
        # the epigraph only sees R+ - R-, so the split is reported as (max(R,0), max(-R,0))
        split_plus, split_minus = np.maximum(r_values, 0.0), np.maximum(-r_values, 0.0)
        if n:
            log(f"raw split overlap min(R+, R-) up to {overlap.max():.3e}", "debug")

        width = drc.alpha * drc.unc.mu_bar
        signs = orientation_of(r_values)
        mu_star = signs * width
        warnings = []
        if not np.array_equal(mu_star, drc.interval):
            warnings.append("orientation search stopped before sign(R) settled; mu* is the solved vertex")
            mu_star = drc.interval.copy()

        ceiling = drc.big_m * (1.0 - SATURATION_MARGIN)
        saturated = bool(np.any(r_plus >= ceiling) or np.any(r_minus >= ceiling) or np.any(np.abs(r_values) >= ceiling))
        if saturated:
            warnings.append(f"Big-M bound T={drc.big_m:.3e} is active; re-solve with a larger BIG_M_FACTOR")
        for message in warnings:
            log(message, "warning")

        psi = primal.value(x_full, "psi") if "psi" in primal.index else 0.0
        return RobustSetpoints(
            case_name=case.name,
            mode=drc.mode,
            p_g=point["p_g"],
            c_ii=point["c_ii"],
            q_r=point["q_r"],
            participation=case.participation().tolist(),
            coordinate_names=drc.unc.names,
            mu_bar=drc.unc.mu_bar.tolist(),
            mu_star=mu_star.tolist(),
            r_values=r_values.tolist(),
            complementarity=np.minimum(split_plus, split_minus).tolist(),
            split_overlap=overlap.tolist(),
            alpha=drc.alpha.tolist() if drc.mode == RobustMode.BUDGET else None,
            gamma=int(drc.alpha.sum()) if drc.mode == RobustMode.BUDGET else None,
            psi=psi,
            psi_window=self.psi_window(case, point["p_g"]),
            objective=objective,
            solver_gap=solution.gap,
            big_m=drc.big_m,
            saturated=saturated,
            orientation_rounds=rounds,
            iterations=solution.iterations,
            solve_time=solution.solve_time,
            warnings=warnings,
        )

    @staticmethod
    def psi_window(case: NetworkCase, p_g: List[float]) -> Tuple[float, float]:
        """Mismatch range the generators can absorb within their bounds and ramps"""
        low, high = -math.inf, math.inf
        for gen, rho, p in zip(case.generators, case.participation(), p_g):
            if rho <= 0:
                continue
            ramp = gen.ramp_limit if gen.ramp_limit is not None else math.inf
            low = max(low, max(gen.p_min - p, -ramp) / rho)
            high = min(high, min(gen.p_max - p, ramp) / rho)
        return (low, high) if math.isfinite(low) and math.isfinite(high) else (0.0, 0.0)

    def solve_robust(self, case: NetworkCase, unc: UncertaintySpec, eps_theta: Optional[float] = None,
                     settings: Optional[SolverSettings] = None) -> RobustSetpoints:
        """Full-box robust setpoints, or the budgeted ones when the set carries a budget"""
        if unc.gamma is not None and unc.gamma < unc.size:
            return self.select_budget(case, unc, unc.gamma, eps_theta, settings).setpoints
        drc = self.build_dual_rc(case, unc, mode="full", eps_theta=eps_theta)
        return self.solve_rc_and_recover(drc, case, settings)

    def solve_deterministic(self, case: NetworkCase, eps_theta: Optional[float] = None,
                            settings: Optional[SolverSettings] = None) -> RobustSetpoints:
        program = self.opf_service.build_deterministic(case, eps_theta)
        solution, _ = self.opf_service.solve(program, settings)
        if not solution.optimal:
            raise SolverError(f"deterministic ACOPF of {case.name} is {solution.status.value}",
                              status=solution.status.value)
        point = self.opf_service.operating_point(case, program, solution.x)
        return RobustSetpoints(
            case_name=case.name,
            mode=RobustMode.DETERMINISTIC,
            participation=case.participation().tolist(),
            psi_window=self.psi_window(case, point["p_g"]),
            objective=solution.objective,
            solver_gap=solution.gap,
            iterations=solution.iterations,
            solve_time=solution.solve_time,
            **point,
        )

    def _active_set(self, unc: UncertaintySpec, setpoints: RobustSetpoints) -> UncertaintySpec:
        return unc.masked(np.asarray(setpoints.alpha)) if setpoints.alpha is not None else unc

    def cross_check_strong_duality(self, case: NetworkCase, unc: UncertaintySpec, setpoints: RobustSetpoints,
                                   eps_theta: Optional[float] = None,
                                   settings: Optional[SolverSettings] = None) -> GapReport:
        """Re-solve the robust primal at mu* and compare objective and setpoints"""
        mu_star = np.asarray(setpoints.mu_star, dtype=float) if setpoints.mu_star else np.zeros(unc.size)
        program = self.opf_service.build_robust_primal(case, self._active_set(unc, setpoints), mu_star, eps_theta)
        solution, _ = self.opf_service.solve(program, settings)
        if not solution.optimal:
            message = f"robust primal at mu* is {solution.status.value}; strong duality not confirmed"
            log(message, "warning")
            return GapReport(rc_objective=setpoints.objective, primal_status=solution.status.value, message=message)

        point = self.opf_service.operating_point(case, program, solution.x)
        primal_x = np.concatenate([point["p_g"], point["c_ii"]])
        gap = abs(setpoints.objective - solution.objective) / max(abs(solution.objective), 1e-12)
        diff = float(np.max(np.abs(primal_x - setpoints.x_vector))) if primal_x.size else 0.0
        log(f"Strong-duality check: relative gap {gap:.3e}, max setpoint difference {diff:.3e}")
        return GapReport(
            rc_objective=setpoints.objective,
            primal_objective=solution.objective,
            relative_gap=gap,
            max_setpoint_diff=diff,
            primal_status=solution.status.value,
        )

    def select_budget(self, case: NetworkCase, unc: UncertaintySpec, gamma: int,
                      eps_theta: Optional[float] = None,
                      settings: Optional[SolverSettings] = None) -> BudgetSelection:
        """
        Rank coordinates by their worst-case contribution |t_j| in the full
        robust counterpart and keep the top gamma of them in the box.
        """
        if not 0 <= gamma <= unc.size:
            raise UncertaintyError(f"budget {gamma} outside [0, {unc.size}]")
        full = self.solve_rc_and_recover(self.build_dual_rc(case, unc, "full", eps_theta=eps_theta), case, settings)
        t_values = np.abs(np.asarray(full.r_values)) * unc.mu_bar
        ranking = sorted(range(unc.size), key=lambda j: (-t_values[j], j))
        alpha = np.zeros(unc.size)
        alpha[ranking[:gamma]] = 1.0
        log(f"Budget {gamma}: keeping {[unc.names[j] for j in ranking[:gamma]]}")

        drc = self.build_dual_rc(case, unc, "budget", alpha=alpha, eps_theta=eps_theta)
        setpoints = self.solve_rc_and_recover(drc, case, settings)
        return BudgetSelection(
            gamma=gamma,
            alpha=alpha.tolist(),
            ranking=ranking,
            t_values=t_values.tolist(),
            full_objective=full.objective,
            setpoints=setpoints,
        )

    def refine_participation(self, case: NetworkCase, unc: UncertaintySpec, setpoints: RobustSetpoints,
                             eps_theta: Optional[float] = None,
                             settings: Optional[SolverSettings] = None) -> ParticipationRefinement:
        """Re-solve with rho as variables while mu* and psi* stay frozen"""
        active = self._active_set(unc, setpoints)
        mu_star = np.asarray(setpoints.mu_star, dtype=float) if setpoints.mu_star else np.zeros(unc.size)
        base_program = self.opf_service.build_robust_primal(case, active, mu_star, eps_theta)
        base, _ = self.opf_service.solve(base_program, settings)
        if not base.optimal:
            return ParticipationRefinement(participation=setpoints.participation, base_objective=setpoints.objective,
                                           status=base.status.value,
                                           message="robust primal at mu* has no optimum")

        program = self.opf_service.build_robust_primal(case, active, mu_star, eps_theta, participation="variable",
                                                       psi_fixed=setpoints.psi)
        refined, _ = self.opf_service.solve(program, settings)
        if not refined.optimal:
            message = f"frozen (mu*, psi*) pair is {refined.status.value} with variable participation"
            log(message, "warning")
            return ParticipationRefinement(participation=setpoints.participation, base_objective=base.objective,
                                           status=refined.status.value, message=message)

        rho = [program.value(refined.x, f"rho[{k}]") for k in range(len(case.generators))]
        reduction = 100.0 * (base.objective - refined.objective) / max(abs(base.objective), 1e-12)
        log(f"Variable participation lowers the objective by {reduction:.4f}%")
        return ParticipationRefinement(
            participation=rho,
            base_objective=base.objective,
            refined_objective=refined.objective,
            reduction_percent=reduction,
            status=refined.status.value,
        )

    def exactness_check(self, case: NetworkCase, unc: UncertaintySpec, setpoints: RobustSetpoints,
                        eps_theta: Optional[float] = None, settings: Optional[SolverSettings] = None,
                        tolerance: float = 1e-5) -> ExactnessReport:
        """
        Fix the setpoints, push the total reactive generation to each extreme
        and measure how far the cone and arctangent relations are from holding
        with equality, at mu = 0 and at mu*.
        """
        fix = {f"Pg[{k}]": p for k, p in enumerate(setpoints.p_g)}
        for gen, c_ii in zip(case.generators, setpoints.c_ii):
            fix[f"cii[{gen.bus}]"] = c_ii
        mu_star = np.asarray(setpoints.mu_star, dtype=float) if setpoints.mu_star else np.zeros(unc.size)
        active = self._active_set(unc, setpoints)

        base, worst = [], []
        for sense in ("max", "min"):
            program = self.opf_service.build_deterministic(case, eps_theta, objective=f"{sense}_q", fix_x=fix)
            base.append(self._residuals(case, program, "", sense, settings))
            program = self.opf_service.build_robust_primal(case, active, mu_star, eps_theta,
                                                           objective=f"{sense}_q_hat", fix_x=fix)
            worst.append(self._residuals(case, program, "_hat", sense, settings))
        report = ExactnessReport(base=base, worst_case=worst, tolerance=tolerance)
        log(f"Exactness residuals: {report.summary()}")
        return report

    def _residuals(self, case: NetworkCase, program: ConicProgram, sfx: str, sense: str,
                   settings: Optional[SolverSettings]) -> ExactnessResiduals:
        solution, _ = self.opf_service.solve(program, settings)
        if not solution.optimal:
            return ExactnessResiduals(status=solution.status.value, sense=sense)
        gen_buses = set(case.generator_buses)

        def cii(bus: int) -> float:
            name = f"cii[{bus}]" if bus in gen_buses else f"cii{sfx}[{bus}]"
            return program.value(solution.x, name)

        cone, angle, worst = 0.0, 0.0, None
        for pair in case.pair_keys():
            tag = pair_name(pair)
            c = program.value(solution.x, f"c{sfx}[{tag}]")
            s = program.value(solution.x, f"s{sfx}[{tag}]")
            residual = abs(c * c + s * s - cii(pair[0]) * cii(pair[1]))
            theta = program.value(solution.x, f"theta{sfx}[{pair[0]}]") - program.value(solution.x, f"theta{sfx}[{pair[1]}]")
            angle = max(angle, abs(theta - math.atan2(s, c)))
            if residual >= cone:
                cone, worst = residual, tag
        return ExactnessResiduals(status=solution.status.value, sense=sense, cone_residual=cone,
                                  angle_residual=angle, worst_pair=worst)


def x_columns_of(drc: DualRcProgram) -> List[str]:
    return [row[len("stat:"):] for row in drc.x_rows]


def orientation_of(r_values: np.ndarray) -> np.ndarray:
    """sign(R) per coordinate; ties within the solver noise floor go to +1"""
    r_values = np.asarray(r_values, dtype=float)
    scale = max(1.0, float(np.max(np.abs(r_values)))) if r_values.size else 1.0
    return np.where(r_values < -SIGN_TIE_TOL * scale, -1.0, 1.0)
