import time
from dataclasses import dataclass
from typing import List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from models.conic import ConeDims, ConicSolution, SolveStatus, SolverSettings, StandardForm
from utils.exceptions import SolverError
from utils.log import log

STEP_FRACTION = 0.99
EQUILIBRATION_PASSES = 10
MIN_STEP = 1e-10
# reduced accuracy accepted when the endgame linear algebra breaks down
NEAR_OPTIMAL_FACTOR = 1e3
REGULARIZATION_RETRIES = 4
REGULARIZATION_GROWTH = 100.0


class ConicBackend(Protocol):
    def solve(self, form: StandardForm, settings: Optional[SolverSettings] = None) -> ConicSolution:
        ...


@dataclass
class _SocScaling:
    W: np.ndarray
    Winv: np.ndarray
    W2: np.ndarray
    lam: np.ndarray


class _Cones:
    """Nesterov-Todd scaling and Jordan algebra over R^l_+ x SOC_1 x ... x SOC_k"""

    def __init__(self, dims: ConeDims):
        self.dims = dims
        self.slices = []
        start = dims.l
        for size in dims.q:
            self.slices.append(slice(start, start + size))
            start += size

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dims.m)
        e[: self.dims.l] = 1.0
        for block in self.slices:
            e[block.start] = 1.0
        return e

    def interior_shift(self, v: np.ndarray) -> np.ndarray:
        """Shift v along the identity so it lies strictly inside the cone"""
        worst = -np.inf
        if self.dims.l:
            worst = max(worst, -np.min(v[: self.dims.l]))
        for block in self.slices:
            u = v[block]
            worst = max(worst, np.linalg.norm(u[1:]) - u[0])
        if worst < 0:
            return v.copy()
        return v + (1.0 + worst) * self.identity()

    def scaling(self, s: np.ndarray, z: np.ndarray):
        l = self.dims.l
        w_lin = np.sqrt(s[:l] / z[:l])
        lam = np.empty_like(s)
        lam[:l] = np.sqrt(s[:l] * z[:l])
        socs: List[_SocScaling] = []
        for block in self.slices:
            sb, zb = s[block], z[block]
            k = sb.size
            J = -np.eye(k)
            J[0, 0] = 1.0
            a = np.sqrt(max(sb[0] ** 2 - sb[1:] @ sb[1:], 1e-300))
            b = np.sqrt(max(zb[0] ** 2 - zb[1:] @ zb[1:], 1e-300))
            s_bar, z_bar = sb / a, zb / b
            gamma = np.sqrt(max((1.0 + s_bar @ z_bar) / 2.0, 1e-300))
            w_bar = (s_bar + J @ z_bar) / (2.0 * gamma)
            eta = np.sqrt(a / b)
            e = np.zeros(k)
            e[0] = 1.0
            v = (w_bar + e) / np.sqrt(2.0 * (w_bar[0] + 1.0))
            W = eta * (2.0 * np.outer(v, v) - J)
            Jv = J @ v
            Winv = (2.0 * np.outer(Jv, Jv) - J) / eta
            lam_b = W @ zb
            lam[block] = lam_b
            socs.append(_SocScaling(W=W, Winv=Winv, W2=W @ W, lam=lam_b))
        return w_lin, socs, lam

    def apply(self, w_lin, socs, v: np.ndarray, inverse: bool = False) -> np.ndarray:
        out = np.empty_like(v)
        l = self.dims.l
        out[:l] = v[:l] / w_lin if inverse else v[:l] * w_lin
        for block, sc in zip(self.slices, socs):
            out[block] = (sc.Winv if inverse else sc.W) @ v[block]
        return out

    def w_squared(self, w_lin, socs) -> sp.csc_matrix:
        blocks = [sp.diags(w_lin ** 2)] if self.dims.l else []
        blocks += [sp.csc_matrix(sc.W2) for sc in socs]
        if not blocks:
            return sp.csc_matrix((0, 0))
        return sp.block_diag(blocks, format="csc")

    def product(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        l = self.dims.l
        out[:l] = u[:l] * v[:l]
        for block in self.slices:
            ub, vb = u[block], v[block]
            out[block.start] = ub @ vb
            out[block.start + 1:block.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return out

    def division(self, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Solve lam o u = d"""
        out = np.empty_like(d)
        l = self.dims.l
        out[:l] = d[:l] / lam[:l]
        for block in self.slices:
            lb, db = lam[block], d[block]
            det = lb[0] ** 2 - lb[1:] @ lb[1:]
            u0 = (lb[0] * db[0] - lb[1:] @ db[1:]) / det
            out[block.start] = u0
            out[block.start + 1:block.stop] = (db[1:] - u0 * lb[1:]) / lb[0]
        return out

    def max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        alpha = np.inf
        l = self.dims.l
        if l:
            neg = dx[:l] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-x[:l][neg] / dx[:l][neg])))
        for block in self.slices:
            alpha = min(alpha, _soc_step(x[block], dx[block]))
        return alpha


def _soc_step(x: np.ndarray, d: np.ndarray) -> float:
    """Largest t with x + t d in the second-order cone, x interior"""
    qa = d[0] ** 2 - d[1:] @ d[1:]
    qb = 2.0 * (x[0] * d[0] - x[1:] @ d[1:])
    qc = x[0] ** 2 - x[1:] @ x[1:]
    roots = []
    if abs(qa) < 1e-14 * max(1.0, abs(qb), abs(qc)):
        if qb < 0:
            roots.append(-qc / qb)
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc >= 0:
            q = -0.5 * (qb + np.copysign(np.sqrt(disc), qb))
            if q != 0:
                roots += [q / qa, qc / q]
    positive = [t for t in roots if t > 0]
    step = min(positive) if positive else np.inf
    if d[0] < 0:
        step = min(step, -x[0] / d[0])
    return step


class InteriorPointSolver:
    """
    Homogeneous self-dual embedding interior-point method for
    min c'x s.t. Ax = b, Gx + s = h, s in R^l_+ x SOC, with Nesterov-Todd
    scaling and a Mehrotra predictor-corrector step.
    """

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings.from_settings()

    def solve(self, form: StandardForm, settings: Optional[SolverSettings] = None) -> ConicSolution:
        """Solve a standard-form conic problem and return primal and dual iterates"""
        settings = settings or self.settings
        started = time.perf_counter()

        A, b, keep_rows = self._drop_empty_rows(form)
        if keep_rows is None:
            return self._trivial(form, SolveStatus.INFEASIBLE, started)

        if form.dims.m == 0 and A.shape[0] == 0:
            status = SolveStatus.OPTIMAL if not np.any(form.c) else SolveStatus.UNBOUNDED
            return self._trivial(form, status, started)

        cones = _Cones(form.dims)
        A_s, G_s, c_s, b_s, h_s, D, E_a, E_g = self._equilibrate(A, form.G, form.c, b, form.h, cones)
        n, p, m = A_s.shape[1], A_s.shape[0], G_s.shape[0]
        delta = settings.regularization
        tol = settings.tolerance

        norm_b = (max(1.0, np.linalg.norm(b)), max(1.0, np.linalg.norm(form.h)))
        norm_c = max(1.0, np.linalg.norm(form.c))

        # initial point
        identity_w2 = sp.identity(m, format="csc")
        lu, K0 = self._factor(A_s, G_s, identity_w2, delta)
        sol = self._kkt_solve(lu, K0, np.concatenate([np.zeros(n), b_s, h_s]), settings.refinement_steps)
        x = sol[:n]
        s = cones.interior_shift(-sol[n + p:])
        sol = self._kkt_solve(lu, K0, np.concatenate([-c_s, np.zeros(p), np.zeros(m)]), settings.refinement_steps)
        y = sol[n:n + p]
        z = cones.interior_shift(sol[n + p:])
        tau, kappa = 1.0, 1.0

        history = []
        status = SolveStatus.MAX_ITER
        iteration = 0
        stats = {}
        for iteration in range(settings.max_iter + 1):
            stats = self._statistics(form, A, b, x, y, z, s, tau, kappa, D, E_a, E_g, norm_b, norm_c)
            stats["iter"] = iteration
            history.append(stats)
            if settings.verbose:
                log(f"ipm {iteration:3d} pcost={stats['pcost']:+.6e} dcost={stats['dcost']:+.6e} "
                    f"gap={stats['gap']:.2e} pres={stats['pres']:.2e} dres={stats['dres']:.2e}", "debug")

            if stats["pres"] <= tol and stats["dres"] <= tol and stats["gap"] <= tol:
                status = SolveStatus.OPTIMAL
                break
            if kappa > tau:
                if stats["pinf"] <= tol:
                    status = SolveStatus.INFEASIBLE
                    break
                if stats["dinf"] <= tol:
                    status = SolveStatus.UNBOUNDED
                    break
            if iteration == settings.max_iter:
                break

            step, error, trial = None, None, delta
            for _ in range(REGULARIZATION_RETRIES + 1):
                try:
                    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                        step = self._step(cones, A_s, G_s, c_s, b_s, h_s, x, y, z, s, tau, kappa, trial,
                                          form.dims.degree, settings.refinement_steps)
                    break
                except SolverError as e:
                    error = e
                    trial = max(trial, 1e-12) * REGULARIZATION_GROWTH
            if step is None:
                fallback = self._near_status(stats, kappa, tau, tol)
                if fallback is None:
                    raise SolverError(f"{error} (iteration {iteration}, pres={stats['pres']:.2e}, "
                                      f"dres={stats['dres']:.2e}, gap={stats['gap']:.2e})")
                log(f"ipm stopped at iteration {iteration}: {error}; last iterate accepted as {fallback.value} "
                    f"within {NEAR_OPTIMAL_FACTOR:g} x tolerance", "warning")
                status = fallback
                break
            x, y, z, s, tau, kappa, stats["step"], stats["sigma"] = step

        if status == SolveStatus.MAX_ITER:
            status = self._near_status(stats, kappa, tau, tol) or status

        x_u = D * x / tau
        y_u = E_a * y / tau
        z_u = E_g * z / tau
        s_u = s / (E_g * tau)
        if status == SolveStatus.INFEASIBLE:
            # certificate: report the normalized ray
            scale = -(b @ (E_a * y) + form.h @ (E_g * z))
            y_u, z_u = E_a * y / scale, E_g * z / scale
        elif status == SolveStatus.UNBOUNDED:
            scale = -(form.c @ (D * x))
            x_u = D * x / scale

        y_full = np.zeros(form.A.shape[0])
        y_full[keep_rows] = y_u
        solution = ConicSolution(
            status=status,
            x=x_u,
            y=y_full,
            z=z_u,
            s=s_u,
            dims=form.dims,
            objective=float(form.c @ x_u + form.offset),
            dual_objective=float(-(b @ y_u) - form.h @ z_u + form.offset),
            gap=float(stats.get("gap", np.inf)),
            primal_residual=float(stats.get("pres", np.inf)),
            dual_residual=float(stats.get("dres", np.inf)),
            iterations=iteration,
            solve_time=time.perf_counter() - started,
            history=history,
        )
        if settings.log_path:
            pd.DataFrame(history).to_csv(settings.log_path, index=False)
        return solution

    @staticmethod
    def _drop_empty_rows(form: StandardForm):
        A = form.A.tocsr()
        counts = np.diff(A.indptr)
        empty = counts == 0
        if np.any(np.abs(form.b[empty]) > 0):
            return A, form.b, None
        keep = np.flatnonzero(~empty)
        return A[keep].tocsc(), form.b[keep], keep

    @staticmethod
    def _equilibrate(A, G, c, b, h, cones: _Cones):
        """Ruiz equilibration; SOC blocks share one row scale so the cone is preserved"""
        A = sp.csr_matrix(A, dtype=float)
        G = sp.csr_matrix(G, dtype=float)
        n = A.shape[1]
        D = np.ones(n)
        E_a = np.ones(A.shape[0])
        E_g = np.ones(G.shape[0])

        def row_max(M):
            if M.shape[0] == 0:
                return np.zeros(0)
            return np.asarray(abs(M).max(axis=1).todense()).ravel()

        for _ in range(EQUILIBRATION_PASSES):
            stacked = sp.vstack([A, G]).tocsc() if (A.shape[0] + G.shape[0]) else None
            col = np.asarray(abs(stacked).max(axis=0).todense()).ravel() if stacked is not None else np.zeros(n)
            d = np.where(col > 0, 1.0 / np.sqrt(col), 1.0)
            ra = row_max(A)
            ea = np.where(ra > 0, 1.0 / np.sqrt(ra), 1.0)
            rg = row_max(G)
            eg = np.where(rg > 0, 1.0 / np.sqrt(rg), 1.0)
            for block in cones.slices:
                top = np.max(rg[block]) if rg[block].size else 0.0
                eg[block] = 1.0 / np.sqrt(top) if top > 0 else 1.0
            A = sp.diags(ea) @ A @ sp.diags(d)
            G = sp.diags(eg) @ G @ sp.diags(d)
            D *= d
            E_a *= ea
            E_g *= eg
        return A.tocsc(), G.tocsc(), D * c, E_a * b, E_g * h, D, E_a, E_g

    @staticmethod
    def _kkt(A, G, W2, delta: float) -> Tuple[sp.csc_matrix, sp.csc_matrix]:
        n, p, m = A.shape[1], A.shape[0], G.shape[0]
        A_coo, G_coo, W_coo = A.tocoo(), G.tocoo(), sp.coo_matrix(W2)
        rows = [A_coo.col, A_coo.row + n, G_coo.col, G_coo.row + n + p, W_coo.row + n + p]
        cols = [A_coo.row + n, A_coo.col, G_coo.row + n + p, G_coo.col, W_coo.col + n + p]
        data = [A_coo.data, A_coo.data, G_coo.data, G_coo.data, -W_coo.data]
        size = n + p + m
        K0 = sp.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
        reg = np.concatenate([np.full(n, delta), np.full(p, -delta), np.full(m, -delta)])
        return (K0 + sp.diags(reg)).tocsc(), K0

    def _step(self, cones: _Cones, A_s, G_s, c_s, b_s, h_s, x, y, z, s, tau: float, kappa: float,
              delta: float, degree: int, refinement_steps: int):
        """One Mehrotra predictor-corrector step of the embedding"""
        n, p = A_s.shape[1], A_s.shape[0]
        r_x = A_s.T @ y + G_s.T @ z + c_s * tau
        r_y = A_s @ x - b_s * tau
        r_z = G_s @ x + s - h_s * tau
        r_tau = kappa + c_s @ x + b_s @ y + h_s @ z

        w_lin, socs, lam = cones.scaling(s, z)
        if not (np.all(np.isfinite(w_lin)) and np.all(np.isfinite(lam))
                and all(np.all(np.isfinite(sc.W2)) and np.all(np.isfinite(sc.Winv)) for sc in socs)):
            raise SolverError("Nesterov-Todd scaling left the finite range")
        W2 = cones.w_squared(w_lin, socs)
        lu, K0 = self._factor(A_s, G_s, W2, delta)

        p_vec = np.concatenate([c_s, b_s, h_s])
        u1 = self._kkt_solve(lu, K0, np.concatenate([-c_s, b_s, h_s]), refinement_steps)
        denominator = p_vec @ u1 - kappa / tau

        def direction(eta: float, d_s: np.ndarray, d_kappa: float):
            w_div = cones.apply(w_lin, socs, cones.division(lam, d_s))
            rhs = np.concatenate([-eta * r_x, -eta * r_y, -eta * r_z + w_div])
            u0 = self._kkt_solve(lu, K0, rhs, refinement_steps)
            d_tau = (-eta * r_tau + d_kappa / tau - p_vec @ u0) / denominator
            u = u0 + d_tau * u1
            dx, dy, dz = u[:n], u[n:n + p], u[n + p:]
            ds = -w_div - W2 @ dz
            d_kap = -(d_kappa + kappa * d_tau) / tau
            return dx, dy, dz, ds, d_tau, d_kap

        def step_length(dz, ds, d_tau, d_kap) -> float:
            alpha = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if d_tau < 0:
                alpha = min(alpha, -tau / d_tau)
            if d_kap < 0:
                alpha = min(alpha, -kappa / d_kap)
            return alpha

        # predictor
        d_s_aff = cones.product(lam, lam)
        dx_a, dy_a, dz_a, ds_a, dtau_a, dkap_a = direction(1.0, d_s_aff, kappa * tau)
        alpha_aff = min(1.0, step_length(dz_a, ds_a, dtau_a, dkap_a))
        sigma = float(np.clip((1.0 - alpha_aff) ** 3, 0.0, 1.0))
        mu = (s @ z + tau * kappa) / (degree + 1)

        # corrector
        second_order = cones.product(cones.apply(w_lin, socs, ds_a, inverse=True),
                                     cones.apply(w_lin, socs, dz_a))
        d_s = d_s_aff + second_order - sigma * mu * cones.identity()
        d_kappa = kappa * tau + dkap_a * dtau_a - sigma * mu
        dx, dy, dz, ds, d_tau, d_kap = direction(1.0 - sigma, d_s, d_kappa)
        alpha = min(1.0, STEP_FRACTION * step_length(dz, ds, d_tau, d_kap))
        if not np.isfinite(alpha) or alpha < MIN_STEP:
            raise SolverError(f"interior-point step stalled (step length {alpha:.1e})")

        step = (x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds,
                tau + alpha * d_tau, kappa + alpha * d_kap)
        if not all(np.all(np.isfinite(v)) for v in step) or step[4] <= 0:
            raise SolverError("non-finite iterate in interior-point step")
        return step + (alpha, sigma)

    @staticmethod
    def _near_status(stats: dict, kappa: float, tau: float, tol: float) -> Optional[SolveStatus]:
        """Status of the last iterate against the reduced tolerance, None when it meets none"""
        if not stats:
            return None
        loose = NEAR_OPTIMAL_FACTOR * tol
        if stats["pres"] <= loose and stats["dres"] <= loose and stats["gap"] <= loose:
            return SolveStatus.OPTIMAL
        if kappa > tau:
            if stats["pinf"] <= loose:
                return SolveStatus.INFEASIBLE
            if stats["dinf"] <= loose:
                return SolveStatus.UNBOUNDED
        return None

    def _factor(self, A, G, W2, delta: float):
        """LU of the regularized KKT matrix; the regularization grows until the factorization succeeds"""
        error = None
        for _ in range(REGULARIZATION_RETRIES + 1):
            K_reg, K0 = self._kkt(A, G, W2, delta)
            try:
                lu = splu(K_reg)
            except RuntimeError as e:
                error = e
                delta = max(delta, 1e-12) * REGULARIZATION_GROWTH
                continue
            return lu, K0
        raise SolverError(f"KKT system is singular after regularization: {error}")

    @staticmethod
    def _kkt_solve(lu, K0, rhs: np.ndarray, steps: int) -> np.ndarray:
        u = lu.solve(rhs)
        for _ in range(steps):
            u = u + lu.solve(rhs - K0 @ u)
        if not np.all(np.isfinite(u)):
            raise SolverError("KKT solve produced non-finite values")
        return u

    @staticmethod
    def _statistics(form, A, b, x, y, z, s, tau, kappa, D, E_a, E_g, norm_b, norm_c):
        """Residuals on the unscaled problem"""
        xu, yu, zu, su = D * x, E_a * y, E_g * z, s / E_g
        primal_eq = A @ xu - b * tau
        primal_in = form.G @ xu + su - form.h * tau
        dual = A.T @ yu + form.G.T @ zu + form.c * tau
        pcost = form.c @ xu / tau
        dcost = -(b @ yu + form.h @ zu) / tau
        gap = (su @ zu) / tau ** 2
        pres = max(np.linalg.norm(primal_eq) / norm_b[0] if primal_eq.size else 0.0,
                   np.linalg.norm(primal_in) / norm_b[1] if primal_in.size else 0.0) / tau
        dres = np.linalg.norm(dual) / tau / norm_c
        dual_ray = b @ yu + form.h @ zu
        pinf = (np.linalg.norm(A.T @ yu + form.G.T @ zu) / -dual_ray) if dual_ray < 0 else np.inf
        primal_ray = form.c @ xu
        if primal_ray < 0:
            ray_res = max(np.linalg.norm(A @ xu) if A.shape[0] else 0.0,
                          np.linalg.norm(form.G @ xu + su) if form.G.shape[0] else 0.0)
            dinf = ray_res / -primal_ray
        else:
            dinf = np.inf
        return {
            "pcost": float(pcost),
            "dcost": float(dcost),
            "gap": float(gap / max(1.0, abs(pcost))),
            "pres": float(pres),
            "dres": float(dres),
            "pinf": float(pinf),
            "dinf": float(dinf),
            "tau": float(tau),
            "kappa": float(kappa),
            "step": np.nan,
            "sigma": np.nan,
        }

    @staticmethod
    def _trivial(form: StandardForm, status: SolveStatus, started: float) -> ConicSolution:
        n = form.A.shape[1]
        return ConicSolution(
            status=status,
            x=np.zeros(n),
            y=np.zeros(form.A.shape[0]),
            z=np.zeros(form.dims.m),
            s=np.zeros(form.dims.m),
            dims=form.dims,
            objective=float(form.offset),
            dual_objective=float(form.offset),
            gap=0.0,
            primal_residual=0.0,
            dual_residual=0.0,
            iterations=0,
            solve_time=time.perf_counter() - started,
        )


class ScsBackend:
    """External SCS solver behind the same interface (optional dependency)"""

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings.from_settings()

    def solve(self, form: StandardForm, settings: Optional[SolverSettings] = None) -> ConicSolution:
        import scs

        settings = settings or self.settings
        started = time.perf_counter()
        data = {
            "A": sp.vstack([form.A, form.G], format="csc"),
            "b": np.concatenate([form.b, form.h]),
            "c": form.c,
        }
        cone = {"z": form.A.shape[0], "l": form.dims.l, "q": list(form.dims.q)}
        result = scs.solve(data, cone, eps_abs=settings.tolerance, eps_rel=settings.tolerance,
                           max_iters=max(settings.max_iter, 10000), verbose=settings.verbose)
        info = result["info"]
        text = str(info.get("status", "")).lower()
        if text.startswith("solved"):
            status = SolveStatus.OPTIMAL
        elif "infeasible" in text:
            status = SolveStatus.INFEASIBLE
        elif "unbounded" in text:
            status = SolveStatus.UNBOUNDED
        else:
            status = SolveStatus.MAX_ITER
        p = form.A.shape[0]
        x, y_all, s_all = result["x"], result["y"], result["s"]
        # SCS stationarity is A'y + c = 0 with y on the stacked rows
        y, z = y_all[:p], y_all[p:]
        return ConicSolution(
            status=status,
            x=x,
            y=y,
            z=z,
            s=s_all[p:],
            dims=form.dims,
            objective=float(form.c @ x + form.offset),
            dual_objective=float(-(form.b @ y) - form.h @ z + form.offset),
            gap=float(info.get("gap", np.nan)),
            primal_residual=float(info.get("res_pri", np.nan)),
            dual_residual=float(info.get("res_dual", np.nan)),
            iterations=int(info.get("iter", 0)),
            solve_time=time.perf_counter() - started,
        )


def get_solver(settings: Optional[SolverSettings] = None) -> ConicBackend:
    settings = settings or SolverSettings.from_settings()
    if settings.backend == "scs":
        return ScsBackend(settings)
    return InteriorPointSolver(settings)
