import json
import os
import time
from datetime import datetime
from importlib.metadata import PackageNotFoundError, version
from typing import Dict, List, Optional, Tuple

import pandas as pd

from config import get_settings
from models.case import NetworkCase
from models.conic import SolverSettings
from models.robust import RobustMode, RobustSetpoints
from models.study import RunManifest, SolutionArtifact, SolveMode, StudyConfig, ValidationArtifact
from models.uncertainty import UncertaintySpec
from services.case_service import CaseService
from services.opf_service import OpfService
from services.robust_service import RobustService
from services.validation_service import ValidationService
from utils.exceptions import CaseFormatError
from utils.helpers import format_response, write_json
from utils.log import log

_VERSIONED = ("numpy", "scipy", "pandas", "pydantic", "python-decouple", "click")
_PLOT_FAMILIES = {
    "flow": ("flow",),
    "voltage": ("voltage",),
    "generation": ("gen_p", "gen_q", "ramp"),
}
REPORT_COLUMNS = ["case", "mode", "res_percent", "load_percent", "gamma", "objective", "time",
                  "in_range_percent", "out_of_range_percent", "config_hash"]


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in _VERSIONED:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class StudyService:
    """Ties case preparation, solves, validation and artifact writing into reproducible runs"""

    def __init__(self, settings=None, case_service: Optional[CaseService] = None,
                 robust_service: Optional[RobustService] = None,
                 validation_service: Optional[ValidationService] = None):
        self.settings = settings or get_settings()
        self.case_service = case_service or CaseService(self.settings)
        self.robust_service = robust_service or RobustService(
            self.settings, OpfService(self.settings, case_service=self.case_service))
        self.validation_service = validation_service or ValidationService(self.settings)

    @property
    def opf_service(self) -> OpfService:
        return self.robust_service.opf_service

    def solver_settings(self, config: StudyConfig, log_path: Optional[str] = None) -> SolverSettings:
        return SolverSettings.from_settings(tolerance=config.solver_tolerance, log_path=log_path)

    def prepare_case(self, config: StudyConfig, settings: Optional[SolverSettings] = None) -> NetworkCase:
        """Load the case, place RES capacity and set ramp limits as the configuration asks"""
        case = self.case_service.load_case(config.case_path, config.case_format,
                                           linearize_quadratic=config.linearize_quadratic)
        case = self.case_service.place_res(case, config.res_penetration, seed=config.seed,
                                           placement=config.res_placement,
                                           rating_factor=config.res_rating_factor)
        mode = config.ramp_mode or self.settings.RAMP_MODE
        base_points = None
        if mode == "literal":
            base_points = self.robust_service.solve_deterministic(case, config.eps_theta, settings).p_g
        return self.case_service.apply_ramp_limits(case, config.ramp_fraction, mode, base_points)

    def uncertainty(self, config: StudyConfig, case: NetworkCase) -> UncertaintySpec:
        unc = self.opf_service.build_uncertainty(case, config.load_uncertainty, config.res_uncertainty)
        if config.gamma is not None:
            gamma = min(config.gamma, unc.size)
            unc = unc.model_copy(update={"gamma": gamma})
        return unc

    def solve(self, config: StudyConfig) -> Tuple[SolutionArtifact, List[str]]:
        """Deterministic or robust solve; writes the solution, the solver log and a run manifest"""
        started = time.perf_counter()
        tag = config.short_id
        solver_log = os.path.join(config.output_dir, f"solver_{tag}.csv")
        os.makedirs(config.output_dir, exist_ok=True)
        settings = self.solver_settings(config, solver_log)

        case = self.prepare_case(config, settings)
        unc = self.uncertainty(config, case)
        budget = None
        if config.mode == SolveMode.DETERMINISTIC:
            setpoints = self.robust_service.solve_deterministic(case, config.eps_theta, settings)
        elif unc.size == 0:
            log("Uncertainty set is empty; the robust counterpart reduces to the deterministic ACOPF")
            setpoints = self.robust_service.solve_deterministic(case, config.eps_theta, settings)
            setpoints = setpoints.model_copy(update={"mode": RobustMode.FULL})
        elif unc.gamma is not None and unc.gamma < unc.size:
            budget = self.robust_service.select_budget(case, unc, unc.gamma, config.eps_theta, settings)
            setpoints = budget.setpoints
        else:
            setpoints = self.robust_service.solve_robust(case, unc, config.eps_theta, settings)

        artifact = SolutionArtifact(
            config_hash=config.identity,
            config=config,
            setpoints=setpoints.model_copy(update={"solve_time": 0.0}),
            budget=budget.model_copy(update={"setpoints": budget.setpoints.model_copy(update={"solve_time": 0.0})})
            if budget else None,
        )
        if config.mode == SolveMode.ROBUST and unc.size:
            artifact.strong_duality = self.robust_service.cross_check_strong_duality(
                case, unc, setpoints, config.eps_theta, settings)
            if config.refine_participation:
                artifact.refinement = self.robust_service.refine_participation(
                    case, unc, setpoints, config.eps_theta, settings)
        if config.check_exactness:
            artifact.exactness = self.robust_service.exactness_check(case, unc, setpoints, config.eps_theta, settings)

        wall_time = time.perf_counter() - started
        artifact.timing = {"solve_time": setpoints.solve_time, "wall_time": wall_time}
        solution_path = os.path.join(config.output_dir, f"solution_{tag}.json")
        write_json(solution_path, artifact.model_dump(mode="json"))
        artifacts = [solution_path] + ([solver_log] if os.path.exists(solver_log) else [])
        self.write_manifest(config, "solve", artifacts, wall_time, "SUCCESS",
                            f"{setpoints.mode.value} objective {setpoints.objective:.6f}")
        log(f"Wrote {solution_path}")
        return artifact, artifacts

    def load_solution(self, path: str) -> SolutionArtifact:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return SolutionArtifact.model_validate(json.load(handle))
        except json.JSONDecodeError as e:
            raise CaseFormatError(f"solution file is not valid JSON: {e.msg}", location=f"{path}:{e.lineno}:{e.colno}")

    def validate(self, setpoints_path: str, mode: str = "in-range", n_scenarios: Optional[int] = None,
                 seed: Optional[int] = None, workers: Optional[int] = None,
                 reference_path: Optional[str] = None,
                 output_dir: Optional[str] = None) -> Tuple[ValidationArtifact, List[str]]:
        """Monte-Carlo validation of a stored solution; writes the report, the envelope and plot data"""
        started = time.perf_counter()
        solution = self.load_solution(setpoints_path)
        config = solution.config
        if output_dir:
            config = config.model_copy(update={"output_dir": output_dir})
        n_scenarios = config.n_scenarios if n_scenarios is None else n_scenarios
        seed = config.seed if seed is None else seed
        settings = self.solver_settings(config)

        case = self.prepare_case(config, settings)
        unc = self.uncertainty(config, case)
        reference = self.load_solution(reference_path).setpoints if reference_path else None
        report = self.validation_service.validate(case, solution.setpoints, unc, mode, n_scenarios, seed,
                                                  workers=workers, reference=reference)

        tag = f"{config.short_id}_{report.mode.value}"
        out = config.output_dir
        os.makedirs(out, exist_ok=True)
        artifact = ValidationArtifact(
            config_hash=solution.config_hash,
            setpoints_path=os.path.basename(setpoints_path),
            report=report.model_copy(update={"wall_time": 0.0}),
            timing={"wall_time": report.wall_time},
        )
        paths = {
            "report": os.path.join(out, f"report_{tag}.json"),
            "envelope": os.path.join(out, f"envelope_{tag}.csv"),
            "scenarios": os.path.join(out, f"scenarios_{tag}.csv"),
        }
        write_json(paths["report"], artifact.model_dump(mode="json"))
        envelope = report.envelope_frame()
        envelope.insert(0, "config_hash", solution.config_hash)
        envelope.to_csv(paths["envelope"], index=False)
        report.scenario_frame().to_csv(paths["scenarios"], index=False)
        for name, families in _PLOT_FAMILIES.items():
            path = os.path.join(out, f"plot_{name}_{tag}.csv")
            envelope[envelope["family"].isin(families)].to_csv(path, index=False)
            paths[f"plot_{name}"] = path

        artifacts = list(paths.values())
        self.write_manifest(config, f"validate:{report.mode.value}", artifacts, time.perf_counter() - started,
                            "SUCCESS" if report.robust else "WARNING",
                            f"violation probability {report.violation_percent:.2f}%")
        return artifact, artifacts

    def convert(self, case_path: str, output_path: Optional[str] = None, fmt: Optional[str] = None,
                linearize_quadratic: bool = False) -> str:
        """Case file to canonical native JSON; returns the text and writes it when a path is given"""
        case = self.case_service.load_case(case_path, fmt, linearize_quadratic=linearize_quadratic)
        text = self.case_service.dump_case(case)
        if output_path:
            parent = os.path.dirname(output_path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(output_path, "w", encoding="utf-8") as handle:
                handle.write(text)
            log(f"Converted {case_path} -> {output_path}")
        return text

    def report(self, paths: List[str], output_path: Optional[str] = None) -> pd.DataFrame:
        """
        Merge solution and validation JSON files into one comparison table,
        one row per solution, validation percentages joined by config hash.
        """
        solutions: Dict[str, SolutionArtifact] = {}
        validations: Dict[str, Dict[str, float]] = {}
        for path in paths:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
            if "report" in data:
                artifact = ValidationArtifact.model_validate(data)
                validations.setdefault(artifact.config_hash, {})[artifact.report.mode.value] = \
                    artifact.report.violation_percent
            elif "setpoints" in data:
                artifact = SolutionArtifact.model_validate(data)
                solutions[artifact.config_hash] = artifact
            else:
                log(f"Skipping {path}: neither a solution nor a validation report", "warning")

        rows = []
        for config_hash, artifact in solutions.items():
            config, setpoints = artifact.config, artifact.setpoints
            checks = validations.get(config_hash, {})
            rows.append({
                "case": setpoints.case_name,
                "mode": setpoints.mode.value,
                "res_percent": 100.0 * config.res_uncertainty,
                "load_percent": 100.0 * config.load_uncertainty,
                "gamma": "full" if setpoints.gamma is None else setpoints.gamma,
                "objective": setpoints.objective,
                "time": artifact.timing.get("solve_time"),
                "in_range_percent": checks.get("in-range"),
                "out_of_range_percent": checks.get("out-of-range"),
                "config_hash": config_hash[:12],
            })
        table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
        if not table.empty:
            table = table.sort_values(["case", "mode", "res_percent", "load_percent", "objective"],
                                      kind="stable").reset_index(drop=True)
        if output_path:
            parent = os.path.dirname(output_path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            table.to_csv(output_path, index=False)
        return table

    def write_manifest(self, config: StudyConfig, command: str, artifacts: List[str], wall_time: float,
                       status: str, message: str) -> str:
        manifest = RunManifest(
            config_hash=config.identity,
            command=command,
            versions=package_versions(),
            wall_time=wall_time,
            timestamp=datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
            artifacts=[os.path.basename(path) for path in artifacts],
            status=status,
            message=message,
        )
        path = os.path.join(config.output_dir, f"manifest_{command.replace(':', '_')}_{config.short_id}.json")
        write_json(path, manifest.model_dump(mode="json"))
        return path

    @staticmethod
    def summary(setpoints: RobustSetpoints) -> Dict:
        """Short result block for the console"""
        data = {
            "case": setpoints.case_name,
            "mode": setpoints.mode.value,
            "objective": round(setpoints.objective, 6),
            "gamma": setpoints.gamma,
            "psi": round(setpoints.psi, 6) if setpoints.mu_star else None,
            "warnings": len(setpoints.warnings) or None,
        }
        return format_response("SUCCESS" if not setpoints.warnings else "WARNING",
                               f"{setpoints.mode.value} setpoints for {setpoints.case_name}", data)
