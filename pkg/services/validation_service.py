import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import get_settings
from models.case import NetworkCase
from models.robust import RobustSetpoints
from models.uncertainty import Scenario, ScenarioLabel, UncertaintySpec
from models.validation import (
    CONSTRAINT_FAMILIES,
    EnvelopeEntry,
    ScenarioRecord,
    ValidationReport,
    Verdict,
)
from services.pf_service import PfNetwork, PowerFlowService, QuantityLayout
from utils.exceptions import UncertaintyError
from utils.log import banner, log


class ValidationService:
    def __init__(self, settings=None, pf_service: Optional[PowerFlowService] = None):
        self.settings = settings or get_settings()
        self.pf_service = pf_service or PowerFlowService(self.settings)

    def generate_scenarios(self, unc: UncertaintySpec, mode: str = "in-range", n_scenarios: Optional[int] = None,
                           seed: Optional[int] = None) -> Iterator[Scenario]:
        """
        Seeded scenario stream. Every scenario draws from its own child of the
        master seed, so a scenario depends only on (seed, id).

        In-range coordinates are uniform on [-mu_bar, mu_bar]. Out-of-range
        coordinates pick a side by a fair coin and are uniform on the band of
        width OUT_OF_RANGE_WIDTH x nominal just outside the box.
        """
        label = ScenarioLabel(mode)
        n_scenarios = self.settings.N_SCENARIOS if n_scenarios is None else n_scenarios
        seed = self.settings.SEED if seed is None else seed
        if n_scenarios < 1:
            raise UncertaintyError(f"scenario count must be at least 1, got {n_scenarios}")

        mu_bar = unc.mu_bar
        width = self.settings.OUT_OF_RANGE_WIDTH * np.abs(unc.nominal)
        if label == ScenarioLabel.OUT_OF_RANGE:
            if unc.size == 0:
                raise UncertaintyError("out-of-range sampling needs at least one uncertain injection")
            degenerate = [name for name, bound in zip(unc.names, mu_bar) if bound <= 0]
            if degenerate:
                raise UncertaintyError(f"out-of-range band is degenerate for zero-width coordinates: "
                                       f"{', '.join(degenerate)}")
            if np.any(width <= 0):
                raise UncertaintyError("out-of-range band needs a positive nominal injection per coordinate")

        for k, child in enumerate(np.random.SeedSequence(seed).spawn(n_scenarios)):
            rng = np.random.default_rng(child)
            if label == ScenarioLabel.IN_RANGE:
                mu = rng.uniform(-mu_bar, mu_bar) if unc.size else np.zeros(0)
            else:
                side = np.where(rng.integers(0, 2, size=unc.size) == 1, 1.0, -1.0)
                # 1 - U lies in (0, 1], so |mu| stays strictly outside the box
                mu = side * (mu_bar + width * (1.0 - rng.random(unc.size)))
            yield Scenario(id=k, label=label, mu=mu.tolist())

    def validate(self, case: NetworkCase, setpoints: RobustSetpoints, unc: UncertaintySpec,
                 mode: str = "in-range", n_scenarios: Optional[int] = None, seed: Optional[int] = None,
                 workers: Optional[int] = None, reference: Optional[RobustSetpoints] = None) -> ValidationReport:
        """Run the power flow and the constraint check for every scenario and aggregate the outcome"""
        label = ScenarioLabel(mode)
        n_scenarios = self.settings.N_SCENARIOS if n_scenarios is None else n_scenarios
        seed = self.settings.SEED if seed is None else seed
        workers = self.settings.VALIDATION_WORKERS if workers is None else workers

        banner()
        log(f"Validating {setpoints.mode.value} setpoints of {case.name}: {n_scenarios} {label.value} scenarios, "
            f"seed {seed}, {workers} worker(s)")
        started = time.perf_counter()

        network = self.pf_service.prepare(case, setpoints, unc)
        scenarios = self.generate_scenarios(unc, label.value, n_scenarios, seed)

        def run(scenario: Scenario) -> Tuple[ScenarioRecord, Optional[np.ndarray]]:
            return self._run_scenario(case, setpoints, unc, scenario, network)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(run, scenarios))
        else:
            outcomes = [run(scenario) for scenario in scenarios]
        outcomes.sort(key=lambda outcome: outcome[0].id)

        records = [record for record, _ in outcomes]
        violated = sum(1 for record in records if record.violated)
        diverged = sum(1 for record in records if not record.converged)
        histogram = {family: 0 for family in CONSTRAINT_FAMILIES}
        histogram["divergence"] = 0
        for record in records:
            for family in record.families:
                histogram[family] = histogram.get(family, 0) + 1

        verdict = Verdict.ROBUST if violated == 0 else Verdict.NOT_ROBUST
        report = ValidationReport(
            case_name=case.name,
            setpoints_mode=setpoints.mode.value,
            mode=label,
            n_scenarios=n_scenarios,
            seed=seed,
            violation_count=violated,
            divergence_count=diverged,
            violation_probability=violated / n_scenarios,
            family_histogram=histogram,
            verdict=verdict,
            eta=self.eta(setpoints, reference) if reference is not None else None,
            envelope=self._envelope(network.layout, outcomes),
            scenarios=records,
            wall_time=time.perf_counter() - started,
        )
        log(f"{violated}/{n_scenarios} scenarios violated ({report.violation_percent:.2f}%), "
            f"{diverged} diverged; x is {verdict.value}")
        banner()
        return report

    def _run_scenario(self, case: NetworkCase, setpoints: RobustSetpoints, unc: UncertaintySpec,
                      scenario: Scenario, network: PfNetwork) -> Tuple[ScenarioRecord, Optional[np.ndarray]]:
        pf = self.pf_service.run_pf(case, setpoints, scenario, unc, network=network)
        if not pf.converged:
            log(f"Scenario {scenario.id}: {pf.message}", "debug")
            record = ScenarioRecord(id=scenario.id, label=scenario.label, converged=False,
                                    iterations=pf.iterations, psi=pf.psi, violated=True, families=["divergence"])
            return record, None

        values = network.layout.values(pf)
        evaluation = self.pf_service.evaluate_values(network.layout, values)
        record = ScenarioRecord(
            id=scenario.id,
            label=scenario.label,
            converged=True,
            iterations=pf.iterations,
            psi=pf.psi,
            violated=evaluation.violated,
            margins={family: worst.margin for family, worst in evaluation.worst.items()},
            families=evaluation.violated_families,
        )
        return record, values

    @staticmethod
    def _envelope(layout: QuantityLayout,
                  outcomes: List[Tuple[ScenarioRecord, Optional[np.ndarray]]]) -> List[EnvelopeEntry]:
        """Min and max over converged scenarios of every monitored quantity"""
        values = [v for _, v in outcomes if v is not None]
        if not values:
            return []
        stacked = np.vstack(values)
        low, high = stacked.min(axis=0), stacked.max(axis=0)
        return [
            EnvelopeEntry(family=family, element=element, min_value=float(lo), max_value=float(hi),
                          lower_limit=lower, upper_limit=upper)
            for (family, element, lower, upper), lo, hi in zip(layout.entries, low, high)
        ]

    @staticmethod
    def eta(setpoints: RobustSetpoints, reference: RobustSetpoints) -> float:
        """Maximum absolute difference between two setpoint vectors (P_g then c_ii)"""
        x, x_ref = setpoints.x_vector, reference.x_vector
        if x.shape != x_ref.shape:
            raise UncertaintyError(f"reference setpoints have {x_ref.size} entries, expected {x.size}")
        return float(np.max(np.abs(x - x_ref))) if x.size else 0.0

    @staticmethod
    def summary_frame(reports: Dict[str, ValidationReport]) -> pd.DataFrame:
        """One row per labelled report with the headline statistics"""
        rows = []
        for name, report in reports.items():
            rows.append({
                "run": name,
                "case": report.case_name,
                "setpoints": report.setpoints_mode,
                "mode": report.mode.value,
                "n_scenarios": report.n_scenarios,
                "violation_percent": report.violation_percent,
                "divergences": report.divergence_count,
                "verdict": report.verdict.value,
            })
        return pd.DataFrame(rows)
