#!/usr/bin/env python3
"""
Standalone budget sweep: solve the robust ACOPF for every budget from 0 to
the number of uncertain injections, validate each solution in range and
write one comparison table.

    python scripts/budget_sweep.py CASE [LOAD_UNC] [RES_UNC] [N_SCENARIOS]
"""

import os
import sys
from pathlib import Path

# Add the parent directory to the path so we can import our modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import get_settings
from models.study import StudyConfig
from services.study_service import StudyService
from services.validation_service import ValidationService
from utils.helpers import clear_artifacts, script_arg
from utils.log import banner, log


def sweep(case_path: str, load_unc: float, res_unc: float, n_scenarios: int, output_dir: str):
    service = StudyService()
    base = StudyConfig(case_path=case_path, load_uncertainty=load_unc, res_uncertainty=res_unc,
                       n_scenarios=n_scenarios, output_dir=output_dir)
    case = service.prepare_case(base)
    size = service.uncertainty(base, case).size
    log(f"Sweeping budgets 0..{size} on {case.name}")

    artifacts, reports = [], {}
    for gamma in range(size + 1):
        config = base.model_copy(update={"gamma": gamma if gamma < size else None})
        _, paths = service.solve(config)
        artifacts.append(paths[0])
        validation, validation_paths = service.validate(paths[0])
        label = f"gamma={gamma if gamma < size else 'full'}"
        reports[label] = validation.report
        artifacts.append(validation_paths[0])

    table = service.report(artifacts, os.path.join(output_dir, "budget_sweep.csv"))
    summary = ValidationService.summary_frame(reports)
    summary.to_csv(os.path.join(output_dir, "budget_sweep_validation.csv"), index=False)
    return table, summary


def main():
    """Main function for the standalone budget sweep"""
    if len(sys.argv) < 2:
        print(__doc__)
        sys.exit(1)
    settings = get_settings()
    case_path = sys.argv[1]
    args = sys.argv[2:]
    load_unc = script_arg(args, 0, float, 0.05)
    res_unc = script_arg(args, 1, float, 0.0)
    n_scenarios = script_arg(args, 2, int, settings.N_SCENARIOS)

    # the table only holds this sweep's runs
    output_dir = os.path.join(settings.OUTPUT_DIR, "budget_sweep")
    clear_artifacts(output_dir)

    banner()
    table, summary = sweep(case_path, load_unc, res_unc, n_scenarios, output_dir)
    log("\n" + table.to_string(index=False))
    log("\n" + summary.to_string(index=False))
    banner()


if __name__ == "__main__":
    main()
