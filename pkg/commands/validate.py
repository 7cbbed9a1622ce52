import click

from commands.common import EXIT_OK, EXIT_VIOLATIONS, emit, fail, get_study_service
from models.uncertainty import ScenarioLabel
from utils.helpers import format_response


@click.command("validate")
@click.option("--setpoints", "setpoints_path", required=True, type=click.Path(),
              help="Solution JSON written by solve")
@click.option("--mode", type=click.Choice([label.value for label in ScenarioLabel]), default="in-range")
@click.option("--n-scenarios", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Solution JSON to measure the setpoint difference against")
@click.option("--output-dir", envvar="OUTPUT_DIR", default=None)
@click.pass_context
def validate(ctx, setpoints_path, mode, n_scenarios, seed, workers, reference_path, output_dir):
    """
    Monte-Carlo robustness check of stored setpoints. Exits 4 when an
    in-range scenario violates a constraint or diverges.
    """
    service = get_study_service()
    try:
        artifact, paths = service.validate(setpoints_path, mode, n_scenarios, seed, workers, reference_path,
                                           output_dir)
        report = artifact.report
        status = "SUCCESS" if report.robust else "WARNING"
        emit(format_response(status, f"x is {report.verdict.value} ({report.mode.value})", {
            "violation_percent": report.violation_percent,
            "divergences": report.divergence_count,
            "eta": report.eta,
            "config_hash": artifact.config_hash,
            "artifacts": paths,
        }))
        in_range = report.mode == ScenarioLabel.IN_RANGE
        code = EXIT_VIOLATIONS if in_range and not report.robust else EXIT_OK
    except Exception as e:
        code = fail(e)
    ctx.exit(code)
