import click

from commands.common import EXIT_OK, emit, fail, get_study_service, output_dir_option
from models.study import StudyConfig
from utils.exceptions import ToolkitError


@click.command("solve")
@click.option("--case", "case_path", type=click.Path(), help="Case file (.m or .json)")
@click.option("--format", "case_format", type=click.Choice(["mcase", "native-json"]), default=None)
@click.option("--mode", type=click.Choice(["deterministic", "robust"]), default=None)
@click.option("--load-unc", "load_uncertainty", type=float, default=None, help="Load uncertainty, fraction of P_d")
@click.option("--res-unc", "res_uncertainty", type=float, default=None, help="RES uncertainty, fraction of P_r")
@click.option("--gamma", default=None, help="Uncertainty budget or 'full'")
@click.option("--eps-theta", type=float, default=None)
@click.option("--ramp-fraction", type=float, default=None)
@click.option("--ramp-mode", type=click.Choice(["scaled", "literal"]), default=None)
@click.option("--res-penetration", type=float, default=None, help="RES output as a fraction of generation capacity")
@click.option("--res-rating-factor", type=float, default=None)
@click.option("--tolerance", "solver_tolerance", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n-scenarios", type=int, default=None)
@click.option("--linearize-quadratic", is_flag=True)
@click.option("--check-exactness", is_flag=True)
@click.option("--refine-participation", is_flag=True)
@click.option("--output-dir", envvar="OUTPUT_DIR", default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="StudyConfig JSON; flags override its fields")
@click.pass_context
def solve(ctx, config_path, **flags):
    """
    Solve the deterministic or robust SOC-relaxed ACOPF and write the
    solution, solver log and run manifest
    """
    # unset options and unset flags leave the config file in charge
    overrides = {k: v for k, v in flags.items() if v is not None and v is not False}
    service = get_study_service()
    try:
        if not config_path and "case_path" not in overrides:
            raise ToolkitError("either --case or --config is required")
        if config_path:
            config = StudyConfig.from_file(config_path, **overrides)
        else:
            config = StudyConfig.model_validate({**overrides, "output_dir": output_dir_option(flags["output_dir"])})
        artifact, paths = service.solve(config)
        payload = service.summary(artifact.setpoints)
        payload["data"].update({"config_hash": artifact.config_hash, "artifacts": paths})
        emit(payload)
        code = EXIT_OK
    except Exception as e:
        code = fail(e)
    ctx.exit(code)
