import click

from commands.common import EXIT_OK, emit, fail, get_study_service
from utils.helpers import format_response


@click.command("convert")
@click.argument("case_path", type=click.Path())
@click.option("--output", "output_path", type=click.Path(), default=None, help="Target JSON file; stdout when omitted")
@click.option("--format", "case_format", type=click.Choice(["mcase", "native-json"]), default=None)
@click.option("--linearize-quadratic", is_flag=True)
@click.pass_context
def convert(ctx, case_path, output_path, case_format, linearize_quadratic):
    """Convert a MATPOWER-style case to canonical native JSON"""
    service = get_study_service()
    try:
        text = service.convert(case_path, output_path, case_format, linearize_quadratic)
        if output_path:
            emit(format_response("SUCCESS", f"Wrote {output_path}"))
        else:
            click.echo(text)
        code = EXIT_OK
    except Exception as e:
        code = fail(e)
    ctx.exit(code)
