import click

from commands.common import EXIT_OK, fail, get_study_service


@click.command("report")
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", type=click.Path(), default=None, help="CSV file for the comparison table")
@click.pass_context
def report(ctx, paths, output_path):
    """Merge solution and validation JSON files into one comparison table"""
    service = get_study_service()
    try:
        table = service.report(list(paths), output_path)
        click.echo(table.to_string(index=False) if not table.empty else "No solutions found")
        code = EXIT_OK
    except Exception as e:
        code = fail(e)
    ctx.exit(code)
