import click

from commands import convert, report, solve, validate


@click.group(help="Robust SOC-relaxed ACOPF toolkit")
def cli():
    pass


# Register commands
cli.add_command(solve.solve)
cli.add_command(validate.validate)
cli.add_command(convert.convert)
cli.add_command(report.report)

if __name__ == "__main__":
    cli()
