import click

from cropforge import configure_logging
from cropforge.commands import register_commands


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=None,
    envvar="CROPFORGE_LOG_LEVEL",
    help="Log level for structured events on stderr.",
)
def cli(log_level):
    """cropforge: synthetic conditioned cropping, from data to crops."""
    configure_logging(log_level)


register_commands(cli)


if __name__ == "__main__":
    cli()
