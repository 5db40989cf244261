# Connect all sub cli to a top level namespace
import sys

import click
from loguru import logger

from hybridca.scripts.data_cli import synth_data
from hybridca.scripts.experiment_cli import crossval, grad_check, pretrain, report

LOG_LEVELS = ["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR"]


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(LOG_LEVELS, case_sensitive=False),
    default="INFO",
    show_default=True,
    help="Minimum level of log messages written to stderr",
)
def cli(log_level):
    logger.remove()
    logger.add(sys.stderr, level=log_level.upper())


cli.add_command(synth_data)
cli.add_command(pretrain)
cli.add_command(crossval)
cli.add_command(grad_check)
cli.add_command(report)
