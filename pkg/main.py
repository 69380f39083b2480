"""
Heatrisk CLI - Main Entry Point

Click group for the heat exposure and mortality pipeline.
Every sub-command runs one stage against the registry of the output directory.
"""

import click
from dotenv import load_dotenv

from commands import CliState
from logging_config import setup_logging

# Load environment variables
load_dotenv()

VERSION = "1.0.0"


@click.group()
@click.version_option(VERSION, prog_name="heatrisk")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file")
@click.option("--seed", type=int, default=None, help="Root seed (overrides the config)")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory (overrides the config)")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker pool size")
@click.option("--force", is_flag=True, help="Re-run stages whose artifacts are up to date")
@click.option("--log-level", default=None, help="Log level (default HEATRISK_LOG_LEVEL or INFO)")
@click.pass_context
def cli(ctx, config_path, seed, out, workers, force, log_level):
    """Municipality heat exposure surfaces and heat-mortality risk curves."""
    setup_logging(log_level)
    ctx.obj = CliState(config_path, {"seed": seed, "out": out, "workers": workers}, force)


# Import commands
from commands import stages, tools  # noqa: E402

for command in (*stages.COMMANDS, *tools.COMMANDS):
    cli.add_command(command)


if __name__ == "__main__":
    cli()
