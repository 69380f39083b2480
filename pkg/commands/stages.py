"""
Stage Commands

One sub-command per pipeline stage, from station preparation to the
epidemiological fits.
"""

import click

from commands import CliState, run_stage
from services.casecrossover import OUTCOME_MAIN, OUTCOME_NEGATIVE_CONTROL
from services.pipeline import METHODS

pass_state = click.make_pass_decorator(CliState)

method_option = click.option("--method", type=click.Choice(METHODS), default=None, help="Exposure method")
tau_option = click.option("--tau", type=click.FloatRange(0, 1, min_open=True, max_open=True), default=None, help="GQRM quantile level")
outcome_option = click.option(
    "--outcome",
    type=click.Choice([OUTCOME_MAIN, OUTCOME_NEGATIVE_CONTROL]),
    default=OUTCOME_MAIN,
    show_default=True,
)


@click.command("prep")
@pass_state
def prep(state: CliState):
    """Select and gap-fill stations; write the GQRM and GGPM station tables."""
    run_stage(state, "prep")


@click.command("fit-gqrm")
@tau_option
@click.option("--resume", is_flag=True, help="Continue from the sampler checkpoint")
@pass_state
def fit_gqrm(state: CliState, tau, resume):
    """Fit the quantile autoregression at each configured tau (or --tau)."""
    run_stage(state, "fit-gqrm", tau=tau, resume=resume)


@click.command("surface")
@click.option("--method", type=click.Choice(METHODS), default="gqrm", show_default=True)
@tau_option
@pass_state
def surface(state: CliState, method, tau):
    """Build municipality exposure surfaces."""
    run_stage(state, "surface", method=method, tau=tau)


@click.command("fit-ggpm")
@click.option("--year", type=int, default=None, help="Fit a single year")
@pass_state
def fit_ggpm(state: CliState, year):
    """Fit the spatiotemporal Gaussian process per year."""
    run_stage(state, "fit-ggpm", year=year)


@click.command("aggregate")
@pass_state
def aggregate(state: CliState):
    """Area-weight reanalysis cells to municipalities."""
    run_stage(state, "aggregate")


@click.command("heatwave")
@method_option
@pass_state
def heatwave(state: CliState, method):
    """Flag heatwave days for every configured definition."""
    run_stage(state, "heatwave", method=method)


@click.command("build-cco")
@outcome_option
@pass_state
def build_cco(state: CliState, outcome):
    """Build the time-stratified case-crossover dataset."""
    run_stage(state, "build-cco", outcome=outcome)


@click.command("fit-epi")
@method_option
@tau_option
@outcome_option
@pass_state
def fit_epi(state: CliState, method, tau, outcome):
    """Fit the conditional Poisson models and write risk curves."""
    run_stage(state, "fit-epi", method=method, tau=tau, outcome=outcome)


COMMANDS = (prep, fit_gqrm, surface, fit_ggpm, aggregate, heatwave, build_cco, fit_epi)
