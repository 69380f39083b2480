"""
Tool Commands

Configuration dump, synthetic data, diagnostics, reporting and the full run.
"""

import json

import click

import crud
from commands import CliState, fail, run_stage
from database import get_db
from schemas import ArtifactStatus, PipelineConfig, StageResult, StatusReport
from services.errors import HeatriskError
from services.pipeline import PipelineService

pass_state = click.make_pass_decorator(CliState)


@click.command("config")
@click.option("--print-defaults", is_flag=True, help="Print the default configuration")
@pass_state
def config(state: CliState, print_defaults):
    """Print the resolved configuration (or the defaults) as JSON."""
    if print_defaults:
        payload = PipelineConfig.defaults()
    else:
        try:
            resolved = state.load()
        except HeatriskError as e:
            fail(e)
        payload = {**resolved.model_dump(mode="json"), "config_hash": resolved.config_hash()}
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@click.command("simulate")
@pass_state
def simulate(state: CliState):
    """Write a synthetic input bundle and its config under <out>/input."""
    run_stage(state, "simulate")


@click.command("diagnose-qq")
@pass_state
def diagnose_qq(state: CliState):
    """Compare station and nearest-cell reanalysis quantiles."""
    run_stage(state, "diagnose-qq")


@click.command("report")
@pass_state
def report(state: CliState):
    """Write the summary tables from the registered artifacts."""
    run_stage(state, "report")


@click.command("run-all")
@pass_state
def run_all(state: CliState):
    """Run every stage in order, stopping at the first failure."""
    try:
        cfg = state.load()
        with get_db(cfg.out) as db:
            service = PipelineService(cfg, db, force=state.force)
            for stage, success, message in service.run_all():
                click.echo(f"{stage}: {message}")
                if not success:
                    fail(service.last_error)
    except HeatriskError as e:
        fail(e)


@click.command("status")
@pass_state
def status(state: CliState):
    """Show the last run of every stage and the registered artifacts."""
    try:
        cfg = state.load()
    except HeatriskError as e:
        fail(e)
    with get_db(cfg.out) as db:
        service = PipelineService(cfg, db)
        report = StatusReport(
            stages=[
                StageResult(
                    stage=run.stage,
                    status=run.last_run_status,
                    last_run_time=run.last_run_time,
                    last_success_time=crud.get_last_success_time(db, run.stage),
                    records_written=run.records_written or 0,
                    error_message=run.error_message,
                )
                for run in crud.get_stage_runs(db)
            ],
            artifacts=[
                ArtifactStatus(
                    kind=a.kind,
                    key=a.key,
                    path=a.path,
                    sha256=a.sha256,
                    stale=service.is_stale(a, upstream=True),
                    sources=json.loads(a.sources or "{}"),
                )
                for a in crud.get_artifacts(db)
            ],
        )
    click.echo(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True))


COMMANDS = (config, simulate, diagnose_qq, report, run_all, status)
