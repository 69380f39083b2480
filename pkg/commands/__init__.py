"""
Shared command helpers: config resolution, stage execution and error output.
"""

import sys
from dataclasses import dataclass, field
from typing import Dict, NoReturn, Optional

import click

from database import get_db
from schemas import ErrorResponse, PipelineConfig, load_config
from services.errors import HeatriskError
from services.pipeline import PipelineService


@dataclass
class CliState:
    """Global options of one invocation."""

    config_path: Optional[str] = None
    overrides: Dict[str, object] = field(default_factory=dict)
    force: bool = False

    def load(self) -> PipelineConfig:
        return load_config(self.config_path, **self.overrides)


def fail(error: HeatriskError) -> NoReturn:
    """Print the error as one JSON object on stderr and exit nonzero."""
    payload = ErrorResponse(error=error.message, code=error.code, detail=error.detail)
    click.echo(payload.model_dump_json(), err=True)
    sys.exit(1)


def run_stage(state: CliState, stage: str, **options) -> str:
    try:
        config = state.load()
        with get_db(config.out) as db:
            service = PipelineService(config, db, force=state.force)
            success, message = service.run_stage(stage, **options)
            if not success:
                fail(service.last_error)
    except HeatriskError as e:
        fail(e)
    click.echo(message)
    return message
