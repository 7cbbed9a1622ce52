import json
from typing import Optional

import click
from pydantic import ValidationError

from config import get_settings
from models.conic import SolveStatus
from services.study_service import StudyService
from utils.exceptions import SolverError, ToolkitError
from utils.helpers import format_response, stable_json_dumps
from utils.log import log

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3
EXIT_VIOLATIONS = 4


def get_study_service() -> StudyService:
    return StudyService()


def output_dir_option(value: Optional[str]) -> str:
    return value or get_settings().OUTPUT_DIR


def exit_code_for(error: Exception) -> int:
    """Map an exception raised by a service to the CLI exit code"""
    if isinstance(error, SolverError):
        if error.status in (SolveStatus.INFEASIBLE.value, SolveStatus.UNBOUNDED.value):
            return EXIT_INFEASIBLE
        return EXIT_NUMERICAL
    if isinstance(error, (ToolkitError, OSError, ValidationError, json.JSONDecodeError)):
        return EXIT_INPUT
    return EXIT_NUMERICAL


def fail(error: Exception) -> int:
    code = exit_code_for(error)
    log(f"{type(error).__name__}: {error}", "error")
    emit(format_response("ERROR", f"Error: {error}", {"exit_code": code}))
    return code


def emit(payload) -> None:
    click.echo(stable_json_dumps(payload))
