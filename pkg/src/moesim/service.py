"""HTTP interface: every pipeline entrypoint behind a FastAPI endpoint.

The service is stateless and touches no files; clients send a full
experiment config and get JSON back.  The CLI talks to this app either
in-process or over a real socket -- same routes either way.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .config import ConfigError, ExperimentConfig
from .experiment import flop_report, report_table, run_experiment, verify_equivalence


class RunRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)


class RunResponse(BaseModel):
    report: dict
    trace_csv: str


class VerifyRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    perturb_accumulation: bool = False


class VerifyResponse(BaseModel):
    equivalent: bool
    max_abs_diff: float
    layers_checked: int
    frames_checked: int


class FlopsRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)


class TableRequest(BaseModel):
    report: dict


class TableResponse(BaseModel):
    table: str


class HealthResponse(BaseModel):
    status: str
    version: str


app = FastAPI(title="moesim", version=__version__)


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/run", response_model=RunResponse)
def run(request: RunRequest) -> RunResponse:
    try:
        result = run_experiment(request.config)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return RunResponse(report=result.report, trace_csv=result.trace_csv)


@app.post("/verify-equivalence", response_model=VerifyResponse)
def verify(request: VerifyRequest) -> VerifyResponse:
    try:
        verdict = verify_equivalence(request.config, request.perturb_accumulation)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return VerifyResponse(**verdict)


@app.post("/flops", response_model=dict)
def flops(request: FlopsRequest) -> dict:
    try:
        return flop_report(request.config)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.post("/report-table", response_model=TableResponse)
def table(request: TableRequest) -> TableResponse:
    try:
        rendered = report_table(request.report)
    except (KeyError, TypeError) as exc:
        raise HTTPException(status_code=422, detail="not a run report") from exc
    return TableResponse(table=rendered)
