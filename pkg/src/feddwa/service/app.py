"""FastAPI service exposing the simulator to multiple experiment clients.

Runs execute synchronously (desk-scale experiments finish in seconds);
artifacts land under the server's output root and the response carries the
summary plus per-round mean accuracies.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, runner
from ..config import RunConfig
from ..errors import ConfigError, FedDwaError
from .schemas import (
    HealthResponse,
    RunRequest,
    RunResponse,
    RunSummary,
    SweepRequest,
    SweepResponse,
    SweepRow,
)


def create_app() -> FastAPI:
    app = FastAPI(title="feddwa", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/config/defaults", response_model=RunConfig)
    def config_defaults():
        return RunConfig()

    @app.post("/runs", response_model=RunResponse)
    def submit_run(request: RunRequest):
        try:
            outputs = runner.run_experiment(request.config)
        except ConfigError as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        except FedDwaError as err:
            raise HTTPException(status_code=500, detail=str(err)) from err
        return RunResponse(
            status="ok",
            out_dir=outputs.out_dir,
            summary=RunSummary(**outputs.summary),
            mean_accuracy_by_round=[r.mean_accuracy for r in outputs.reports],
        )

    @app.post("/sweeps", response_model=SweepResponse)
    def submit_sweep(request: SweepRequest):
        try:
            rows, out_dir = runner.run_sweep(request.config, request.axis, request.values)
        except ConfigError as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        except FedDwaError as err:
            raise HTTPException(status_code=500, detail=str(err)) from err
        return SweepResponse(
            status="ok",
            out_dir=out_dir,
            rows=[SweepRow(**row) for row in rows],
        )

    return app


app = create_app()
