"""FastAPI application exposing the experiment runners.

The service is stateless: every endpoint is a pure function of its request
body, so identical requests return identical responses (the determinism
contract of the underlying simulators). Config errors surface as 400s with
the offending key in the detail; request-shape errors are FastAPI's own
422s.
"""

from __future__ import annotations

import dataclasses

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError, canonical_dump, config_digest, parse_config_text
from ..experiments import (
    ExperimentReport,
    report_files,
    run_bandwidth,
    run_cost_table,
    run_pipeline_experiment,
    run_svd_analyze,
    run_verify_demo,
)
from .schemas import (
    BandwidthRequest,
    CostTableRequest,
    DumpConfigRequest,
    DumpConfigResponse,
    ExperimentResponse,
    HealthResponse,
    PipelineRunRequest,
    SvdAnalyzeRequest,
    TableModel,
    VerifyDemoRequest,
)

__all__ = ["create_app"]


def _response(report: ExperimentReport) -> ExperimentResponse:
    return ExperimentResponse(
        name=report.name,
        ok=report.ok,
        digest=report.digest,
        notes=list(report.notes),
        tables={
            t.name: TableModel(columns=list(t.columns), rows=[list(r) for r in t.rows])
            for t in report.tables
        },
        files=report_files(report),
    )


def _parse_request_config(config_text: str, seed=None):
    try:
        cfg = parse_config_text(config_text, source="<request>")
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def create_app() -> FastAPI:
    app = FastAPI(title="efedsim", version=__version__)

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/dump-config", response_model=DumpConfigResponse)
    def dump_config(req: DumpConfigRequest):
        cfg = _parse_request_config(req.config_text, req.seed)
        return DumpConfigResponse(canonical=canonical_dump(cfg),
                                  digest=config_digest(cfg))

    @app.post("/v1/cost-table", response_model=ExperimentResponse)
    def cost_table(req: CostTableRequest):
        try:
            return _response(run_cost_table(dims=req.dims))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/v1/svd-analyze", response_model=ExperimentResponse)
    def svd_analyze(req: SvdAnalyzeRequest):
        try:
            return _response(run_svd_analyze(
                rows=req.rows, cols=req.cols, spectrum=req.spectrum,
                keep_frac=req.keep_frac, matrix=req.matrix,
            ))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/v1/bandwidth", response_model=ExperimentResponse)
    def bandwidth(req: BandwidthRequest):
        try:
            return _response(run_bandwidth(m=req.m, n=req.n, t=req.t,
                                           batch=req.batch, ratios=req.ratios))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/v1/pipeline-run", response_model=ExperimentResponse)
    def pipeline_run(req: PipelineRunRequest):
        cfg = _parse_request_config(req.config_text, req.seed)
        try:
            return _response(run_pipeline_experiment(cfg, rounds=req.rounds,
                                                     tolerance=req.tolerance))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.post("/v1/verify-demo", response_model=ExperimentResponse)
    def verify_demo(req: VerifyDemoRequest):
        try:
            return _response(run_verify_demo(
                base=req.base, n_digits=req.n_digits, f_values=req.f_values,
                rows=req.rows, cols=req.cols, n_workers=req.n_workers,
                tamper=req.tamper, seed=req.seed,
            ))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    return app
