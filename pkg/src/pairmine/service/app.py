"""FastAPI service wrapping the mining pipeline.

Stages run synchronously inside request handlers against a caller-supplied
work directory; package errors map onto HTTP statuses while preserving the
CLI exit code in the response body.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse

from .. import __version__, evalharness, miner, pipeline
from ..errors import (
    ConfigError,
    MissingArtifactError,
    NumericError,
    PairmineError,
    StaleArtifactError,
)
from .schemas import (
    AbstractivenessRequest,
    AbstractivenessResponse,
    EvaluateRequest,
    EvaluateResponse,
    HealthResponse,
    RunAllResponse,
    StageRunRequest,
    StageRunResponse,
    SyntheticRequest,
    SyntheticResponse,
)

logger = logging.getLogger(__name__)

_STATUS_BY_ERROR = (
    (StaleArtifactError, 409),
    (MissingArtifactError, 404),
    (ConfigError, 400),
    (NumericError, 500),
)


def _resolve_config(req: StageRunRequest) -> pipeline.PipelineConfig:
    if req.config is None and req.config_path is None:
        raise ConfigError("request must carry either 'config' or 'config_path'")
    if req.config is not None:
        cfg = pipeline.PipelineConfig(flat=dict(req.config))
    else:
        cfg = pipeline.load_config(req.config_path)
    overrides = dict(req.overrides)
    if req.workdir is not None:
        overrides["workdir"] = req.workdir
    if req.seed is not None:
        overrides["rng_seed"] = req.seed
    if overrides:
        cfg = pipeline.apply_overrides(cfg, overrides)
    return cfg


def _stage_response(cfg: pipeline.PipelineConfig, artifact: pipeline.StageArtifact) -> StageRunResponse:
    return StageRunResponse(
        stage=artifact.stage,
        outputs=artifact.outputs,
        counters=artifact.counters,
        config_hash=cfg.config_hash(),
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="pairmine",
        version=__version__,
        description="Two-stage mining of input/output pairs from text corpora.",
    )

    @app.exception_handler(PairmineError)
    async def handle_pairmine_error(request: Request, exc: PairmineError) -> JSONResponse:
        for klass, status in _STATUS_BY_ERROR:
            if isinstance(exc, klass):
                return JSONResponse(
                    status_code=status, content={"detail": str(exc), "exit_code": exc.exit_code}
                )
        return JSONResponse(status_code=500, content={"detail": str(exc), "exit_code": exc.exit_code})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/stages/{stage}", response_model=StageRunResponse)
    def run_stage(stage: str, req: StageRunRequest) -> StageRunResponse:
        cfg = _resolve_config(req)
        artifact = pipeline.run_stage(cfg, stage)
        return _stage_response(cfg, artifact)

    @app.post("/run-all", response_model=RunAllResponse)
    def run_all(req: StageRunRequest) -> RunAllResponse:
        cfg = _resolve_config(req)
        artifacts = pipeline.run_all(cfg)
        wd = pipeline.Workdir(cfg.workdir)
        return RunAllResponse(
            stages=[_stage_response(cfg, a) for a in artifacts],
            export_path=wd.path("mined.jsonl"),
        )

    @app.post("/evaluate", response_model=EvaluateResponse)
    def evaluate(req: EvaluateRequest) -> EvaluateResponse:
        pairs = miner.load_candidates(req.candidates_path)
        gold = evalharness.load_gold(req.gold_path)
        metrics = pipeline.evaluate(pairs, gold, req.ks)
        return EvaluateResponse(**metrics.to_json())

    @app.post("/report/abstractiveness", response_model=AbstractivenessResponse)
    def abstractiveness(req: AbstractivenessRequest) -> AbstractivenessResponse:
        ds = pipeline.load_export(req.export_path)
        report = evalharness.abstractiveness_report(ds)
        return AbstractivenessResponse(**report.to_json())

    @app.post("/synthetic", response_model=SyntheticResponse)
    def synthetic(req: SyntheticRequest) -> SyntheticResponse:
        spec = evalharness.preset(req.preset)
        paths = evalharness.write_synthetic_workspace(spec, req.out_dir, seed_size=req.seed_size)
        return SyntheticResponse(
            paths=paths,
            num_inputs=spec.num_pairs,
            num_outputs=spec.num_pairs + spec.distractor_count,
        )

    @app.get("/manifest")
    def manifest(workdir: str = Query(...)) -> dict:
        return pipeline.Workdir(workdir).load_manifest()

    return app


app = create_app()
