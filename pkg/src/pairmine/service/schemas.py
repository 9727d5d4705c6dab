"""Pydantic request/response models for the mining service API."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class StageRunRequest(BaseModel):
    """Run one pipeline stage.

    Either an inline flat ``config`` mapping or a server-local ``config_path``
    must be supplied. ``workdir``, ``seed``, and ``overrides`` update the
    corresponding config keys before the run.
    """

    config: dict[str, Any] | None = None
    config_path: str | None = None
    workdir: str | None = None
    seed: int | None = None
    overrides: dict[str, Any] = Field(default_factory=dict)


class StageRunResponse(BaseModel):
    stage: str
    outputs: dict[str, str]
    counters: dict[str, int]
    config_hash: str


class RunAllResponse(BaseModel):
    stages: list[StageRunResponse]
    export_path: str


class EvaluateRequest(BaseModel):
    candidates_path: str
    gold_path: str
    ks: list[int] = Field(default_factory=lambda: [1, 4, 10, 100])


class MetricValue(BaseModel):
    value: float
    exact: str


class EvaluateResponse(BaseModel):
    recall_at: dict[str, MetricValue]
    precision_at: dict[str, MetricValue]


class AbstractivenessRequest(BaseModel):
    export_path: str


class AbstractivenessResponse(BaseModel):
    mean: dict[str, float]
    by_stage: dict[str, dict[str, float]]
    histograms: dict[str, list[int]]
    histogram_bucket_width: float
    num_pairs: int


class SyntheticRequest(BaseModel):
    preset: str = "toy"
    out_dir: str
    seed_size: int = 100


class SyntheticResponse(BaseModel):
    paths: dict[str, str]
    num_inputs: int
    num_outputs: int


class ErrorBody(BaseModel):
    detail: str
    exit_code: int
