"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ConfigPayload(BaseModel):
    """Common config carrier: optional server-local file plus overrides."""

    config_path: str | None = None
    overrides: dict[str, str] = Field(default_factory=dict)


class EffectiveConfig(BaseModel):
    lines: list[str]


class HealthResponse(BaseModel):
    status: str
    version: str


class ExtractRequest(ConfigPayload):
    manifest: str


class FailureItem(BaseModel):
    video_id: str
    error: str


class ExtractResponse(BaseModel):
    videos: int
    extracted: int
    skipped: int
    failures: list[FailureItem]
    cache_dir: str
    effective_config: list[str]


class TrainRequest(ConfigPayload):
    manifest: str


class TrainResponse(BaseModel):
    checkpoint: str
    checkpoint_digest: str
    log_path: str
    epochs: int
    final_total: float | None
    final_train_srocc: float | None
    effective_config: list[str]


class ReportRow(BaseModel):
    split_id: int
    n: int
    srocc: float
    plcc: float
    krocc: float


class EvalRequest(ConfigPayload):
    manifest: str
    checkpoint: str


class EvalResponse(BaseModel):
    report: ReportRow
    json_path: str
    csv_path: str
    effective_config: list[str]


class PredictRequest(ConfigPayload):
    video: str
    checkpoint: str


class PredictResponse(BaseModel):
    score: float
    effective_config: list[str]


class SplitsRequest(ConfigPayload):
    manifest: str


class SplitsResponse(BaseModel):
    reports: list[ReportRow]
    mean: dict[str, float]
    median: dict[str, float]
    json_path: str
    csv_path: str
    effective_config: list[str]


class CurveRequest(ConfigPayload):
    kind: str
    description: str
    video: str | None = None
    manifest: str | None = None


class CurvePoint(BaseModel):
    description: str
    kind: str
    level: float
    response: float


class CurveResult(BaseModel):
    video_id: str
    csv_path: str
    rows: list[CurvePoint]


class CurveResponse(BaseModel):
    curves: list[CurveResult]
    effective_config: list[str]


class CompareRequest(ConfigPayload):
    manifest: str
    banks: list[str]


class CompareRow(BaseModel):
    bank: str
    r: int
    srocc: float
    plcc: float
    krocc: float


class CompareResponse(BaseModel):
    rows: list[CompareRow]
    csv_path: str
    effective_config: list[str]
