"""FastAPI service wrapping the pipeline.

Domain errors (bad input, bad config, digest mismatches) become HTTP 400;
anything that fails mid-run becomes HTTP 500. Paths in requests refer to
the server's filesystem.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..config import RunConfig, load_config
from ..errors import RuntimeFailure, ValidationError
from . import schemas


def _resolve_config(payload: schemas.ConfigPayload) -> RunConfig:
    return load_config(payload.config_path or None, payload.overrides)


def create_app() -> FastAPI:
    app = FastAPI(title="qualia", version=__version__)

    @app.exception_handler(ValidationError)
    async def _validation_handler(request: Request, exc: ValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(RuntimeFailure)
    async def _runtime_handler(request: Request, exc: RuntimeFailure):
        return JSONResponse(status_code=500, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/config/resolve", response_model=schemas.EffectiveConfig)
    def config_resolve(payload: schemas.ConfigPayload):
        return schemas.EffectiveConfig(lines=_resolve_config(payload).lines())

    @app.post("/extract", response_model=schemas.ExtractResponse)
    def extract(payload: schemas.ExtractRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_extract(payload.manifest, cfg)
        return schemas.ExtractResponse(**out, effective_config=cfg.lines())

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(payload: schemas.TrainRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_train(payload.manifest, cfg)
        return schemas.TrainResponse(**out, effective_config=cfg.lines())

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(payload: schemas.EvalRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_eval(payload.manifest, payload.checkpoint, cfg)
        return schemas.EvalResponse(**out, effective_config=cfg.lines())

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(payload: schemas.PredictRequest):
        cfg = _resolve_config(payload)
        score = pipeline.run_predict(payload.video, payload.checkpoint, cfg)
        return schemas.PredictResponse(score=score, effective_config=cfg.lines())

    @app.post("/splits", response_model=schemas.SplitsResponse)
    def splits(payload: schemas.SplitsRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_split_protocol(payload.manifest, cfg)
        return schemas.SplitsResponse(**out, effective_config=cfg.lines())

    @app.post("/probe/curve", response_model=schemas.CurveResponse)
    def probe_curve(payload: schemas.CurveRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_probe_curves(cfg, kind=payload.kind, description=payload.description,
                                        video=payload.video, manifest_path=payload.manifest)
        return schemas.CurveResponse(**out, effective_config=cfg.lines())

    @app.post("/probe/compare", response_model=schemas.CompareResponse)
    def probe_compare(payload: schemas.CompareRequest):
        cfg = _resolve_config(payload)
        out = pipeline.run_prompt_comparison(payload.manifest, cfg, payload.banks)
        return schemas.CompareResponse(**out, effective_config=cfg.lines())

    return app


app = create_app()
