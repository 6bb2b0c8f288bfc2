"""FastAPI service wrapping the pipeline. Paths in request bodies are resolved
on the service host; clients are expected to share its filesystem (the CLI runs
the app in-process by default)."""

from __future__ import annotations

import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..config import parse_run_config
from ..errors import ConfigError
from . import schemas


def create_app() -> FastAPI:
    app = FastAPI(title="sslvit", version=__version__)

    @app.exception_handler(ConfigError)
    async def config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(Exception)
    async def runtime_error(request: Request, exc: Exception):
        return JSONResponse(status_code=500,
                            content={"detail": f"{type(exc).__name__}: {exc}"})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        config = parse_run_config(req.config)
        report = pipeline.run_synth(config, req.out)
        return schemas.SynthResponse(**report, timestamp=time.time())

    @app.post("/pretrain", response_model=schemas.PretrainResponse)
    def pretrain(req: schemas.PretrainRequest):
        config = parse_run_config(req.config)
        report = pipeline.run_pretrain(config, req.data, req.out, req.log_out)
        return schemas.PretrainResponse(**report, timestamp=time.time())

    @app.post("/embed", response_model=schemas.EmbedResponse)
    def embed(req: schemas.EmbedRequest):
        report = pipeline.run_embed(req.model, req.data, req.out, req.retrieval_head)
        return schemas.EmbedResponse(**report, timestamp=time.time())

    @app.post("/fewshot", response_model=schemas.FewshotResponse)
    def fewshot(req: schemas.FewshotRequest):
        config = parse_run_config(req.config)
        report = pipeline.run_fewshot(config, req.base_emb, req.novel_emb, req.way,
                                      req.shot, req.query_per_class, req.tasks,
                                      req.threads)
        return schemas.FewshotResponse(**report, timestamp=time.time())

    @app.post("/retrieval/train", response_model=schemas.RetrievalTrainResponse)
    def retrieval_train(req: schemas.RetrievalTrainRequest):
        config = parse_run_config(req.config)
        report = pipeline.run_retrieval_train(config, req.model, req.data, req.loss,
                                              req.out)
        return schemas.RetrievalTrainResponse(**report, timestamp=time.time())

    @app.post("/retrieval/eval", response_model=schemas.RetrievalEvalResponse)
    def retrieval_eval(req: schemas.RetrievalEvalRequest):
        config = parse_run_config(req.config)
        report = pipeline.run_retrieval_eval(config, req.model, req.data, req.ks,
                                             req.loss)
        return schemas.RetrievalEvalResponse(**report, timestamp=time.time())

    return app
