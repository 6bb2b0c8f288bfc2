"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    out: str


class SynthResponse(BaseModel):
    out: str
    samples: int
    num_classes: int
    per_class: int
    image_size: int
    channels: int
    sha256: str
    timestamp: float


class PretrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    data: str
    out: str
    log_out: str | None = None


class PretrainResponse(BaseModel):
    out: str
    log_out: str
    steps: int
    final_loss: float | None
    final_lambda: float | None
    sha256: str
    timestamp: float


class EmbedRequest(BaseModel):
    model: str
    data: str
    out: str
    retrieval_head: bool = False


class EmbedResponse(BaseModel):
    out: str
    rows: int
    dim: int
    sha256: str
    timestamp: float


class FewshotRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    base_emb: str
    novel_emb: str
    way: int = 5
    shot: int = 1
    query_per_class: int = 15
    tasks: int = 100
    threads: int = 1


class FewshotResponse(BaseModel):
    way: int
    shot: int
    tasks: int
    mean: float
    ci95: float | None
    config: dict
    timestamp: float


class RetrievalTrainRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    model: str
    data: str
    loss: str
    out: str


class RetrievalTrainResponse(BaseModel):
    loss_kind: str
    epochs: int
    steps: int
    final_loss: float | None
    out: str
    sha256: str
    config: dict
    timestamp: float


class RetrievalEvalRequest(BaseModel):
    config: dict = Field(default_factory=dict)
    model: str
    data: str
    ks: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    loss: str | None = None


class RetrievalEvalResponse(BaseModel):
    loss_kind: str | None
    epochs: int
    recall: dict[str, float]
    config: dict
    timestamp: float
