"""End-to-end pipeline steps shared by the HTTP service and the CLI.

Each step takes file paths plus a resolved RunConfig, performs one stage
(synthesize / pretrain / embed / few-shot eval / retrieval train / retrieval
eval), writes its artifacts atomically, and returns the report dict that ends
up on stdout. Clients and the service share one filesystem.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from . import data as dio
from . import distill, fewshot, retrieval, vit
from .config import RunConfig
from .errors import BadMagicError, ConfigError
from .retrieval import EmbeddingBatch, RetrievalModel
from .tensor import Tensor


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, doc: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def run_synth(config: RunConfig, out: str) -> dict:
    seed = config.require_seed()
    d = config.data
    ds = dio.synth_dataset(d.num_classes, d.per_class, d.image_size, seed,
                           channels=d.channels, noise_sigma=d.noise_sigma,
                           max_shift=d.max_shift)
    dio.write_dataset(ds, out)
    return {"out": out, "samples": len(ds), "num_classes": d.num_classes,
            "per_class": d.per_class, "image_size": d.image_size,
            "channels": d.channels, "sha256": _sha256(out)}


def _check_dataset_matches(ds: dio.Dataset, config: RunConfig, need_size: int | None) -> None:
    c, h, w = ds.image_shape
    if c != config.vit.channels:
        raise ConfigError(f"dataset has {c} channel(s) but vit.channels is "
                          f"{config.vit.channels}")
    if need_size is not None and (h < need_size or w < need_size):
        raise ConfigError(f"dataset images are {h}x{w}, smaller than the configured "
                          f"crop size {need_size}")


def run_pretrain(config: RunConfig, data_path: str, out: str,
                 log_out: str | None = None) -> dict:
    seed = config.require_seed()
    ds = dio.read_dataset(data_path)
    _check_dataset_matches(ds, config, config.distill.global_size)
    state, log = distill.pretrain(ds.images_float(), config.vit, config.distill, seed)
    vit.write_checkpoint(out, state.teacher)
    log_out = log_out or f"{out}.log.json"
    _write_json(log_out, {"seed": seed, "steps": log, "config": config.to_dict()})
    return {"out": out, "log_out": log_out, "steps": len(log),
            "final_loss": log[-1]["loss"] if log else None,
            "final_lambda": log[-1]["lambda"] if log else None,
            "sha256": _sha256(out)}


def _load_model(path: str):
    """Load either a plain encoder checkpoint or a retrieval model, sniffed by magic."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == vit.CHECKPOINT_MAGIC:
        return vit.read_checkpoint(path), None
    if magic == retrieval.RETRIEVAL_MAGIC:
        model = retrieval.read_retrieval_checkpoint(path)
        return model.backbone, model
    raise BadMagicError(f"{path}: unrecognized model magic {magic!r}")


def _dataset_embeddings(params, model: RetrievalModel | None, ds: dio.Dataset,
                        retrieval_head: bool) -> np.ndarray:
    rows = []
    for i in range(len(ds)):
        img = ds.image_float(i)
        if retrieval_head:
            rows.append(retrieval.embed_retrieval(model, img).data)
        else:
            rows.append(fewshot.extract_feature(params, img))
    return np.stack(rows) if rows else np.zeros((0, params.config.dim))


def run_embed(model_path: str, data_path: str, out: str,
              retrieval_head: bool = False) -> dict:
    params, model = _load_model(model_path)
    if retrieval_head and model is None:
        raise ConfigError("--retrieval-head requires a retrieval checkpoint "
                          "(train one with `retrieval train`)")
    ds = dio.read_dataset(data_path)
    if ds.image_shape[0] != params.config.channels:
        raise ConfigError(f"dataset has {ds.image_shape[0]} channel(s) but the model "
                          f"expects {params.config.channels}")
    feats = _dataset_embeddings(params, model, ds, retrieval_head)
    store = dio.EmbeddingStore(features=feats, labels=ds.labels)
    dio.write_embeddings(store, out)
    return {"out": out, "rows": len(store), "dim": store.dim, "sha256": _sha256(out)}


def run_fewshot(config: RunConfig, base_emb: str, novel_emb: str, way: int, shot: int,
                query_per_class: int, tasks: int, threads: int = 1) -> dict:
    seed = config.require_seed()
    base = dio.read_embeddings(base_emb)
    novel = dio.read_embeddings(novel_emb)
    if base.dim != novel.dim:
        raise ConfigError(f"base embeddings have dim {base.dim} but novel have {novel.dim}")
    grouped = {int(c): base.features[base.labels == c] for c in np.unique(base.labels)}
    base_stats = fewshot.class_statistics(grouped)

    def task_source(index: int, rng: np.random.Generator) -> fewshot.Episode:
        return fewshot.episode_from_store(novel.features, novel.labels, way, shot,
                                          query_per_class, rng)

    result = fewshot.evaluate_fewshot(task_source, tasks, base_stats, config.fewshot,
                                      master_seed=seed, threads=threads)
    return {"way": way, "shot": shot, "tasks": tasks, "mean": result["mean"],
            "ci95": result["ci95"], "config": config.to_dict()}


def run_retrieval_train(config: RunConfig, model_path: str, data_path: str,
                        loss: str, out: str) -> dict:
    seed = config.require_seed()
    if loss not in retrieval.LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss!r}; valid: {', '.join(retrieval.LOSS_KINDS)}")
    teacher = vit.read_checkpoint(model_path)
    ds = dio.read_dataset(data_path)
    _check_dataset_matches(ds, config, None)
    model, log = retrieval.finetune(teacher, ds.images_float(), ds.labels, loss,
                                    config.retrieval, seed)
    retrieval.write_retrieval_checkpoint(out, model)
    return {"loss_kind": loss, "epochs": config.retrieval.epochs, "steps": len(log),
            "final_loss": log[-1]["loss"] if log else None, "out": out,
            "sha256": _sha256(out), "config": config.to_dict()}


def run_retrieval_eval(config: RunConfig, model_path: str, data_path: str,
                       ks: list[int] | None = None,
                       loss_kind: str | None = None) -> dict:
    params, model = _load_model(model_path)
    ds = dio.read_dataset(data_path)
    if ds.image_shape[0] != params.config.channels:
        raise ConfigError(f"dataset has {ds.image_shape[0]} channel(s) but the model "
                          f"expects {params.config.channels}")
    if model is not None:
        feats = _dataset_embeddings(params, model, ds, retrieval_head=True)
    else:
        # un-finetuned encoder: evaluate the raw backbone embedding, L2-normalized
        feats = _dataset_embeddings(params, None, ds, retrieval_head=False)
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    batch = EmbeddingBatch(Tensor(feats), ds.labels)
    report = retrieval.recall_report(batch, batch, ks or (1, 2, 4, 8))
    return {"loss_kind": loss_kind, "epochs": config.retrieval.epochs,
            "recall": {str(k): v for k, v in sorted(report.items())},
            "config": config.to_dict()}
