"""Metric-learning fine-tuning of the pretrained encoder and Recall@K evaluation.

The backbone starts from a self-distillation teacher checkpoint and gains a
learnable linear projection to the retrieval embedding size; rows are always
L2-normalized. Three batch losses are provided (margin with distance-weighted
negative sampling, Proxy-NCA, multi-similarity with pair mining), each written
so an exhaustive scalar oracle can reproduce it term by term.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (BadMagicError, ConfigError, DomainError, ShapeError,
                     TrainingDivergedError, TruncatedFileError, VersionError)
from .tensor import Tensor
from .vit import ViTConfig, ViTParams, encode, param_shapes, truncated_normal

LOSS_KINDS = ("margin", "proxy_nca", "multi_similarity")

RETRIEVAL_MAGIC = b"SVTR"
RETRIEVAL_VERSION = 1


@dataclass
class RetrievalConfig:
    out_channels: int = 128
    epochs: int = 1
    steps_per_epoch: int = 20
    learning_rate: float = 0.01
    classes_per_batch: int = 4
    samples_per_class: int = 4
    margin_alpha: float = 0.2
    beta_init: float = 1.2
    distance_weighted_sampling: bool = True
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 1.0
    ms_eps: float = 0.1

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown retrieval config keys: {sorted(unknown)}")
        return cls(**d)


class EmbeddingBatch:
    """A (B, C) matrix of L2-normalized embeddings with integer labels."""

    def __init__(self, embeddings, labels):
        self.embeddings = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.embeddings.data.ndim != 2:
            raise ShapeError(f"EmbeddingBatch expects (B, C), got {self.embeddings.shape}")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ShapeError(f"{self.embeddings.shape[0]} rows but {len(self.labels)} labels")
        norms = np.linalg.norm(self.embeddings.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ShapeError("EmbeddingBatch rows must be L2-normalized (norm = 1 +- 1e-9)")

    def __len__(self) -> int:
        return len(self.labels)


def l2_normalize_rows(t: Tensor) -> Tensor:
    norms = T.sqrt(T.sum_(t * t, axis=1))
    return t / T.reshape(norms, (t.shape[0], 1))


class ProxyBank:
    """One learnable unit-norm reference vector per training class."""

    def __init__(self, class_ids: np.ndarray, proxies: Tensor):
        self.class_ids = np.asarray(sorted(class_ids), dtype=np.int64)
        self.proxies = proxies
        if len(self.class_ids) != proxies.shape[0]:
            raise ShapeError(f"{len(self.class_ids)} classes but {proxies.shape[0]} proxies")

    @classmethod
    def init(cls, class_ids, out_channels: int, rng: np.random.Generator) -> "ProxyBank":
        raw = rng.standard_normal((len(class_ids), out_channels))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(np.asarray(class_ids), Tensor(raw, requires_grad=True))

    def index_of(self, labels: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.class_ids, labels)
        bad = (idx >= len(self.class_ids)) | (self.class_ids[np.clip(idx, 0, len(self.class_ids) - 1)] != labels)
        if np.any(bad):
            raise ConfigError(f"labels without a proxy: {sorted(set(np.asarray(labels)[bad]))}")
        return idx


class MarginBetas:
    """Learnable per-class distance boundary for the margin loss."""

    def __init__(self, class_ids: np.ndarray, values: Tensor):
        self.class_ids = np.asarray(sorted(class_ids), dtype=np.int64)
        self.values = values

    @classmethod
    def init(cls, class_ids, beta_init: float = 1.2) -> "MarginBetas":
        return cls(np.asarray(class_ids),
                   Tensor(np.full(len(class_ids), beta_init), requires_grad=True))

    def index_of(self, labels: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.class_ids, labels)
        bad = (idx >= len(self.class_ids)) | (self.class_ids[np.clip(idx, 0, len(self.class_ids) - 1)] != labels)
        if np.any(bad):
            raise ConfigError(f"labels without a beta: {sorted(set(np.asarray(labels)[bad]))}")
        return idx


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _pairwise_distances(emb: np.ndarray) -> np.ndarray:
    sq = (emb ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T, 0.0)
    return np.sqrt(d2)


def _sample_negative(anchor: int, dists: np.ndarray, labels: np.ndarray,
                     dim: int, rng: np.random.Generator) -> int | None:
    """Distance-weighted negative pick: weight 1/q(d) with
    q(d) proportional to d^(C-2) * (1 - d^2/4)^((C-3)/2), d clipped at 0.5."""
    negatives = np.flatnonzero(labels != labels[anchor])
    if len(negatives) == 0:
        return None
    d = dists[anchor, negatives]
    candidates = negatives[d < 1.4]  # pairs beyond this cannot produce loss anyway
    if len(candidates) == 0:
        candidates = negatives
    dc = np.clip(dists[anchor, candidates], 0.5, 1.999)
    log_q = (dim - 2) * np.log(dc) + ((dim - 3) / 2.0) * np.log(1.0 - dc ** 2 / 4.0)
    w = np.exp(-(log_q - log_q.max()))
    w /= w.sum()
    return int(rng.choice(candidates, p=w))


def _margin_pairs(labels: np.ndarray, dists: np.ndarray, dim: int,
                  rng: np.random.Generator | None,
                  sampling: bool) -> list[tuple[int, int, float]]:
    """(anchor, other, sign) pairs; anchor is the lower index of a positive pair."""
    pairs: list[tuple[int, int, float]] = []
    b = len(labels)
    if sampling:
        if rng is None:
            raise ConfigError("margin_loss: sampling enabled requires an rng")
        for i in range(b):
            for j in range(i + 1, b):
                if labels[i] != labels[j]:
                    continue
                pairs.append((i, j, 1.0))
                k = _sample_negative(i, dists, labels, dim, rng)
                if k is not None:
                    pairs.append((i, k, -1.0))
    else:
        for i in range(b):
            for j in range(i + 1, b):
                pairs.append((i, j, 1.0 if labels[i] == labels[j] else -1.0))
    return pairs


def margin_loss(batch: EmbeddingBatch, betas: MarginBetas, alpha: float = 0.2,
                rng: np.random.Generator | None = None,
                sampling: bool = True) -> Tensor:
    """Hinge on pair distances around a learnable per-class boundary beta:
    mean over nonzero-loss pairs of [alpha + sign * (D_ij - beta_anchor)]_+."""
    labels = batch.labels
    if len(np.unique(labels)) < 2:
        raise DomainError("margin_loss: batch holds a single class, no negative pairs")
    emb = batch.embeddings
    dists_np = _pairwise_distances(emb.data)
    pairs = _margin_pairs(labels, dists_np, emb.shape[1], rng, sampling)
    if not pairs:
        return Tensor(0.0)

    rows = np.array([p[0] for p in pairs])
    cols = np.array([p[1] for p in pairs])
    signs = np.array([p[2] for p in pairs])
    beta_idx = betas.index_of(labels[rows])

    diff = T.take_rows(emb, rows) - T.take_rows(emb, cols)
    d = T.sqrt(T.sum_(diff * diff, axis=1))
    beta_vals = T.take_rows(betas.values, beta_idx)
    hinge = T.relu(Tensor(signs) * (d - beta_vals) + alpha)
    # |P| counts pairs that actually produce loss; held constant for the gradient
    active = int(np.count_nonzero(hinge.data > 0.0))
    if active == 0:
        return Tensor(0.0)
    return T.sum_(hinge) * (1.0 / active)


def proxy_nca_loss(batch: EmbeddingBatch, proxies: ProxyBank) -> Tensor:
    """mean_k [ d(e_k, p_y) + log sum_{z != y} exp(-d(e_k, p_z)) ] with d the
    squared Euclidean distance; proxies are normalized inside the loss."""
    if proxies.proxies.shape[0] < 2:
        raise DomainError("proxy_nca_loss: need at least 2 proxies")
    y_idx = proxies.index_of(batch.labels)
    e = batch.embeddings
    p = l2_normalize_rows(proxies.proxies)
    b = len(batch)
    e_sq = T.reshape(T.sum_(e * e, axis=1), (b, 1))
    p_sq = T.reshape(T.sum_(p * p, axis=1), (1, p.shape[0]))
    d2 = e_sq + p_sq - T.matmul(e, p.T) * 2.0
    rows = np.arange(b)
    pos = T.take_pairs(d2, rows, y_idx)
    edm = T.exp(T.negate(d2))
    denom = T.sum_(edm, axis=1) - T.take_pairs(edm, rows, y_idx)
    return T.mean(pos + T.log(denom))


def _ms_minable(labels: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(len(labels))
    pos = idx[(labels == labels[i]) & (idx != i)]
    neg = idx[labels != labels[i]]
    return pos, neg


def multi_similarity_loss(batch: EmbeddingBatch, alpha: float = 2.0, beta: float = 50.0,
                          lambda_ms: float = 1.0, eps: float = 0.1) -> Tensor:
    """Pair-mined multi-similarity loss on cosine similarities. Anchors lacking
    any positive or any negative candidate (mining undefined), or whose mined
    sets are both empty, are skipped; an all-skipped batch yields 0."""
    e = batch.embeddings
    labels = batch.labels
    s = T.matmul(e, e.T)
    sim = s.data
    terms = []
    for i in range(len(batch)):
        pos, neg = _ms_minable(labels, i)
        if len(pos) == 0 or len(neg) == 0:
            continue
        min_pos = sim[i, pos].min()
        max_neg = sim[i, neg].max()
        mined_pos = pos[sim[i, pos] < max_neg + eps]
        mined_neg = neg[sim[i, neg] > min_pos - eps]
        if len(mined_pos) == 0 and len(mined_neg) == 0:
            continue
        term = None
        if len(mined_pos):
            sp = T.take_pairs(s, np.full(len(mined_pos), i), mined_pos)
            term = T.log(T.sum_(T.exp((sp - lambda_ms) * -alpha)) + 1.0) * (1.0 / alpha)
        if len(mined_neg):
            sn = T.take_pairs(s, np.full(len(mined_neg), i), mined_neg)
            neg_term = T.log(T.sum_(T.exp((sn - lambda_ms) * beta)) + 1.0) * (1.0 / beta)
            term = neg_term if term is None else term + neg_term
        terms.append(term)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# ---------------------------------------------------------------------------
# retrieval model
# ---------------------------------------------------------------------------

@dataclass
class RetrievalModel:
    backbone: ViTParams
    proj_weight: Tensor  # (dim, C)
    proj_bias: Tensor    # (C,)

    @property
    def out_channels(self) -> int:
        return self.proj_weight.shape[1]

    def trainable_tensors(self) -> list[Tensor]:
        return self.backbone.tensors() + [self.proj_weight, self.proj_bias]

    def zero_grads(self) -> None:
        for t in self.trainable_tensors():
            t.grad = None


def init_retrieval_model(teacher: ViTParams, out_channels: int,
                         rng: np.random.Generator, trainable: bool = True) -> RetrievalModel:
    backbone = teacher.copy(requires_grad=trainable)
    w = Tensor(truncated_normal(rng, (teacher.config.dim, out_channels)),
               requires_grad=trainable)
    b = Tensor(np.zeros(out_channels), requires_grad=trainable)
    return RetrievalModel(backbone=backbone, proj_weight=w, proj_bias=b)


def embed_retrieval(model: RetrievalModel, image: np.ndarray) -> Tensor:
    """Backbone class token -> linear projection -> L2 normalization."""
    emb = encode(model.backbone, image)
    z = T.matmul(T.reshape(emb, (1, model.backbone.config.dim)), model.proj_weight)
    z = z + model.proj_bias
    z = l2_normalize_rows(z)
    return T.reshape(z, (model.out_channels,))


def embed_batch(model: RetrievalModel, images: Sequence[np.ndarray],
                labels) -> EmbeddingBatch:
    rows = [T.reshape(embed_retrieval(model, img), (1, model.out_channels))
            for img in images]
    return EmbeddingBatch(T.concat(rows, axis=0), labels)


def finetune(teacher: ViTParams, images: Sequence[np.ndarray], labels: np.ndarray,
             loss_kind: str, cfg: RetrievalConfig, seed: int
             ) -> tuple[RetrievalModel, list[dict]]:
    """Class-balanced metric-learning fine-tuning from a teacher checkpoint."""
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss_kind!r}; valid: {', '.join(LOSS_KINDS)}")
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DomainError("finetune: need at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    model = init_retrieval_model(teacher, cfg.out_channels, rng)
    proxies = ProxyBank.init(classes, cfg.out_channels, rng) if loss_kind == "proxy_nca" else None
    betas = MarginBetas.init(classes, cfg.beta_init) if loss_kind == "margin" else None
    trainables = model.trainable_tensors()
    if proxies is not None:
        trainables = trainables + [proxies.proxies]
    if betas is not None:
        trainables = trainables + [betas.values]
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}

    log: list[dict] = []
    step = 0
    for _ in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            p = min(cfg.classes_per_batch, len(classes))
            chosen = rng.choice(classes, size=p, replace=False)
            idxs: list[int] = []
            for c in chosen:
                pool = by_class[int(c)]
                take = rng.choice(pool, size=cfg.samples_per_class,
                                  replace=len(pool) < cfg.samples_per_class)
                idxs.extend(int(t) for t in take)
            batch = embed_batch(model, [images[i] for i in idxs], labels[idxs])
            if loss_kind == "margin":
                loss = margin_loss(batch, betas, cfg.margin_alpha, rng=rng,
                                   sampling=cfg.distance_weighted_sampling)
            elif loss_kind == "proxy_nca":
                loss = proxy_nca_loss(batch, proxies)
            else:
                loss = multi_similarity_loss(batch, cfg.ms_alpha, cfg.ms_beta,
                                             cfg.ms_lambda, cfg.ms_eps)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step)
            for t in trainables:
                t.grad = None
            if loss.requires_grad:
                T.backward(loss)
                for t in trainables:
                    if t.grad is not None:
                        t.data = t.data - cfg.learning_rate * t.grad
            log.append({"step": step, "loss": loss_val})
            step += 1
    return model, log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def recall_at_k(queries: EmbeddingBatch, gallery: EmbeddingBatch, k: int,
                exclude_self: bool | None = None) -> float:
    """Fraction of queries whose k nearest gallery rows (Euclidean, ties by
    ascending index) include at least one same-label row. Self-matches are
    excluded when queries and gallery are the same set."""
    q, g = queries.embeddings.data, gallery.embeddings.data
    ql, gl = queries.labels, gallery.labels
    if exclude_self is None:
        exclude_self = q.shape == g.shape and np.array_equal(q, g) and np.array_equal(ql, gl)
    usable = len(gl) - (1 if exclude_self else 0)
    if k < 1 or k > usable:
        raise ConfigError(f"recall_at_k: k={k} exceeds usable gallery size {usable}")
    d2 = (q ** 2).sum(axis=1)[:, None] + (g ** 2).sum(axis=1)[None, :] - 2.0 * q @ g.T
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    hits = 0
    for i in range(len(ql)):
        order = np.argsort(d2[i], kind="stable")[:k]
        hits += int(np.any(gl[order] == ql[i]))
    return hits / len(ql)


def recall_report(queries: EmbeddingBatch, gallery: EmbeddingBatch,
                  ks: Sequence[int] = (1, 2, 4, 8)) -> dict[int, float]:
    usable = len(gallery.labels)
    if queries.embeddings.data.shape == gallery.embeddings.data.shape and \
            np.array_equal(queries.embeddings.data, gallery.embeddings.data):
        usable -= 1
    return {int(k): recall_at_k(queries, gallery, int(k)) for k in ks if k <= usable}


# ---------------------------------------------------------------------------
# retrieval checkpoint: magic "SVTR", u32 version, length-prefixed JSON header
# {vit config, out_channels}, backbone tensors in manifest order, then the
# projection weight and bias
# ---------------------------------------------------------------------------

def write_retrieval_checkpoint(path: str, model: RetrievalModel) -> None:
    header = json.dumps({"vit": model.backbone.config.to_dict(),
                         "out_channels": model.out_channels}).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(RETRIEVAL_MAGIC)
        f.write(struct.pack("<I", RETRIEVAL_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, t in model.backbone.items():
            T.write_array(f, t.data)
        T.write_array(f, model.proj_weight.data)
        T.write_array(f, model.proj_bias.data)
    os.replace(tmp, path)


def read_retrieval_checkpoint(path: str, trainable: bool = False) -> RetrievalModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RETRIEVAL_MAGIC:
            raise BadMagicError(f"{path}: expected magic {RETRIEVAL_MAGIC!r}, got {magic!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise TruncatedFileError(f"{path}: truncated version")
        (version,) = struct.unpack("<I", raw)
        if version != RETRIEVAL_VERSION:
            raise VersionError(f"{path}: unsupported retrieval-checkpoint version {version}")
        raw = f.read(8)
        if len(raw) != 8:
            raise TruncatedFileError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise TruncatedFileError(f"{path}: truncated header")
        header = json.loads(blob.decode("utf-8"))
        config = ViTConfig.from_dict(header["vit"])
        tensors = {}
        for name, shape in param_shapes(config):
            arr = T.read_array(f)
            if arr.shape != shape:
                raise ShapeError(f"{path}: parameter {name} has shape {arr.shape}, want {shape}")
            tensors[name] = Tensor(arr, requires_grad=trainable)
        w = Tensor(T.read_array(f), requires_grad=trainable)
        b = Tensor(T.read_array(f), requires_grad=trainable)
    backbone = ViTParams(config, tensors)
    return RetrievalModel(backbone=backbone, proj_weight=w, proj_bias=b)
