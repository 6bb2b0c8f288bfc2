"""Distribution-calibration few-shot classification over teacher embeddings.

Base-class Gaussians (mean + unbiased covariance) are estimated from many
labeled samples. Each novel support feature borrows statistics from its
nearest base classes, yielding a calibrated Gaussian that is sampled to
augment the support set before fitting a multinomial logistic regressor.
Raw teacher features are used throughout; no power transform is applied.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .vit import ViTParams, encode

PSD_RTOL = 1e-8


@dataclass
class ClassStatistics:
    class_id: int
    mean: np.ndarray        # (D,)
    covariance: np.ndarray  # (D, D), symmetric PSD
    count: int


@dataclass
class CalibratedDistribution:
    mean: np.ndarray
    covariance: np.ndarray
    source_support_index: int | None = None


@dataclass
class Episode:
    way: int
    shot: int
    query_per_class: int
    support_x: np.ndarray  # (way*shot, D)
    support_y: np.ndarray
    query_x: np.ndarray    # (way*query_per_class, D)
    query_y: np.ndarray

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=np.float64)
        self.query_x = np.asarray(self.query_x, dtype=np.float64)
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        if len(self.support_x) != self.way * self.shot:
            raise ShapeError(f"support size {len(self.support_x)} != way*shot "
                             f"{self.way * self.shot}")
        if len(self.query_x) != self.way * self.query_per_class:
            raise ShapeError(f"query size {len(self.query_x)} != way*query_per_class "
                             f"{self.way * self.query_per_class}")
        present = set(np.unique(self.support_y)) | set(np.unique(self.query_y))
        if len(set(np.unique(self.support_y))) != self.way or len(present) != self.way:
            raise ConfigError(f"episode labels span {len(present)} classes, expected {self.way}")


@dataclass
class FewshotConfig:
    k: int = 2
    alpha: float = 0.21
    n_augment: int = 750
    l2: float = 1e-3
    max_iter: int = 5000
    tol: float = 1e-6

    def to_dict(self) -> dict:
        return {"k": self.k, "alpha": self.alpha, "n_augment": self.n_augment,
                "l2": self.l2, "max_iter": self.max_iter, "tol": self.tol}

    @classmethod
    def from_dict(cls, d: dict) -> "FewshotConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fewshot config keys: {sorted(unknown)}")
        return cls(**d)


def extract_feature(teacher: ViTParams, image: np.ndarray) -> np.ndarray:
    """Raw backbone class-token embedding; no transform of any kind."""
    return encode(teacher, image).data


def class_statistics(features_by_class: Mapping[int, Sequence]) -> list[ClassStatistics]:
    """Per-class mean and unbiased covariance (denominator n-1), sorted by class id."""
    out = []
    for class_id in sorted(features_by_class):
        x = np.asarray(features_by_class[class_id], dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"class {class_id}: features must be 2-D, got shape {x.shape}")
        n = len(x)
        if n < 2:
            raise DomainError(f"class {class_id}: needs >= 2 samples, got {n}")
        mu = x.mean(axis=0)
        xc = x - mu
        cov = (xc.T @ xc) / (n - 1)
        cov = (cov + cov.T) / 2.0
        out.append(ClassStatistics(class_id=int(class_id), mean=mu, covariance=cov, count=n))
    return out


def calibrate(support_feature: np.ndarray, base_stats: Sequence[ClassStatistics],
              k: int, alpha: float,
              source_support_index: int | None = None) -> CalibratedDistribution:
    """Borrow statistics from the k nearest base classes (Euclidean on means,
    ties broken by ascending class id): the calibrated mean averages the k base
    means with the support feature, the covariance averages the k base
    covariances plus alpha * I."""
    if not base_stats:
        raise ConfigError("calibrate: empty base statistics")
    if k <= 0 or k > len(base_stats):
        raise ConfigError(f"calibrate: k={k} outside [1, {len(base_stats)}]")
    if alpha < 0:
        raise ConfigError("calibrate: alpha must be nonnegative")
    x = np.asarray(support_feature, dtype=np.float64)
    dists = np.array([np.linalg.norm(s.mean - x) for s in base_stats])
    ids = np.array([s.class_id for s in base_stats])
    order = np.lexsort((ids, dists))
    top = [base_stats[i] for i in order[:k]]
    mean = (np.sum([s.mean for s in top], axis=0) + x) / (k + 1)
    cov = np.mean([s.covariance for s in top], axis=0) + alpha * np.eye(len(x))
    return CalibratedDistribution(mean=mean, covariance=cov,
                                  source_support_index=source_support_index)


def sample_augmented(dist: CalibratedDistribution, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw n samples from N(mean, covariance) via Cholesky, falling back to an
    eigendecomposition for semidefinite covariances."""
    if n < 1:
        raise ConfigError(f"sample_augmented: n must be >= 1, got {n}")
    cov = np.asarray(dist.covariance, dtype=np.float64)
    d = len(dist.mean)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        scale = max(w.max(), 0.0)
        if w.min() < -PSD_RTOL * max(scale, 1.0):
            raise DomainError(f"sample_augmented: covariance has eigenvalue {w.min()}, "
                              "not PSD within tolerance") from None
        chol = v * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, d))
    return dist.mean + z @ chol.T


@dataclass
class LogisticModel:
    weights: np.ndarray  # (D, C)
    bias: np.ndarray     # (C,)
    classes: np.ndarray  # (C,) original label of each column
    iterations: int = 0

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[self.decision(x).argmax(axis=1)]


def _lipschitz_lr(x: np.ndarray, l2: float) -> float:
    """Fixed step 1.5/L with L = 0.5 * lambda_max(X^T X / N) + l2 (power
    iteration); any constant step below 2/L converges for this convex
    L-smooth objective."""
    s = x.T @ x / len(x)
    v = np.ones(s.shape[0]) / np.sqrt(s.shape[0])
    lam = 0.0
    for _ in range(100):
        w = s @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        lam = norm
    return 1.5 / max(0.5 * lam + l2, 1e-12)


def fit_logistic(features: np.ndarray, labels: np.ndarray, l2: float,
                 max_iter: int = 5000, tol: float = 1e-6) -> LogisticModel:
    """Multinomial logistic regression by full-batch gradient descent with L2
    penalty on the weights; stops when the gradient inf-norm drops below tol."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"fit_logistic: features {x.shape} vs {len(y)} labels")
    if l2 < 0:
        raise ConfigError("fit_logistic: l2 must be nonnegative")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DomainError(f"fit_logistic: needs >= 2 classes, got {len(classes)}")
    n, d = x.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), np.searchsorted(classes, y)] = 1.0

    lr = _lipschitz_lr(x, l2)
    xt = np.ascontiguousarray(x.T)
    w = np.zeros((d, c))
    b = np.zeros(c)
    z = np.empty((n, c))
    gw = np.empty((d, c))
    it = 0
    for it in range(1, max_iter + 1):
        np.matmul(x, w, out=z)
        z += b
        z -= z.max(axis=1, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=1, keepdims=True)
        z -= onehot
        z /= n
        np.matmul(xt, z, out=gw)
        gw += l2 * w
        gb = z.sum(axis=0)
        if max(np.abs(gw).max(), np.abs(gb).max()) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return LogisticModel(weights=w, bias=b, classes=classes, iterations=it)


def run_episode(episode: Episode, base_stats: Sequence[ClassStatistics],
                cfg: FewshotConfig, rng: np.random.Generator) -> float:
    """Calibrate + augment each support feature, fit the regressor on the pooled
    set, return top-1 accuracy on the query set. n_augment=0 is the plain
    logistic-on-support baseline."""
    xs = [episode.support_x]
    ys = [episode.support_y]
    if cfg.n_augment > 0:
        for i, (x, y) in enumerate(zip(episode.support_x, episode.support_y)):
            dist = calibrate(x, base_stats, cfg.k, cfg.alpha, source_support_index=i)
            aug = sample_augmented(dist, cfg.n_augment, rng)
            xs.append(aug)
            ys.append(np.full(cfg.n_augment, y))
    model = fit_logistic(np.concatenate(xs), np.concatenate(ys), cfg.l2,
                         max_iter=cfg.max_iter, tol=cfg.tol)
    pred = model.predict(episode.query_x)
    return float((pred == episode.query_y).mean())


def episode_rng(master_seed: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, task_index]))


def confidence_halfwidth(accuracies: np.ndarray) -> float | None:
    """95% CI halfwidth, 1.96 * sample stddev / sqrt(n); None when n < 2."""
    a = np.asarray(accuracies, dtype=np.float64)
    if len(a) < 2:
        return None
    return float(1.96 * a.std(ddof=1) / np.sqrt(len(a)))


def evaluate_fewshot(task_source: Callable[[int, np.random.Generator], Episode],
                     num_tasks: int, base_stats: Sequence[ClassStatistics],
                     cfg: FewshotConfig, master_seed: int = 0, threads: int = 1,
                     episode_runner: Callable | None = None) -> dict:
    """Mean accuracy and 95% CI over tasks; each task owns an RNG derived from
    (master_seed, task_index), so the result is independent of evaluation order."""
    if num_tasks < 1:
        raise ConfigError("evaluate_fewshot: num_tasks must be >= 1")
    runner = episode_runner or run_episode
    acc = np.empty(num_tasks)

    def one(i: int) -> None:
        rng = episode_rng(master_seed, i)
        acc[i] = runner(task_source(i, rng), base_stats, cfg, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(num_tasks)))
    else:
        for i in range(num_tasks):
            one(i)
    mean = float(np.sum(acc) / num_tasks)
    return {"tasks": num_tasks, "mean": mean, "ci95": confidence_halfwidth(acc)}


def episode_from_store(features: np.ndarray, labels: np.ndarray, way: int, shot: int,
                       query_per_class: int, rng: np.random.Generator) -> Episode:
    """Sample an N-way K-shot episode from a labeled embedding matrix."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    needed = shot + query_per_class
    usable = [c for c in classes if (labels == c).sum() >= needed]
    if len(usable) < way:
        raise ConfigError(f"episode_from_store: only {len(usable)} classes have >= "
                          f"{needed} samples, need {way}")
    chosen = rng.choice(np.array(usable), size=way, replace=False)
    sx, sy, qx, qy = [], [], [], []
    for c in chosen:
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(idx)
        sx.append(features[perm[:shot]])
        sy.append(np.full(shot, c))
        qx.append(features[perm[shot:needed]])
        qy.append(np.full(query_per_class, c))
    return Episode(way=way, shot=shot, query_per_class=query_per_class,
                   support_x=np.concatenate(sx), support_y=np.concatenate(sy),
                   query_x=np.concatenate(qx), query_y=np.concatenate(qy))
