"""Self-distillation pretraining.

A student encoder learns to match the temperature-sharpened output
distribution of an EMA teacher across multiple crops of the same image:
two global views feed the teacher, all views feed the student, and the
summed cross-entropy between teacher and student distributions is
minimized by SGD on the student only. The teacher follows the student
through a momentum update whose coefficient ramps to 1 on a cosine
schedule. Optional centering of teacher logits guards against collapse
to a constant distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError, TrainingDivergedError
from .tensor import Tensor
from .vit import ViTConfig, ViTParams, encode, head


@dataclass
class DistillConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    num_local_views: int = 2
    global_size: int = 32
    local_size: int = 16
    lambda_base: float = 0.996
    epochs: int = 1
    steps_per_epoch: int = 100
    learning_rate: float = 0.05
    centering_enabled: bool = True
    center_momentum: float = 0.9
    teacher_update: str = "step"  # "step" or "epoch" (teacher frozen within an epoch)
    momentum: float = 0.0
    weight_decay: float = 0.0
    probe_size: int = 8

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ConfigError("temperatures tau_s and tau_t must be positive")
        if self.num_local_views < 0:
            raise ConfigError("num_local_views must be >= 0")
        if not 0.0 < self.lambda_base < 1.0:
            raise ConfigError("lambda_base must lie in (0, 1)")
        if not 0.0 < self.center_momentum < 1.0:
            raise ConfigError("center_momentum must lie in (0, 1)")
        if self.teacher_update not in ("step", "epoch"):
            raise ConfigError("teacher_update must be 'step' or 'epoch'")

    @property
    def num_views(self) -> int:
        return self.num_local_views + 2


@dataclass
class DistillState:
    student: ViTParams
    teacher: ViTParams
    center: np.ndarray | None = None
    step: int = 0
    _momentum_buffers: list[np.ndarray] | None = field(default=None, repr=False)


def sharpen(logits: np.ndarray, tau: float, center: np.ndarray | None = None) -> np.ndarray:
    """Temperature-sharpened softmax, optionally after subtracting a center vector."""
    if tau <= 0:
        raise DomainError(f"sharpen: tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if center is not None:
        center = np.asarray(center, dtype=np.float64)
        if center.shape != z.shape:
            raise ShapeError(f"sharpen: center shape {center.shape} != logits shape {z.shape}")
        z = z - center
    z = z / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def multi_crop(image: np.ndarray, config: DistillConfig,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Two global views plus num_local_views local views: random axis-aligned
    subwindows, each horizontally flipped with probability 0.5."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"multi_crop: expected channels x H x W, got {image.shape}")
    _, h, w = image.shape
    sizes = [config.global_size] * 2 + [config.local_size] * config.num_local_views
    views = []
    for size in sizes:
        if h < size or w < size:
            raise ShapeError(f"multi_crop: image {h}x{w} smaller than crop size {size}")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        crop = image[:, y:y + size, x:x + size]
        if rng.random() < 0.5:
            crop = crop[:, :, ::-1]
        views.append(np.ascontiguousarray(crop))
    return views


def _teacher_probs(state: DistillState, view: np.ndarray,
                   config: DistillConfig) -> tuple[np.ndarray, np.ndarray]:
    logits = head(state.teacher, encode(state.teacher, view)).data
    return sharpen(logits, config.tau_t, state.center), logits


def distillation_loss(state: DistillState, views: Sequence[np.ndarray],
                      config: DistillConfig) -> Tensor:
    loss, _ = _distillation_loss_details(state, views, config)
    return loss


def _distillation_loss_details(state: DistillState, views: Sequence[np.ndarray],
                               config: DistillConfig):
    """Loss plus the raw teacher logits of the two global views (for centering)."""
    if len(views) < 2:
        raise ShapeError(f"distillation_loss: need at least 2 views, got {len(views)}")
    teacher_out = [_teacher_probs(state, v, config) for v in views[:2]]
    inv_tau_s = 1.0 / config.tau_s
    student_logp = [T.log_softmax(head(state.student, encode(state.student, v)) * inv_tau_s)
                    for v in views]
    loss = None
    for t_idx, (probs, _) in enumerate(teacher_out):
        target = Tensor(probs)
        for v_idx, logp in enumerate(student_logp):
            if v_idx == t_idx:
                continue
            term = T.negate(T.sum_(target * logp))
            loss = term if loss is None else loss + term
    return loss, np.stack([lg for _, lg in teacher_out])


def cosine_lambda(step: int, total_steps: int, lambda_base: float) -> float:
    """Momentum coefficient ramping from lambda_base to 1 over total_steps."""
    if total_steps <= 0:
        raise DomainError("cosine_lambda: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise DomainError(f"cosine_lambda: step {step} outside [0, {total_steps}]")
    return 1.0 - (1.0 - lambda_base) * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0


def ema_update(state: DistillState, lam: float) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"ema_update: lambda {lam} outside [0, 1]")
    for (_, t), (_, s) in zip(state.teacher.items(), state.student.items()):
        t.data = lam * t.data + (1.0 - lam) * s.data


def sgd_step(state: DistillState, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    tensors = state.student.tensors()
    if momentum > 0.0 and state._momentum_buffers is None:
        state._momentum_buffers = [np.zeros_like(t.data) for t in tensors]
    for i, t in enumerate(tensors):
        if t.grad is None:
            continue
        g = t.grad if weight_decay == 0.0 else t.grad + weight_decay * t.data
        if momentum > 0.0:
            buf = state._momentum_buffers[i]
            buf *= momentum
            buf += g
            g = buf
        t.data = t.data - lr * g


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    _, h, w = image.shape
    if h < size or w < size:
        raise ShapeError(f"center_crop: image {h}x{w} smaller than {size}")
    y, x = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(image[:, y:y + size, x:x + size])


def entropy_of_mean_teacher(state: DistillState, images: Sequence[np.ndarray],
                            config: DistillConfig) -> float:
    """Entropy of the probe-averaged teacher distribution (collapse monitor)."""
    probs = np.stack([_teacher_probs(state, center_crop(img, config.global_size), config)[0]
                      for img in images])
    p = probs.mean(axis=0)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def init_state(vit_config: ViTConfig, config: DistillConfig,
               rng: np.random.Generator) -> DistillState:
    student = ViTParams.init(vit_config, rng, requires_grad=True)
    teacher = student.copy(requires_grad=False)
    center = np.zeros(vit_config.out_dim) if config.centering_enabled else None
    return DistillState(student=student, teacher=teacher, center=center)


def pretrain(images: Sequence[np.ndarray], vit_config: ViTConfig, config: DistillConfig,
             seed: int) -> tuple[DistillState, list[dict]]:
    """Run the full self-distillation loop; returns final state and a per-step log."""
    if len(images) == 0:
        raise ConfigError("pretrain: empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    state = init_state(vit_config, config, rng)
    probe = [np.asarray(img, dtype=np.float64) for img in images[:max(1, config.probe_size)]]
    total_steps = config.epochs * config.steps_per_epoch
    log: list[dict] = []

    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            img = np.asarray(images[int(rng.integers(0, len(images)))], dtype=np.float64)
            views = multi_crop(img, config, rng)
            loss, teacher_logits = _distillation_loss_details(state, views, config)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(state.step)
            state.student.zero_grads()
            T.backward(loss)
            sgd_step(state, config.learning_rate, config.momentum, config.weight_decay)
            if config.teacher_update == "step":
                lam = cosine_lambda(state.step, total_steps, config.lambda_base)
                ema_update(state, lam)
            else:
                lam = None
            if state.center is not None:
                m = config.center_momentum
                state.center = m * state.center + (1.0 - m) * teacher_logits.mean(axis=0)
            entropy = entropy_of_mean_teacher(state, probe, config)
            state.step += 1
            log.append({"step": state.step, "loss": loss_val, "lambda": lam,
                        "entropy": entropy})
        if config.teacher_update == "epoch":
            lam = cosine_lambda(min(state.step, total_steps), total_steps, config.lambda_base)
            ema_update(state, lam)
            for rec in log[-config.steps_per_epoch:]:
                rec["lambda"] = lam
    return state, log
