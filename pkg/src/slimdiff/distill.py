"""Distillation losses and the combined teacher-student step.

The classification-style terms need categories, which a noise-predicting
network does not have. Logits here are the per-channel spatial mean of
the noise prediction (K = latent channels); when the class vocabulary
size differs from K, a fixed seeded linear readout maps pooled
predictions onto class logits for the hard term. Both constructions are
isolated behind `derive_logits` / `make_readout` so alternative readings
can be swapped without touching the losses.
"""

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core.batch import LatentBatch
from .core.scheduler import Scheduler, add_noise
from .errors import ConfigurationError, DimensionError, ValidationError


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "temperature"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigurationError(f"{name} must be finite, got {v!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError("beta and gamma must be non-negative")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")


def _check_logits(t: torch.Tensor, name: str):
    if t.ndim != 2:
        raise DimensionError(f"{name} must be [N,K], got {tuple(t.shape)}")
    if t.shape[1] < 2:
        raise DimensionError(f"{name} needs at least 2 categories, got {t.shape[1]}")
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite values")


def soft_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """T^2-scaled KL between temperature-softened teacher and student."""
    _check_logits(teacher_logits, "teacher_logits")
    _check_logits(student_logits, "student_logits")
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    log_qt = F.log_softmax(teacher_logits / temperature, dim=1)
    log_qs = F.log_softmax(student_logits / temperature, dim=1)
    kl = (log_qt.exp() * (log_qt - log_qs)).sum(dim=1).mean()
    return temperature * temperature * kl


def _check_one_hot(labels: torch.Tensor):
    if labels.ndim != 2:
        raise DimensionError(f"labels must be [N,K], got {tuple(labels.shape)}")
    is_binary = ((labels == 0) | (labels == 1)).all()
    if not is_binary or not (labels.sum(dim=1) == 1).all():
        raise ValidationError("labels must be exact one-hot rows")


def hard_loss(labels: torch.Tensor, student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of both predictions against the true labels.

    The teacher term is part of the reported value but is constant with
    respect to the student.
    """
    _check_one_hot(labels)
    _check_logits(student_logits, "student_logits")
    _check_logits(teacher_logits, "teacher_logits")
    if labels.shape != student_logits.shape or labels.shape != teacher_logits.shape:
        raise DimensionError(
            f"label/logit shapes differ: {tuple(labels.shape)} vs "
            f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    y = labels.to(student_logits.dtype)
    s_term = -(y * F.log_softmax(student_logits, dim=1)).sum(dim=1)
    t_term = -(y * F.log_softmax(teacher_logits, dim=1)).sum(dim=1)
    return (s_term + t_term).mean()


def feature_loss(phi_t: torch.Tensor, phi_s: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared L2 feature gap, unnormalized."""
    if phi_t.shape != phi_s.shape:
        raise DimensionError(f"feature shapes differ: {tuple(phi_t.shape)} vs {tuple(phi_s.shape)}")
    if phi_t.ndim != 2:
        raise DimensionError(f"features must be [N,D], got {tuple(phi_t.shape)}")
    if not torch.isfinite(phi_t).all() or not torch.isfinite(phi_s).all():
        raise ValidationError("feature maps contain non-finite values")
    return ((phi_t - phi_s) ** 2).sum(dim=1).mean()


def total_loss(l_soft, l_hard, l_feature, l_mse, cfg: DistillConfig):
    for name, v in (("l_soft", l_soft), ("l_hard", l_hard), ("l_feature", l_feature), ("l_mse", l_mse)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise ValidationError(f"{name} is non-finite ({value})")
    return cfg.alpha * l_soft + (1 - cfg.alpha) * l_hard + cfg.beta * l_feature + cfg.gamma * l_mse


def derive_logits(noise_pred: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean of the prediction: [N,C,H,W] -> [N,C]."""
    if noise_pred.ndim != 4:
        raise DimensionError(f"expected [N,C,H,W] prediction, got {tuple(noise_pred.shape)}")
    logits = noise_pred.mean(dim=(2, 3))
    _check_logits(logits, "derived logits")
    return logits


def make_readout(in_dim: int, num_classes: int, seed: int = 0) -> torch.Tensor:
    """Fixed seeded matrix [num_classes, in_dim] mapping pooled predictions
    to class logits. Never trained; the same seed gives the same map."""
    if num_classes < 2:
        raise ConfigurationError(f"readout needs at least 2 classes, got {num_classes}")
    digest = hashlib.sha256(f"readout\x1f{seed}\x1f{in_dim}\x1f{num_classes}".encode()).digest()
    gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
    return torch.randn(num_classes, in_dim, generator=gen)


def class_logits(noise_pred: torch.Tensor, num_classes: int, readout: torch.Tensor | None = None) -> torch.Tensor:
    """Logits for the hard term: identity when the vocabulary size equals
    the channel count, otherwise the fixed readout applied to the pooled
    prediction."""
    pooled = derive_logits(noise_pred)
    if num_classes == pooled.shape[1]:
        return pooled
    if readout is None:
        raise ConfigurationError(
            f"vocabulary size {num_classes} differs from channel count {pooled.shape[1]}; "
            "a readout matrix is required"
        )
    if readout.shape != (num_classes, pooled.shape[1]):
        raise DimensionError(
            f"readout shape {tuple(readout.shape)} incompatible with "
            f"({num_classes}, {pooled.shape[1]})"
        )
    return pooled @ readout.t()


def feature_vector(taps: dict) -> torch.Tensor:
    """Pool each tapped feature map over space and concatenate: [N, sum(C)]."""
    parts = []
    for name in ("bottleneck", "final_up"):
        if name not in taps:
            raise DimensionError(f"missing tap {name!r}")
        parts.append(taps[name].mean(dim=(2, 3)))
    return torch.cat(parts, dim=1)


class TapProjection(torch.nn.Module):
    """Trainable linear map aligning student feature width to the teacher's.

    Only needed when the two concatenated tap widths differ; the canonical
    pruning keeps widths equal, so the default pipeline runs without one.
    """

    def __init__(self, student_dim: int, teacher_dim: int):
        super().__init__()
        self.proj = torch.nn.Linear(student_dim, teacher_dim)

    def forward(self, phi_s: torch.Tensor) -> torch.Tensor:
        return self.proj(phi_s)


@dataclass(frozen=True)
class LossBreakdown:
    l_soft: float
    l_hard: float
    l_feature: float
    l_mse: float
    total: float

    def as_dict(self) -> dict:
        return {
            "l_soft": self.l_soft,
            "l_hard": self.l_hard,
            "l_feature": self.l_feature,
            "l_mse": self.l_mse,
            "total": self.total,
        }


def _forward_losses(
    teacher,
    student,
    batch: LatentBatch,
    eps: torch.Tensor,
    cfg: DistillConfig,
    scheduler: Scheduler,
    context: torch.Tensor,
    num_classes: int,
    readout: torch.Tensor | None,
    tap_projection=None,
):
    if eps.shape != batch.data.shape:
        raise DimensionError(f"eps shape {tuple(eps.shape)} != batch {tuple(batch.data.shape)}")
    t = batch.timestep
    x_t = add_noise(scheduler, batch, eps, t).data
    with torch.no_grad():
        t_pred, t_taps = teacher(x_t, t, context, return_taps=True)
    s_pred, s_taps = student(x_t, t, context, return_taps=True)

    t_logits = derive_logits(t_pred)
    s_logits = derive_logits(s_pred)
    l_soft = soft_loss(t_logits, s_logits, cfg.temperature)

    labels = F.one_hot(batch.cond_id, num_classes).to(s_pred.dtype)
    l_hard = hard_loss(
        labels,
        class_logits(s_pred, num_classes, readout),
        class_logits(t_pred, num_classes, readout),
    )

    phi_t = feature_vector(t_taps)
    phi_s = feature_vector(s_taps)
    if phi_s.shape[1] != phi_t.shape[1]:
        if tap_projection is None:
            raise DimensionError(
                f"student feature width {phi_s.shape[1]} differs from teacher "
                f"{phi_t.shape[1]}; a tap projection is required"
            )
        phi_s = tap_projection(phi_s)
    l_feature = feature_loss(phi_t, phi_s)

    l_mse = F.mse_loss(s_pred, eps)
    total = total_loss(l_soft, l_hard, l_feature, l_mse, cfg)
    return l_soft, l_hard, l_feature, l_mse, total


def _breakdown(parts) -> LossBreakdown:
    l_soft, l_hard, l_feature, l_mse, total = (float(p.detach()) for p in parts)
    return LossBreakdown(l_soft, l_hard, l_feature, l_mse, total)


def compute_losses(
    teacher,
    student,
    batch: LatentBatch,
    eps: torch.Tensor,
    cfg: DistillConfig,
    scheduler: Scheduler,
    context: torch.Tensor,
    num_classes: int,
    readout: torch.Tensor | None = None,
    tap_projection=None,
) -> LossBreakdown:
    """Loss values only, no gradients anywhere."""
    with torch.no_grad():
        parts = _forward_losses(
            teacher, student, batch, eps, cfg, scheduler, context, num_classes, readout, tap_projection
        )
    return _breakdown(parts)


def distill_step(
    teacher,
    student,
    batch: LatentBatch,
    eps: torch.Tensor,
    cfg: DistillConfig,
    scheduler: Scheduler,
    context: torch.Tensor,
    num_classes: int,
    readout: torch.Tensor | None = None,
    tap_projection=None,
    loss_scale: float = 1.0,
) -> tuple[LossBreakdown, dict]:
    """One distillation forward/backward.

    Accumulates `loss_scale * total` into the student's (and projection's)
    .grad fields and also returns the gradients by name. The optimizer
    step stays with the caller, so the teacher is untouched by contract.
    """
    parts = _forward_losses(
        teacher, student, batch, eps, cfg, scheduler, context, num_classes, readout, tap_projection
    )
    total = parts[4]
    (loss_scale * total).backward()
    grads = {
        name: p.grad.detach().clone()
        for name, p in student.named_parameters()
        if p.grad is not None
    }
    return _breakdown(parts), grads
