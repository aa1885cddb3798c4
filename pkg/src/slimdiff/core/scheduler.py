"""DDPM-style forward process and deterministic reverse update.

Linear beta schedule only. Coefficients are derived once in float64 and
gathered per-timestep; the reverse update is the eta=0 deterministic rule,
so sampling is reproducible under a fixed seed.
"""

from dataclasses import dataclass

import torch

from ..errors import ConfigurationError, DimensionError, ValidationError
from .batch import LatentBatch


@dataclass(frozen=True)
class SchedulerConfig:
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"


class Scheduler:
    """Holds betas / alphas / cumulative alpha-bars for one config."""

    def __init__(self, cfg: SchedulerConfig, betas: torch.Tensor):
        self.cfg = cfg
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)

    @property
    def num_timesteps(self) -> int:
        return self.cfg.num_timesteps

    def check_timesteps(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (t.min() < 0 or t.max() >= self.num_timesteps):
            raise ValidationError(
                f"timesteps must lie in [0, {self.num_timesteps}), got range "
                f"[{int(t.min())}, {int(t.max())}]"
            )
        return t


def make_scheduler(cfg: SchedulerConfig | None = None) -> Scheduler:
    if cfg is None:
        cfg = SchedulerConfig()
    if cfg.schedule_kind != "linear":
        raise ConfigurationError(f"unknown schedule kind {cfg.schedule_kind!r}")
    if cfg.num_timesteps < 1:
        raise ConfigurationError("num_timesteps must be >= 1")
    for name, v in ("beta_start", cfg.beta_start), ("beta_end", cfg.beta_end):
        if not (0.0 < v < 1.0):
            raise ConfigurationError(f"{name} must lie in (0,1), got {v}")
    if cfg.beta_end < cfg.beta_start:
        raise ConfigurationError(
            f"beta_end ({cfg.beta_end}) must not be below beta_start ({cfg.beta_start})"
        )
    # Equal endpoints only make sense for the single-step schedule; a longer
    # one would produce non-increasing betas.
    if cfg.beta_end == cfg.beta_start and cfg.num_timesteps > 1:
        raise ConfigurationError("beta_start == beta_end requires num_timesteps == 1")
    betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.num_timesteps, dtype=torch.float64)
    return Scheduler(cfg, betas)


def _gather(coeffs: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # [N] -> [N,1,1,1] in the target dtype for broadcasting over CHW
    return coeffs[t].to(like.dtype).view(-1, 1, 1, 1)


def add_noise(scheduler: Scheduler, x0: LatentBatch, eps: torch.Tensor, t: torch.Tensor) -> LatentBatch:
    """Forward process: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.data.shape:
        raise DimensionError(
            f"noise shape {tuple(eps.shape)} must equal data shape {tuple(x0.data.shape)}"
        )
    t = scheduler.check_timesteps(t)
    if t.shape != (len(x0),):
        raise DimensionError(f"timesteps must be [N]={len(x0)}, got {tuple(t.shape)}")
    ab = scheduler.alpha_bars
    xt = _gather(ab.sqrt(), t, x0.data) * x0.data + _gather((1.0 - ab).sqrt(), t, x0.data) * eps
    return LatentBatch(xt, x0.cond_id, t)


def ddim_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    alpha_bar_t: torch.Tensor,
    alpha_bar_prev: torch.Tensor,
) -> torch.Tensor:
    """Deterministic reverse update between two points of the schedule.

    x0_hat = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
    x_prev = sqrt(ab_prev) x0_hat + sqrt(1-ab_prev) eps

    alpha_bar_prev = 1 collapses the second line to x0_hat, which is the
    final step of sampling.
    """
    if eps_pred.shape != x_t.shape:
        raise DimensionError(
            f"prediction shape {tuple(eps_pred.shape)} must equal state shape {tuple(x_t.shape)}"
        )
    ab_t = torch.as_tensor(alpha_bar_t, dtype=x_t.dtype).view(-1, 1, 1, 1)
    ab_p = torch.as_tensor(alpha_bar_prev, dtype=x_t.dtype).view(-1, 1, 1, 1)
    x0_hat = (x_t - (1.0 - ab_t).sqrt() * eps_pred) / ab_t.sqrt()
    return ab_p.sqrt() * x0_hat + (1.0 - ab_p).sqrt() * eps_pred


def denoise_step(scheduler: Scheduler, model_out: torch.Tensor, x_t: LatentBatch, t: torch.Tensor) -> LatentBatch:
    """One reverse step t -> t-1; rows at t = 0 return the final x0 estimate."""
    t = scheduler.check_timesteps(t)
    if t.shape != (len(x_t),):
        raise DimensionError(f"timesteps must be [N]={len(x_t)}, got {tuple(t.shape)}")
    ab = scheduler.alpha_bars
    ab_t = ab[t]
    ab_prev = torch.where(t > 0, ab[(t - 1).clamp(min=0)], torch.ones_like(ab_t))
    out = ddim_step(x_t.data, model_out, ab_t.to(x_t.data.dtype), ab_prev.to(x_t.data.dtype))
    return LatentBatch(out, x_t.cond_id, (t - 1).clamp(min=0))
