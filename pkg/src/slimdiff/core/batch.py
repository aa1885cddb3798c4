"""Latent batches: the currency moved between codec, trainer, and replay."""

from dataclasses import dataclass

import torch

from ..errors import DimensionError, ValidationError


@dataclass
class LatentBatch:
    """A batch of latents with per-sample conditioning ids and timesteps.

    data: [N, C, H, W] float tensor of latent units.
    cond_id: [N] integer tensor of class/prompt indices.
    timestep: [N] integer tensor; range is validated against a scheduler
    at the point of use, not here.
    """

    data: torch.Tensor
    cond_id: torch.Tensor
    timestep: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"latent data must be [N,C,H,W], got shape {tuple(self.data.shape)}")
        n = self.data.shape[0]
        if n < 1:
            raise ValidationError("batch must contain at least one sample")
        self.cond_id = torch.as_tensor(self.cond_id, dtype=torch.long)
        self.timestep = torch.as_tensor(self.timestep, dtype=torch.long)
        if self.cond_id.shape != (n,):
            raise DimensionError(f"cond_id must be [N]={n}, got {tuple(self.cond_id.shape)}")
        if self.timestep.shape != (n,):
            raise DimensionError(f"timestep must be [N]={n}, got {tuple(self.timestep.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValidationError("latent data contains non-finite values")

    def __len__(self) -> int:
        return self.data.shape[0]

    def to(self, dtype: torch.dtype) -> "LatentBatch":
        return LatentBatch(self.data.to(dtype), self.cond_id, self.timestep)
