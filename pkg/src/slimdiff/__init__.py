"""Desk-scale laboratory for compressing latent diffusion U-Nets.

Subpackages and modules:

- ``core``: noise scheduler, latent codec, conditioning table, batches.
- ``unet``: declarative U-Net specs, phantom counting, torch models,
  teacher-to-student weight transfer.
- ``distill``: soft/hard/feature distillation losses and the combined step.
- ``replay``: class-balanced latent replay buffer.
- ``trainer``: class-sequential training loop, checkpointing, generation.
- ``metrics``: FID/KID/CLIP-score/LPIPS-style evaluation with pluggable
  feature extractors.
- ``profiler``: parameter, MAC, and latency accounting.
- ``cli``: the ``slimdiff`` command.
"""

__version__ = "0.1.0"
