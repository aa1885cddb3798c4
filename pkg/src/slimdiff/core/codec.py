"""Latent codecs: image [N,3,H,W] <-> latent [N,4,H/f,W/f].

Two implementations behind one config switch:

- pool_stub (default): average-pool down, nearest-upsample back. Fully
  deterministic, parameter-free, constant-preserving. Latent channels are
  (R, G, B, mean(RGB)) so the channel count matches the reference pipeline
  without inventing information.
- conv_ae: a tiny strided convolutional autoencoder with fixed-seed init.
  Trainable by the caller; never trained by this package, and acceptance
  checks do not depend on its reconstruction quality.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "pool_stub"  # pool_stub | conv_ae
    factor: int = 8
    latent_channels: int = 4
    seed: int = 0


def _check_divisible(h: int, w: int, factor: int):
    if h % factor or w % factor:
        raise DimensionError(f"image size {h}x{w} not divisible by codec factor {factor}")


class PoolStubCodec:
    def __init__(self, cfg: CodecConfig):
        if cfg.latent_channels != 4:
            raise ConfigurationError("pool_stub codec supports exactly 4 latent channels")
        self.cfg = cfg

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [N,3,H,W], got {tuple(images.shape)}")
        _check_divisible(images.shape[2], images.shape[3], self.cfg.factor)
        pooled = F.avg_pool2d(images, self.cfg.factor)
        return torch.cat([pooled, pooled.mean(dim=1, keepdim=True)], dim=1)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(f"expected [N,{self.cfg.latent_channels},h,w], got {tuple(z.shape)}")
        return F.interpolate(z[:, :3], scale_factor=self.cfg.factor, mode="nearest")


class ConvAutoencoderCodec(nn.Module):
    """Three stride-2 conv stages each way for the default factor 8."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        if cfg.factor & (cfg.factor - 1) or cfg.factor < 2:
            raise ConfigurationError("conv_ae codec factor must be a power of two >= 2")
        self.cfg = cfg
        stages = cfg.factor.bit_length() - 1
        gen = torch.Generator().manual_seed(cfg.seed)
        widths = [3] + [16] * (stages - 1) + [cfg.latent_channels]
        enc = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            enc.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
        self.encoder = nn.ModuleList(enc)
        dec = []
        for cout, cin in zip(widths[:-1][::-1], widths[1:][::-1]):
            dec.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
        self.decoder = nn.ModuleList(dec)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [N,3,H,W], got {tuple(images.shape)}")
        _check_divisible(images.shape[2], images.shape[3], self.cfg.factor)
        h = images
        for i, layer in enumerate(self.encoder):
            h = layer(h)
            if i + 1 < len(self.encoder):
                h = torch.tanh(h)
        return h

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for i, layer in enumerate(self.decoder):
            h = layer(h)
            if i + 1 < len(self.decoder):
                h = torch.tanh(h)
        return h


def make_codec(cfg: CodecConfig):
    if cfg.kind == "pool_stub":
        return PoolStubCodec(cfg)
    if cfg.kind == "conv_ae":
        return ConvAutoencoderCodec(cfg)
    raise ConfigurationError(f"unknown codec kind {cfg.kind!r}")


def encode_latent(codec, images: torch.Tensor) -> torch.Tensor:
    return codec.encode(images)


def decode_latent(codec, z: torch.Tensor) -> torch.Tensor:
    return codec.decode(z)
