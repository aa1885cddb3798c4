"""Feature extractors for the evaluation metrics.

The default extractor is a fixed-seed random convolutional stack: a
deterministic stand-in for the pretrained networks the metrics normally
ride on. Absolute metric values under a stand-in are not comparable to
published numbers; only comparisons within a run family are meaningful.
Every report carries the extractor name so that caveat travels with the
data. `WrappedExtractor` is the adapter slot for plugging in a real
pretrained network when one is available.
"""

import hashlib

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError


def _seeded_generator(*parts) -> torch.Generator:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))


class RandomConvExtractor(nn.Module):
    """Three strided conv layers with fixed random weights.

    extract() returns pooled features [N, feature_dim]; extract_layers()
    returns the per-layer activation maps for perceptual distances.
    """

    def __init__(self, feature_dim: int = 32, seed: int = 0, channels: tuple[int, ...] = (8, 16, 32)):
        super().__init__()
        if feature_dim < 1 or not channels:
            raise DimensionError("feature_dim and channels must be positive")
        self.seed = seed
        self.feature_dim = feature_dim
        self.convs = nn.ModuleList()
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            gen = _seeded_generator("extractor-conv", seed, i)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / (3.0 * cin**0.5))
                conv.bias.zero_()
            cin = cout
            self.convs.append(conv)
        gen = _seeded_generator("extractor-head", seed)
        head = torch.randn(feature_dim, channels[-1], generator=gen) / channels[-1] ** 0.5
        self.register_buffer("head", head)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def name(self) -> str:
        return f"randconv-s{self.seed}-d{self.feature_dim}"

    def _check(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [N,3,H,W] images, got {tuple(images.shape)}")

    def extract_layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        self._check(images)
        h = images.float() * 2.0 - 1.0
        outs = []
        with torch.no_grad():
            for conv in self.convs:
                h = F.relu(conv(h))
                outs.append(h)
        return outs

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        deepest = self.extract_layers(images)[-1]
        pooled = deepest.mean(dim=(2, 3))
        return pooled @ self.head.t()


class WrappedExtractor:
    """Adapter turning any callable into the extractor interface."""

    def __init__(self, name: str, feature_dim: int, fn):
        self._name = name
        self.feature_dim = feature_dim
        self._fn = fn

    @property
    def name(self) -> str:
        return self._name

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        out = self._fn(images)
        if out.ndim != 2 or out.shape[1] != self.feature_dim:
            raise DimensionError(
                f"wrapped extractor returned {tuple(out.shape)}, expected [N,{self.feature_dim}]"
            )
        return out
