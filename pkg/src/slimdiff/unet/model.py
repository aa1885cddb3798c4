"""Torch modules for the declarative layouts.

Module attribute names follow the structural plan exactly, so
`named_parameters()` agrees with the phantom census name for name. The up
path resizes features to each skip's spatial size before concatenation;
at full scale that reduces to the usual doubling, and it keeps degenerate
tiny latents (where repeated halving saturates at 1x1) well defined.
"""

import hashlib
import math

import torch
import torch.nn.functional as F
from torch import nn

from ..core.batch import LatentBatch
from ..errors import DimensionError
from .spec import BlockSpec, UNetSpec, validate_spec


def _group_count(channels: int) -> int:
    groups = 32 if channels % 32 == 0 else math.gcd(channels, 32)
    # keep at least 2 channels per group: normalizing a single value is
    # degenerate and torch rejects it outright on 1x1 maps at batch 1
    while groups > 1 and channels // groups < 2:
        groups //= 2
    return groups


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_group_count(channels), channels)


class TimestepEmbedding(nn.Module):
    def __init__(self, base_dim: int, embed_dim: int):
        super().__init__()
        if base_dim % 2:
            raise DimensionError(f"sinusoidal embedding needs an even base width, got {base_dim}")
        self.base_dim = base_dim
        self.linear_1 = nn.Linear(base_dim, embed_dim)
        self.linear_2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, timesteps: torch.Tensor) -> torch.Tensor:
        half = self.base_dim // 2
        dtype = self.linear_1.weight.dtype
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=dtype, device=timesteps.device) / half
        )
        args = timesteps.to(dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.linear_2(F.silu(self.linear_1(emb)))


class ResnetBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = _gn(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_emb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.conv_shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        skip = x if self.conv_shortcut is None else self.conv_shortcut(x)
        return h + skip


class CrossAttention(nn.Module):
    """Multi-head attention over flattened spatial positions.

    context=None makes it self-attention. Softmax runs explicitly (no
    fused kernel) so weights can be captured for the heatmap export.
    """

    def __init__(self, query_dim: int, context_dim: int | None, heads: int):
        super().__init__()
        if query_dim % heads:
            raise DimensionError(f"{query_dim} channels not divisible by {heads} heads")
        kv_dim = context_dim if context_dim is not None else query_dim
        self.heads = heads
        self.scale = (query_dim // heads) ** -0.5
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)
        self.capture_weights = False
        self.last_weights = None  # [B, heads, S, L] when captured

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, c = x.shape
        return x.view(b, s, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if context is None else context
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(ctx)), self._split(self.to_v(ctx))
        scores = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        weights = scores.softmax(dim=-1)
        if self.capture_weights:
            self.last_weights = weights.detach()
        out = torch.matmul(weights, v)
        b, h, s, d = out.shape
        out = out.transpose(1, 2).reshape(b, s, h * d)
        return self.to_out(out)


class FeedForward(nn.Module):
    """Gated-GELU expansion: project to 8c, gate down to 4c, back to c."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 8 * dim)
        self.out = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        value, gate = self.proj(x).chunk(2, dim=-1)
        return self.out(value * F.gelu(gate))


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = _gn(channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = CrossAttention(channels, None, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = CrossAttention(channels, context_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        residual = x
        hidden = self.proj_in(self.norm(x))
        hidden = hidden.permute(0, 2, 3, 1).reshape(b, h * w, c)
        hidden = hidden + self.attn1(self.norm1(hidden))
        hidden = hidden + self.attn2(self.norm2(hidden), context)
        hidden = hidden + self.ff(self.norm3(hidden))
        hidden = hidden.reshape(b, h, w, c).permute(0, 3, 1, 2)
        return self.proj_out(hidden) + residual


class DownBlock(nn.Module):
    def __init__(self, b: BlockSpec, temb_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.resnets = nn.ModuleList()
        self.attentions = nn.ModuleList() if b.is_cross_attn else None
        cin = b.in_channels
        for _ in range(b.rt_pairs):
            self.resnets.append(ResnetBlock(cin, b.out_channels, temb_dim))
            if self.attentions is not None:
                self.attentions.append(TransformerBlock(b.out_channels, context_dim, heads))
            cin = b.out_channels
        self.downsampler = (
            nn.Conv2d(b.out_channels, b.out_channels, 3, stride=2, padding=1) if b.has_downsample else None
        )

    def forward(self, h, temb, context, skips: list):
        for j, resnet in enumerate(self.resnets):
            h = resnet(h, temb)
            if self.attentions is not None:
                h = self.attentions[j](h, context)
            skips.append(h)
        if self.downsampler is not None:
            h = self.downsampler(h)
            skips.append(h)
        return h


class Upsampler(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        if h.shape[-2:] != target_hw:
            h = F.interpolate(h, size=target_hw, mode="nearest")
        return self.conv(h)


class UpBlock(nn.Module):
    def __init__(self, b: BlockSpec, resnet_inputs: list[int], temb_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.resnets = nn.ModuleList()
        self.attentions = nn.ModuleList() if b.is_cross_attn else None
        for rin in resnet_inputs:
            self.resnets.append(ResnetBlock(rin, b.out_channels, temb_dim))
            if self.attentions is not None:
                self.attentions.append(TransformerBlock(b.out_channels, context_dim, heads))
        self.upsampler = Upsampler(b.out_channels) if b.has_upsample else None

    def forward(self, h, temb, context, skips: list):
        for j, resnet in enumerate(self.resnets):
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = resnet(torch.cat([h, skip], dim=1), temb)
            if self.attentions is not None:
                h = self.attentions[j](h, context)
        if self.upsampler is not None:
            h = self.upsampler(h, skips[-1].shape[-2:])
        return h


class MidBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.resnets = nn.ModuleList(
            [ResnetBlock(channels, channels, temb_dim), ResnetBlock(channels, channels, temb_dim)]
        )
        self.attentions = nn.ModuleList([TransformerBlock(channels, context_dim, heads)])

    def forward(self, h, temb, context):
        h = self.resnets[0](h, temb)
        h = self.attentions[0](h, context)
        return self.resnets[1](h, temb)


def _up_resnet_inputs(spec: UNetSpec, i: int) -> list[int]:
    rev = tuple(reversed(spec.channel_schedule))
    b = spec.up_blocks[i]
    prev_out = spec.up_blocks[i - 1].out_channels if i else spec.channel_schedule[-1]
    inputs = []
    for j in range(b.rt_pairs):
        skip = rev[min(i + 1, len(rev) - 1)] if j == b.rt_pairs - 1 else b.out_channels
        inputs.append((prev_out if j == 0 else b.out_channels) + skip)
    return inputs


class UNetModel(nn.Module):
    """Noise-prediction network; tap names: bottleneck, final_up."""

    TAPS = ("bottleneck", "final_up")

    def __init__(self, spec: UNetSpec):
        super().__init__()
        validate_spec(spec)
        self.spec = spec
        c0 = spec.channel_schedule[0]
        temb = spec.time_embed_dim
        self.conv_in = nn.Conv2d(spec.in_channels, c0, 3, padding=1)
        self.time_embedding = TimestepEmbedding(c0, temb)
        self.down_blocks = nn.ModuleList(
            [DownBlock(b, temb, spec.context_dim, spec.num_heads) for b in spec.down_blocks]
        )
        self.mid_block = (
            MidBlock(spec.mid_block.out_channels, temb, spec.context_dim, spec.num_heads)
            if spec.mid_block is not None
            else None
        )
        self.up_blocks = nn.ModuleList(
            [
                UpBlock(b, _up_resnet_inputs(spec, i), temb, spec.context_dim, spec.num_heads)
                for i, b in enumerate(spec.up_blocks)
            ]
        )
        self.conv_norm_out = _gn(c0)
        self.conv_out = nn.Conv2d(c0, spec.out_channels, 3, padding=1)

    def forward(self, x, timesteps=None, context=None, return_taps=False):
        if isinstance(x, LatentBatch):
            if timesteps is None:
                timesteps = x.timestep
            x = x.data
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"expected [N,{self.spec.in_channels},H,W] input, got {tuple(x.shape)}"
            )
        if timesteps is None:
            raise DimensionError("timesteps required when x is a raw tensor")
        if context is None or context.ndim != 3 or context.shape[-1] != self.spec.context_dim:
            got = None if context is None else tuple(context.shape)
            raise DimensionError(
                f"context must be [N,L,{self.spec.context_dim}], got {got}"
            )
        temb = self.time_embedding(timesteps)
        h = self.conv_in(x)
        skips = [h]
        for block in self.down_blocks:
            h = block(h, temb, context, skips)
        if self.mid_block is not None:
            h = self.mid_block(h, temb, context)
        taps = {"bottleneck": h}
        for block in self.up_blocks:
            h = block(h, temb, context, skips)
        taps["final_up"] = h
        out = self.conv_out(F.silu(self.conv_norm_out(h)))
        if return_taps:
            return out, taps
        return out


def _param_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}\x1f{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def materialize(spec: UNetSpec, seed: int = 0) -> UNetModel:
    """Build a model with a deterministic per-parameter initialization.

    Weights draw from normal(0, 1/sqrt(fan_in)); biases and norm offsets
    are zero, norm gains one. The output projection is fully zeroed so an
    untrained network predicts zero noise, which keeps the first training
    steps near the data manifold. Each parameter's stream is keyed by its
    dotted name, so identical names get identical values regardless of
    construction order.
    """
    model = UNetModel(spec)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.startswith("conv_out."):
                param.zero_()
                continue
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "bias":
                param.zero_()
            elif param.ndim == 1:
                # norm gains (weight vectors)
                param.fill_(1.0)
            else:
                fan_in = param.shape[1] * (param.shape[2] * param.shape[3] if param.ndim == 4 else 1)
                gen = torch.Generator().manual_seed(_param_seed(seed, name))
                values = torch.randn(param.shape, generator=gen) / math.sqrt(fan_in)
                param.copy_(values)
    return model


def export_attention_maps(model: UNetModel, x, timesteps=None, context=None) -> list[dict]:
    """Grayscale spatial heatmaps of the text cross-attention layers.

    One entry per cross-attention layer in forward order: weights averaged
    over heads and token positions, reshaped to the layer's spatial grid,
    min-max normalized to [0,1] per sample. A layer attending uniformly
    (for instance with zeroed query/key projections) yields a constant
    map. Returns dicts with keys `layer` (dotted module path) and `map`
    (tensor [N, H, W]).
    """
    cross = [
        (name, module)
        for name, module in model.named_modules()
        if isinstance(module, CrossAttention) and name.endswith("attn2")
    ]
    if not cross:
        raise DimensionError("model has no cross-attention layer to visualize")
    shapes: dict[str, tuple[int, int]] = {}
    hooks = []
    try:
        for name, module in cross:
            module.capture_weights = True
            owner = model.get_submodule(name.rsplit(".", 1)[0])

            def record(mod, args, _out, key=name):
                shapes[key] = tuple(args[0].shape[-2:])

            hooks.append(owner.register_forward_hook(record))
        with torch.no_grad():
            model.forward(x, timesteps, context)
    finally:
        for h in hooks:
            h.remove()
        for _, module in cross:
            module.capture_weights = False

    maps = []
    for name, module in cross:
        weights = module.last_weights  # [B, heads, S, L]
        module.last_weights = None
        gh, gw = shapes[name]
        flat = weights.mean(dim=(1, 3))  # [B, S]
        grid = flat.reshape(flat.shape[0], gh, gw)
        lo = grid.amin(dim=(1, 2), keepdim=True)
        hi = grid.amax(dim=(1, 2), keepdim=True)
        span = hi - lo
        normed = torch.where(span > 0, (grid - lo) / torch.clamp(span, min=1e-20), torch.zeros_like(grid))
        maps.append({"layer": name, "map": normed})
    return maps
