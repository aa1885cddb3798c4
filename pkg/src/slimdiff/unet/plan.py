"""Structural walkers shared by phantom counting, MAC accounting, and the
torch model.

`iter_param_specs` enumerates every parameter the materialized model will
own, with identical dotted names, so phantom counts and real models can
never drift apart. `macs_walk` replays the forward pass symbolically at a
given input size, tracking the skip stack the same way the model does
(upsampling targets the next skip's spatial size, which equals a plain
doubling whenever sizes halve cleanly).
"""

from dataclasses import dataclass
from typing import Iterator

from ..errors import DimensionError
from .spec import BlockSpec, UNetSpec, validate_spec


@dataclass(frozen=True)
class ParamSpec:
    name: str  # dotted path, matches Model.named_parameters()
    shape: tuple[int, ...]
    block: str  # census group: stem, down_0.., mid, up_0.., head

    @property
    def count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


def _conv(name, cin, cout, k, block) -> list[ParamSpec]:
    return [
        ParamSpec(f"{name}.weight", (cout, cin, k, k), block),
        ParamSpec(f"{name}.bias", (cout,), block),
    ]


def _linear(name, cin, cout, block, bias=True) -> list[ParamSpec]:
    out = [ParamSpec(f"{name}.weight", (cout, cin), block)]
    if bias:
        out.append(ParamSpec(f"{name}.bias", (cout,), block))
    return out


def _norm(name, c, block) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.weight", (c,), block), ParamSpec(f"{name}.bias", (c,), block)]


def _resnet(name, cin, cout, temb, block) -> list[ParamSpec]:
    out = []
    out += _norm(f"{name}.norm1", cin, block)
    out += _conv(f"{name}.conv1", cin, cout, 3, block)
    out += _linear(f"{name}.time_emb_proj", temb, cout, block)
    out += _norm(f"{name}.norm2", cout, block)
    out += _conv(f"{name}.conv2", cout, cout, 3, block)
    if cin != cout:
        out += _conv(f"{name}.conv_shortcut", cin, cout, 1, block)
    return out


def _transformer(name, c, ctx, block) -> list[ParamSpec]:
    out = []
    out += _norm(f"{name}.norm", c, block)
    out += _conv(f"{name}.proj_in", c, c, 1, block)
    out += _norm(f"{name}.norm1", c, block)
    out += _linear(f"{name}.attn1.to_q", c, c, block, bias=False)
    out += _linear(f"{name}.attn1.to_k", c, c, block, bias=False)
    out += _linear(f"{name}.attn1.to_v", c, c, block, bias=False)
    out += _linear(f"{name}.attn1.to_out", c, c, block)
    out += _norm(f"{name}.norm2", c, block)
    out += _linear(f"{name}.attn2.to_q", c, c, block, bias=False)
    out += _linear(f"{name}.attn2.to_k", ctx, c, block, bias=False)
    out += _linear(f"{name}.attn2.to_v", ctx, c, block, bias=False)
    out += _linear(f"{name}.attn2.to_out", c, c, block)
    out += _norm(f"{name}.norm3", c, block)
    out += _linear(f"{name}.ff.proj", c, 8 * c, block)
    out += _linear(f"{name}.ff.out", 4 * c, c, block)
    out += _conv(f"{name}.proj_out", c, c, 1, block)
    return out


def _block_params(prefix: str, b: BlockSpec, temb: int, ctx: int, block_label: str) -> Iterator[ParamSpec]:
    cin = b.in_channels
    for j in range(b.rt_pairs):
        yield from _resnet(f"{prefix}.resnets.{j}", cin, b.out_channels, temb, block_label)
        if b.is_cross_attn:
            yield from _transformer(f"{prefix}.attentions.{j}", b.out_channels, ctx, block_label)
        cin = b.out_channels
    if b.has_downsample:
        yield from _conv(f"{prefix}.downsampler", b.out_channels, b.out_channels, 3, block_label)
    if b.has_upsample:
        yield from _conv(f"{prefix}.upsampler.conv", b.out_channels, b.out_channels, 3, block_label)


def _up_resnet_inputs(spec: UNetSpec, i: int) -> list[tuple[int, int]]:
    """(resnet_in, skip) channel pairs for up block i, mirroring validation."""
    rev = tuple(reversed(spec.channel_schedule))
    b = spec.up_blocks[i]
    prev_out = spec.up_blocks[i - 1].out_channels if i else spec.channel_schedule[-1]
    pairs = []
    for j in range(b.rt_pairs):
        skip = rev[min(i + 1, len(rev) - 1)] if j == b.rt_pairs - 1 else b.out_channels
        rin = prev_out if j == 0 else b.out_channels
        pairs.append((rin + skip, skip))
    return pairs


def iter_param_specs(spec: UNetSpec) -> Iterator[ParamSpec]:
    validate_spec(spec)
    c0 = spec.channel_schedule[0]
    temb = spec.time_embed_dim
    yield from _conv("conv_in", spec.in_channels, c0, 3, "stem")
    yield from _linear("time_embedding.linear_1", c0, temb, "stem")
    yield from _linear("time_embedding.linear_2", temb, temb, "stem")
    for i, b in enumerate(spec.down_blocks):
        yield from _block_params(f"down_blocks.{i}", b, temb, spec.context_dim, f"down_{i}")
    if spec.mid_block is not None:
        c = spec.mid_block.out_channels
        yield from _resnet("mid_block.resnets.0", c, c, temb, "mid")
        yield from _transformer("mid_block.attentions.0", c, spec.context_dim, "mid")
        yield from _resnet("mid_block.resnets.1", c, c, temb, "mid")
    for i, b in enumerate(spec.up_blocks):
        label = f"up_{i}"
        for j, (rin, _skip) in enumerate(_up_resnet_inputs(spec, i)):
            yield from _resnet(f"up_blocks.{i}.resnets.{j}", rin, b.out_channels, temb, label)
            if b.is_cross_attn:
                yield from _transformer(f"up_blocks.{i}.attentions.{j}", b.out_channels, spec.context_dim, label)
        if b.has_upsample:
            yield from _conv(f"up_blocks.{i}.upsampler.conv", b.out_channels, b.out_channels, 3, label)
    yield from _norm("conv_norm_out", c0, "head")
    yield from _conv("conv_out", c0, spec.out_channels, 3, "head")


# ---------------------------------------------------------------------------
# MAC accounting


def _down_size(h: int, w: int) -> tuple[int, int]:
    # stride-2 3x3 conv with padding 1
    return (h - 1) // 2 + 1, (w - 1) // 2 + 1


class _MacTally:
    def __init__(self):
        self.per_block: dict[str, int] = {}

    def add(self, block: str, macs: int):
        self.per_block[block] = self.per_block.get(block, 0) + macs

    @property
    def total(self) -> int:
        return sum(self.per_block.values())


def _conv_macs(t, block, cin, cout, k, h, w):
    t.add(block, k * k * cin * cout * h * w)


def _linear_macs(t, block, cin, cout, positions=1):
    t.add(block, cin * cout * positions)


def _resnet_macs(t, block, cin, cout, temb, h, w):
    _conv_macs(t, block, cin, cout, 3, h, w)
    _linear_macs(t, block, temb, cout)
    _conv_macs(t, block, cout, cout, 3, h, w)
    if cin != cout:
        _conv_macs(t, block, cin, cout, 1, h, w)


def _transformer_macs(t, block, c, ctx, h, w, ctx_len, with_attn):
    s = h * w
    _conv_macs(t, block, c, c, 1, h, w)  # proj_in
    _linear_macs(t, block, c, c, 4 * s)  # attn1 q,k,v,out
    _linear_macs(t, block, c, c, 2 * s)  # attn2 q,out
    _linear_macs(t, block, ctx, c, 2 * ctx_len)  # attn2 k,v
    _linear_macs(t, block, c, 8 * c, s)  # ff in (gated)
    _linear_macs(t, block, 4 * c, c, s)  # ff out
    _conv_macs(t, block, c, c, 1, h, w)  # proj_out
    if with_attn:
        t.add(block, 2 * s * s * c)  # self-attn scores + values
        t.add(block, 2 * s * ctx_len * c)  # cross-attn scores + values


def macs_walk(
    spec: UNetSpec,
    input_shape: tuple[int, int, int, int],
    context_length: int = 77,
    include_attention_matmuls: bool = False,
) -> dict[str, int]:
    """Per-block multiply-accumulate counts for one forward pass.

    Counts the main contraction of convs, linears, and attention
    projections; normalizations, activations, and biases are excluded.
    The attention score/value matmuls are off by default so the totals
    match reference-pipeline module-level counters; the flag adds
    2*S*S*C self plus 2*S*L*C cross per transformer for auditing.
    context_length is the token count of the reference text encoder, not
    this package's conditioning table.
    """
    validate_spec(spec)
    n_batch, cin, h0, w0 = input_shape
    if n_batch != 1:
        raise DimensionError("MAC accounting is defined per sample; use batch size 1")
    if cin != spec.in_channels:
        raise DimensionError(f"input has {cin} channels, spec expects {spec.in_channels}")
    if h0 < 1 or w0 < 1:
        raise DimensionError(f"degenerate input size {h0}x{w0}")

    t = _MacTally()
    c0 = spec.channel_schedule[0]
    temb = spec.time_embed_dim
    ctx = spec.context_dim
    _conv_macs(t, "stem", spec.in_channels, c0, 3, h0, w0)
    _linear_macs(t, "stem", c0, temb)
    _linear_macs(t, "stem", temb, temb)

    h, w = h0, w0
    skips: list[tuple[int, int]] = [(h, w)]
    prev = c0
    for i, b in enumerate(spec.down_blocks):
        label = f"down_{i}"
        cin_b = prev
        for _ in range(b.rt_pairs):
            _resnet_macs(t, label, cin_b, b.out_channels, temb, h, w)
            if b.is_cross_attn:
                _transformer_macs(t, label, b.out_channels, ctx, h, w, context_length, include_attention_matmuls)
            cin_b = b.out_channels
            skips.append((h, w))
        if b.has_downsample:
            h, w = _down_size(h, w)
            _conv_macs(t, label, b.out_channels, b.out_channels, 3, h, w)
            skips.append((h, w))
        prev = b.out_channels

    if spec.mid_block is not None:
        c = spec.mid_block.out_channels
        _resnet_macs(t, "mid", c, c, temb, h, w)
        _transformer_macs(t, "mid", c, ctx, h, w, context_length, include_attention_matmuls)
        _resnet_macs(t, "mid", c, c, temb, h, w)

    for i, b in enumerate(spec.up_blocks):
        label = f"up_{i}"
        for rin, _skip in _up_resnet_inputs(spec, i):
            h, w = skips.pop()  # prev state is resized to the skip's size
            _resnet_macs(t, label, rin, b.out_channels, temb, h, w)
            if b.is_cross_attn:
                _transformer_macs(t, label, b.out_channels, ctx, h, w, context_length, include_attention_matmuls)
        if b.has_upsample:
            h, w = skips[-1]  # upsample to the next skip's size
            _conv_macs(t, label, b.out_channels, b.out_channels, 3, h, w)

    _conv_macs(t, "head", c0, spec.out_channels, 3, h, w)
    return dict(t.per_block)
