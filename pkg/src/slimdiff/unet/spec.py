"""Declarative U-Net layouts and the pruning transform.

The canonical pair of layouts reproduces the published parameter totals
exactly: the original has two R-T pairs per cross-attn down block and three
per cross-attn up block (plain blocks two and three resnets); the student
drops one pair from every cross-attn block, one resnet from every plain
block, and the whole mid block. That transform is the one configuration a
layout-space search found matching the pruned total, so `mid_block` is
optional here.
"""

from dataclasses import dataclass, replace

from ..errors import PruningError, SpecError

DOWN_KINDS = ("cross_attn_down", "down")
UP_KINDS = ("cross_attn_up", "up")
MID_KIND = "mid_cross_attn"
SCALES = ("full", "toy")

FULL_CHANNELS = (320, 640, 1280, 1280)
TOY_CHANNELS = (32, 64, 128, 128)
FULL_CONTEXT, TOY_CONTEXT = 768, 64
FULL_HEADS, TOY_HEADS = 8, 2
DOWN_PAIRS, UP_PAIRS = 2, 3


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    rt_pairs: int  # R-T pairs for cross-attn kinds, plain resnets otherwise
    in_channels: int
    out_channels: int
    has_downsample: bool = False
    has_upsample: bool = False

    @property
    def is_cross_attn(self) -> bool:
        return self.kind in ("cross_attn_down", "cross_attn_up", MID_KIND)


@dataclass(frozen=True)
class UNetSpec:
    down_blocks: tuple[BlockSpec, ...]
    mid_block: BlockSpec | None
    up_blocks: tuple[BlockSpec, ...]
    channel_schedule: tuple[int, ...]
    context_dim: int
    num_heads: int
    scale: str
    in_channels: int = 4
    out_channels: int = 4

    @property
    def time_embed_dim(self) -> int:
        return 4 * self.channel_schedule[0]


def _fail(msg: str):
    raise SpecError(msg)


def validate_spec(spec: UNetSpec) -> None:
    """Structural validation, including symbolic skip-connection bookkeeping.

    Runs entirely on the spec; no weights exist yet.
    """
    if spec.scale not in SCALES:
        _fail(f"scale must be one of {SCALES}, got {spec.scale!r}")
    if spec.context_dim < 1 or spec.num_heads < 1:
        _fail("context_dim and num_heads must be positive")
    if spec.in_channels < 1 or spec.out_channels < 1:
        _fail("in/out channels must be positive")
    sched = spec.channel_schedule
    if not sched or any(c < 1 for c in sched):
        _fail(f"channel schedule must be non-empty positive, got {sched}")
    if any(c % spec.num_heads for c in sched):
        _fail(f"every schedule width must divide by num_heads={spec.num_heads}")
    n = len(sched)
    if len(spec.down_blocks) != n or len(spec.up_blocks) != n:
        _fail(
            f"need one down and one up block per schedule entry: "
            f"{len(spec.down_blocks)} down, {len(spec.up_blocks)} up, {n} widths"
        )

    for i, b in enumerate(spec.down_blocks):
        if b.kind not in DOWN_KINDS:
            _fail(f"down block {i} has kind {b.kind!r}")
        if b.rt_pairs < 1:
            _fail(f"down block {i} must keep at least one pair/resnet")
        expect_in = sched[i - 1] if i else sched[0]
        if b.in_channels != expect_in:
            _fail(f"down block {i} in_channels {b.in_channels} != {expect_in}")
        if b.out_channels != sched[i]:
            _fail(f"down block {i} out_channels {b.out_channels} != schedule {sched[i]}")
        if b.has_downsample != (i < n - 1):
            _fail(f"down block {i} downsample flag must be {i < n - 1}")
        if b.has_upsample:
            _fail(f"down block {i} cannot upsample")

    if spec.mid_block is not None:
        m = spec.mid_block
        if m.kind != MID_KIND:
            _fail(f"mid block kind {m.kind!r}")
        if m.rt_pairs != 1:
            _fail("mid block has a fixed resnet-transformer-resnet structure (rt_pairs must be 1)")
        if m.in_channels != sched[-1] or m.out_channels != sched[-1]:
            _fail(f"mid block channels must equal the deepest width {sched[-1]}")
        if m.has_downsample or m.has_upsample:
            _fail("mid block cannot resample")

    rev = tuple(reversed(sched))
    prev_out = sched[-1]
    for i, b in enumerate(spec.up_blocks):
        if b.kind not in UP_KINDS:
            _fail(f"up block {i} has kind {b.kind!r}")
        if b.rt_pairs < 1:
            _fail(f"up block {i} must keep at least one pair/resnet")
        if b.in_channels != prev_out:
            _fail(f"up block {i} in_channels {b.in_channels} != incoming {prev_out}")
        if b.out_channels != rev[i]:
            _fail(f"up block {i} out_channels {b.out_channels} != mirrored schedule {rev[i]}")
        if b.has_upsample != (i < n - 1):
            _fail(f"up block {i} upsample flag must be {i < n - 1}")
        if b.has_downsample:
            _fail(f"up block {i} cannot downsample")
        prev_out = b.out_channels

    # Symbolic skip stack: the down path pushes channel widths, the up path
    # pops them; every pop must match what the up resnet will concatenate.
    stack = [sched[0]]
    for b in spec.down_blocks:
        stack.extend([b.out_channels] * b.rt_pairs)
        if b.has_downsample:
            stack.append(b.out_channels)
    for i, b in enumerate(spec.up_blocks):
        res_skip_last = rev[min(i + 1, n - 1)]
        for j in range(b.rt_pairs):
            if not stack:
                _fail(f"up block {i} resnet {j} consumes a skip the down path never produced")
            got = stack.pop()
            want = res_skip_last if j == b.rt_pairs - 1 else b.out_channels
            if got != want:
                _fail(f"up block {i} resnet {j} expects a {want}-channel skip, down path provides {got}")
    if stack:
        _fail(f"{len(stack)} skip tensors left unconsumed by the up path")


def _chain(kinds, pairs, sched, down: bool):
    blocks = []
    n = len(sched)
    prev = sched[0] if down else sched[-1]
    widths = sched if down else tuple(reversed(sched))
    for i, (kind, rt) in enumerate(zip(kinds, pairs)):
        blocks.append(
            BlockSpec(
                kind=kind,
                rt_pairs=rt,
                in_channels=prev,
                out_channels=widths[i],
                has_downsample=down and i < n - 1,
                has_upsample=(not down) and i < n - 1,
            )
        )
        prev = widths[i]
    return tuple(blocks)


def original_spec(scale: str) -> UNetSpec:
    """The teacher-shaped layout: cross-attn stages plus one plain stage each way."""
    if scale not in SCALES:
        raise SpecError(f"scale must be one of {SCALES}, got {scale!r}")
    sched = FULL_CHANNELS if scale == "full" else TOY_CHANNELS
    ctx = FULL_CONTEXT if scale == "full" else TOY_CONTEXT
    heads = FULL_HEADS if scale == "full" else TOY_HEADS
    down = _chain(
        ("cross_attn_down", "cross_attn_down", "cross_attn_down", "down"),
        (DOWN_PAIRS,) * 4,
        sched,
        down=True,
    )
    up = _chain(
        ("up", "cross_attn_up", "cross_attn_up", "cross_attn_up"),
        (UP_PAIRS,) * 4,
        sched,
        down=False,
    )
    mid = BlockSpec(MID_KIND, 1, sched[-1], sched[-1])
    spec = UNetSpec(down, mid, up, sched, ctx, heads, scale)
    validate_spec(spec)
    return spec


def student_spec(orig: UNetSpec) -> UNetSpec:
    """Prune: one pair per cross-attn block, one resnet per plain block, no mid."""
    validate_spec(orig)
    if orig.mid_block is None:
        raise PruningError("layout has no mid block left to remove; already pruned")
    for label, blocks in ("down", orig.down_blocks), ("up", orig.up_blocks):
        for i, b in enumerate(blocks):
            if b.rt_pairs <= 1:
                raise PruningError(
                    f"{label} block {i} has a single pair/resnet; cannot remove the last one"
                )
    down = tuple(replace(b, rt_pairs=b.rt_pairs - 1) for b in orig.down_blocks)
    up = tuple(replace(b, rt_pairs=b.rt_pairs - 1) for b in orig.up_blocks)
    pruned = replace(orig, down_blocks=down, mid_block=None, up_blocks=up)
    validate_spec(pruned)
    return pruned
