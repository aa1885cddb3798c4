"""UNetSpec persistence as TOML.

Only the free variables are stored: block kinds, pair counts, the channel
schedule, and the embedding dims. Per-block channels and resampling flags
are derivable, so they are reconstructed and re-validated on load rather
than trusted from the file.
"""

from pathlib import Path

import tomli

from .. import tomlout
from ..errors import FormatError
from .spec import MID_KIND, BlockSpec, UNetSpec, validate_spec

SCHEMA_VERSION = 1


def spec_to_dict(spec: UNetSpec) -> dict:
    validate_spec(spec)
    return {
        "schema_version": SCHEMA_VERSION,
        "unet": {
            "scale": spec.scale,
            "in_channels": spec.in_channels,
            "out_channels": spec.out_channels,
            "context_dim": spec.context_dim,
            "num_heads": spec.num_heads,
            "channel_schedule": list(spec.channel_schedule),
            "has_mid_block": spec.mid_block is not None,
            "down_kinds": [b.kind for b in spec.down_blocks],
            "down_rt_pairs": [b.rt_pairs for b in spec.down_blocks],
            "up_kinds": [b.kind for b in spec.up_blocks],
            "up_rt_pairs": [b.rt_pairs for b in spec.up_blocks],
        },
    }


_TOP_KEYS = {"schema_version", "unet"}
_UNET_KEYS = {
    "scale",
    "in_channels",
    "out_channels",
    "context_dim",
    "num_heads",
    "channel_schedule",
    "has_mid_block",
    "down_kinds",
    "down_rt_pairs",
    "up_kinds",
    "up_rt_pairs",
}


def _reject_unknown(present, allowed, where: str):
    unknown = sorted(set(present) - allowed)
    if unknown:
        raise FormatError(f"unknown {where} keys: {', '.join(unknown)}")


def spec_from_dict(data: dict) -> UNetSpec:
    if not isinstance(data, dict):
        raise FormatError("spec document must be a table")
    _reject_unknown(data, _TOP_KEYS, "top-level")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
    unet = data.get("unet")
    if not isinstance(unet, dict):
        raise FormatError("missing [unet] table")
    _reject_unknown(unet, _UNET_KEYS, "[unet]")
    missing = sorted(_UNET_KEYS - set(unet))
    if missing:
        raise FormatError(f"missing [unet] keys: {', '.join(missing)}")

    try:
        sched = tuple(int(c) for c in unet["channel_schedule"])
        down_kinds = list(unet["down_kinds"])
        down_rt = [int(x) for x in unet["down_rt_pairs"]]
        up_kinds = list(unet["up_kinds"])
        up_rt = [int(x) for x in unet["up_rt_pairs"]]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"malformed [unet] value: {exc}") from exc
    n = len(sched)
    if not (len(down_kinds) == len(down_rt) == len(up_kinds) == len(up_rt) == n):
        raise FormatError("kind/pair lists must match the channel schedule length")

    rev = tuple(reversed(sched))
    prev = sched[0] if sched else 0
    down = []
    for i in range(n):
        down.append(BlockSpec(down_kinds[i], down_rt[i], prev, sched[i], has_downsample=i < n - 1))
        prev = sched[i]
    prev = sched[-1] if sched else 0
    up = []
    for i in range(n):
        up.append(BlockSpec(up_kinds[i], up_rt[i], prev, rev[i], has_upsample=i < n - 1))
        prev = rev[i]
    mid = BlockSpec(MID_KIND, 1, sched[-1], sched[-1]) if (unet["has_mid_block"] and sched) else None
    spec = UNetSpec(
        down_blocks=tuple(down),
        mid_block=mid,
        up_blocks=tuple(up),
        channel_schedule=sched,
        context_dim=int(unet["context_dim"]),
        num_heads=int(unet["num_heads"]),
        scale=str(unet["scale"]),
        in_channels=int(unet["in_channels"]),
        out_channels=int(unet["out_channels"]),
    )
    validate_spec(spec)
    return spec


def save_spec(spec: UNetSpec, path) -> None:
    Path(path).write_text(tomlout.dumps(spec_to_dict(spec)), encoding="utf-8")


def load_spec(path) -> UNetSpec:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise FormatError(f"not valid TOML: {exc}") from exc
    return spec_from_dict(data)
