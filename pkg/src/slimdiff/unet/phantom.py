"""Parameter census without allocating weights.

A phantom walks the same structural plan the real model is built from,
so its totals are exact for the materialized network by construction.
"""

import io
from dataclasses import dataclass

from .plan import ParamSpec, iter_param_specs
from .spec import UNetSpec


@dataclass(frozen=True)
class ParamCensus:
    total: int
    per_block: dict[str, int]
    entries: tuple[ParamSpec, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("name,shape,count\n")
        for e in self.entries:
            shape = "x".join(str(d) for d in e.shape)
            buf.write(f"{e.name},{shape},{e.count}\n")
        buf.write(f"total,,{self.total}\n")
        return buf.getvalue()


def count_params(spec: UNetSpec) -> ParamCensus:
    entries = tuple(iter_param_specs(spec))
    per_block: dict[str, int] = {}
    for e in entries:
        per_block[e.block] = per_block.get(e.block, 0) + e.count
    return ParamCensus(total=sum(per_block.values()), per_block=per_block, entries=entries)
