from .spec import (
    BlockSpec,
    UNetSpec,
    original_spec,
    student_spec,
    validate_spec,
    FULL_CHANNELS,
    TOY_CHANNELS,
)
from .plan import ParamSpec, iter_param_specs, macs_walk
from .phantom import ParamCensus, count_params

__all__ = [
    "BlockSpec",
    "UNetSpec",
    "original_spec",
    "student_spec",
    "validate_spec",
    "FULL_CHANNELS",
    "TOY_CHANNELS",
    "ParamSpec",
    "iter_param_specs",
    "macs_walk",
    "ParamCensus",
    "count_params",
]
