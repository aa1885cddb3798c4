"""Cost accounting and latency measurement.

Parameter counts come from the phantom census (no weights allocated), so
full-scale numbers are cheap. MAC accounting mirrors the forward pass
symbolically. Latency is wall-clock over end-to-end generations with
warmup exclusion, guarded by a lock file so two benchmarks cannot share
the host unnoticed.
"""

import json
import math
import os
import platform
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace

import torch

from .errors import UsageError
from .unet.phantom import ParamCensus, count_params
from .unet.plan import macs_walk
from .unet.spec import UNetSpec


@dataclass(frozen=True)
class MacsReport:
    total: int
    per_block: dict[str, int]
    input_shape: tuple[int, ...]
    context_length: int
    include_attention_matmuls: bool

    @property
    def gmacs(self) -> float:
        return self.total / 1e9


def count_macs(
    spec: UNetSpec,
    input_shape: tuple[int, int, int, int],
    context_length: int = 77,
    include_attention_matmuls: bool = False,
) -> MacsReport:
    per_block = macs_walk(
        spec,
        input_shape,
        context_length=context_length,
        include_attention_matmuls=include_attention_matmuls,
    )
    return MacsReport(
        total=sum(per_block.values()),
        per_block=per_block,
        input_shape=tuple(input_shape),
        context_length=context_length,
        include_attention_matmuls=include_attention_matmuls,
    )


@dataclass(frozen=True)
class ProfileReport:
    scale: str
    arch: str
    params_total: int
    params_per_block: dict[str, int]
    macs_total: int
    gmacs: float
    macs_per_block: dict[str, int]
    input_shape: tuple[int, ...]
    context_length: int
    # filled in by attach_latency once a benchmark has run
    latency_mean_s: float | None = None
    latency_std_s: float | None = None
    warmup_count: int | None = None
    measure_count: int | None = None
    device: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def attach_latency(report: ProfileReport, latency: "LatencyReport") -> ProfileReport:
    return replace(
        report,
        latency_mean_s=latency.mean_s,
        latency_std_s=latency.std_s,
        warmup_count=latency.warmup_count,
        measure_count=latency.measure_count,
        device=latency.device,
    )


def profile_spec(
    spec: UNetSpec,
    arch: str,
    input_shape: tuple[int, int, int, int] = (1, 4, 64, 64),
    context_length: int = 77,
) -> tuple[ProfileReport, ParamCensus]:
    census = count_params(spec)
    macs = count_macs(spec, input_shape, context_length=context_length)
    report = ProfileReport(
        scale=spec.scale,
        arch=arch,
        params_total=census.total,
        params_per_block=census.per_block,
        macs_total=macs.total,
        gmacs=macs.gmacs,
        macs_per_block=macs.per_block,
        input_shape=tuple(input_shape),
        context_length=context_length,
    )
    return report, census


def _device_descriptor(device: str) -> dict:
    return {
        "device": device,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
    }


@dataclass(frozen=True)
class LatencyReport:
    mean_s: float
    std_s: float
    times_s: tuple[float, ...]
    measure_count: int
    warmup_count: int
    device: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


DEFAULT_LOCK_PATH = os.path.join(tempfile.gettempdir(), "slimdiff-bench.lock")


def bench_inference(
    generate_fn,
    repeats: int = 10,
    warmup: int = 2,
    device: str = "cpu",
    lock_path: str = DEFAULT_LOCK_PATH,
) -> LatencyReport:
    """Time `generate_fn()` end to end: `warmup` unrecorded runs, then
    `repeats` measured ones. Refuses to start while another benchmark
    holds the lock file.
    """
    if repeats < 3:
        raise UsageError(f"repeats must be at least 3, got {repeats}")
    if warmup < 1:
        raise UsageError(f"warmup must be at least 1, got {warmup}")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(
            f"another benchmark appears to be running (lock file {lock_path} exists); "
            "remove it if that run is dead"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        for _ in range(warmup):
            generate_fn()
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            generate_fn()
            times.append(time.perf_counter() - start)
    finally:
        os.unlink(lock_path)
    mean = sum(times) / len(times)
    var = sum((t - mean) ** 2 for t in times) / len(times)
    return LatencyReport(
        mean_s=mean,
        std_s=math.sqrt(var),
        times_s=tuple(times),
        measure_count=len(times),
        warmup_count=warmup,
        device=_device_descriptor(device),
    )
