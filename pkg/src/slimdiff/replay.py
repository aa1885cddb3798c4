"""Fixed-capacity latent replay buffer with class-balanced reservoir sampling.

Ingestion is a pure function: it returns a new buffer and never mutates its
input, so concurrent readers of the old buffer stay valid. All randomness
flows through the seed argument.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import FormatError, UsageError, ValidationError
from .floatstore import Slot, read_store, write_store

POLICIES = ("balanced_reservoir", "uniform_reservoir")


@dataclass(frozen=True)
class ReplaySample:
    latent: torch.Tensor  # [C, H, W] float32
    cond_id: int
    source_class: int
    insertion_step: int = 0

    def __post_init__(self):
        if self.latent.ndim != 3:
            raise ValidationError(f"replay latent must be [C,H,W], got {tuple(self.latent.shape)}")
        if not torch.isfinite(self.latent).all():
            raise ValidationError("replay latent contains non-finite values")
        if self.source_class < 0:
            raise ValidationError("source_class must be a valid vocabulary index")


@dataclass(frozen=True)
class ReplayBuffer:
    capacity: int
    policy: str = "balanced_reservoir"
    slots: tuple[ReplaySample, ...] = ()
    ingested_classes: tuple[int, ...] = ()  # ingestion order, drives quota remainders
    total_seen: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise UsageError("capacity must be non-negative (0 disables the buffer)")
        if self.policy not in POLICIES:
            raise UsageError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if len(self.slots) > self.capacity:
            raise ValidationError(f"{len(self.slots)} slots exceed capacity {self.capacity}")

    def __len__(self) -> int:
        return len(self.slots)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.slots:
            counts[s.source_class] = counts.get(s.source_class, 0) + 1
        return counts


def class_quotas(capacity: int, ingested_classes: tuple[int, ...]) -> dict[int, int]:
    """floor(capacity/k) per class, remainder to the earliest-ingested ones."""
    k = len(ingested_classes)
    if k == 0:
        return {}
    base, rem = divmod(capacity, k)
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(ingested_classes)}


def _reservoir(samples: list[ReplaySample], quota: int, rng: np.random.Generator) -> list[ReplaySample]:
    kept: list[ReplaySample] = []
    for i, s in enumerate(samples):
        if i < quota:
            kept.append(s)
        else:
            j = int(rng.integers(0, i + 1))
            if j < quota:
                kept[j] = s
    return kept


def _evict_to(samples: list[ReplaySample], quota: int, rng: np.random.Generator) -> list[ReplaySample]:
    if len(samples) <= quota:
        return list(samples)
    drop = set(rng.choice(len(samples), size=len(samples) - quota, replace=False).tolist())
    return [s for i, s in enumerate(samples) if i not in drop]


def ingest_class(buffer: ReplayBuffer, class_data, seed: int) -> ReplayBuffer:
    class_data = list(class_data)
    if not class_data:
        raise UsageError("cannot ingest an empty class")
    classes = {s.source_class for s in class_data}
    if len(classes) != 1:
        raise UsageError(f"class_data mixes source classes {sorted(classes)}")
    new_class = classes.pop()
    if new_class in buffer.ingested_classes:
        raise UsageError(f"class {new_class} was already ingested")

    stamped = [replace(s, insertion_step=i) for i, s in enumerate(class_data)]
    rng = np.random.default_rng(seed)
    order = buffer.ingested_classes + (new_class,)
    total_seen = buffer.total_seen + len(stamped)

    if buffer.capacity == 0:
        return replace(buffer, slots=(), ingested_classes=order, total_seen=total_seen)

    if buffer.policy == "balanced_reservoir":
        quotas = class_quotas(buffer.capacity, order)
        by_class: dict[int, list[ReplaySample]] = {c: [] for c in buffer.ingested_classes}
        for s in buffer.slots:
            by_class[s.source_class].append(s)
        new_slots: list[ReplaySample] = []
        for c in buffer.ingested_classes:
            new_slots.extend(_evict_to(by_class[c], quotas[c], rng))
        new_slots.extend(_reservoir(stamped, quotas[new_class], rng))
        return replace(
            buffer, slots=tuple(new_slots), ingested_classes=order, total_seen=total_seen
        )

    # uniform_reservoir: one reservoir over every sample ever offered
    kept = list(buffer.slots)
    seen = buffer.total_seen
    for s in stamped:
        if len(kept) < buffer.capacity:
            kept.append(s)
        else:
            j = int(rng.integers(0, seen + 1))
            if j < buffer.capacity:
                kept[j] = s
        seen += 1
    return replace(buffer, slots=tuple(kept), ingested_classes=order, total_seen=total_seen)


def compose_training_set(current, buffer: ReplayBuffer, seed: int) -> list[ReplaySample]:
    """Current-class data plus the whole buffer, in a seeded shuffle."""
    merged = list(current) + list(buffer.slots)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(merged))
    return [merged[i] for i in perm]


def save_buffer(buffer: ReplayBuffer, path) -> None:
    extra = {
        "kind": "replay_buffer",
        "capacity": buffer.capacity,
        "policy": buffer.policy,
        "ingested_classes": list(buffer.ingested_classes),
        "total_seen": buffer.total_seen,
    }
    slots = [
        Slot(
            {"cond_id": s.cond_id, "source_class": s.source_class, "insertion_step": s.insertion_step},
            s.latent.detach().cpu().numpy(),
        )
        for s in buffer.slots
    ]
    write_store(path, extra, slots)


def load_buffer(path) -> ReplayBuffer:
    extra, slots = read_store(path)
    if extra.get("kind") != "replay_buffer":
        raise FormatError(f"{path}: container kind {extra.get('kind')!r} is not a replay buffer")
    samples = tuple(
        ReplaySample(
            latent=torch.from_numpy(s.array),
            cond_id=int(s.meta["cond_id"]),
            source_class=int(s.meta["source_class"]),
            insertion_step=int(s.meta["insertion_step"]),
        )
        for s in slots
    )
    return ReplayBuffer(
        capacity=int(extra["capacity"]),
        policy=str(extra["policy"]),
        slots=samples,
        ingested_classes=tuple(int(c) for c in extra["ingested_classes"]),
        total_seen=int(extra["total_seen"]),
    )


def buffer_histogram_csv(buffer: ReplayBuffer) -> str:
    lines = ["source_class,count"]
    for c in sorted(buffer.class_counts()):
        lines.append(f"{c},{buffer.class_counts()[c]}")
    return "\n".join(lines) + "\n"
