"""Class-sequential training loop with replay, checkpointing, and sampling.

Every stochastic choice is drawn from a generator seeded by
sha256(stream tag, position), with separate streams for data order,
noise, buffer ingestion, and sampling. Changing what one stream is used
for never shifts another, which is what makes run pairs comparable and
resume exact. No call here touches global RNG state.
"""

import hashlib
import json
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core.batch import LatentBatch
from .core.codec import CodecConfig, decode_latent, encode_latent, make_codec
from .core.conditioning import ConditioningTable, build_conditioning
from .core.scheduler import Scheduler, SchedulerConfig, add_noise, ddim_step, make_scheduler
from .distill import DistillConfig, LossBreakdown, distill_step, make_readout
from .errors import ConfigurationError, DatasetError, UsageError, ValidationError
from .metrics import EvalConfig, evaluate_run, load_image_dir
from .replay import ReplayBuffer, ReplaySample, compose_training_set, ingest_class, load_buffer, save_buffer
from .tomlout import dumps as toml_dumps
from .unet.spec_io import spec_from_dict, spec_to_dict

BASELINE_MODES = ("no_kd", "no_replay", "neither")
CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    class_order: tuple[str, ...]
    epochs_per_class: int
    batch_size: int
    learning_rate: float = 5e-5
    grad_accum: int = 1
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    buffer_capacity: int = 64
    precision: str = "full"
    run_dir: str = "runs/exp"
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    # class-boundary evaluation: eval_samples generated per seen class, 0 skips
    eval_samples: int = 0
    eval_steps: int = 8
    # conditioning embeddings are data-like: fixed across runs by default so
    # a pretrained teacher stays usable under different run seeds
    cond_seed: int = 0
    # per-stream overrides; None derives the stream from `seed`
    data_seed: int | None = None
    noise_seed: int | None = None
    buffer_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "class_order", tuple(self.class_order))
        if not self.class_order:
            raise ConfigurationError("class_order must be non-empty")
        if len(set(self.class_order)) != len(self.class_order):
            raise ConfigurationError("class_order contains duplicates")
        for name in ("epochs_per_class", "batch_size", "grad_accum"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.buffer_capacity < 0:
            raise ConfigurationError("buffer_capacity must be non-negative")
        if self.precision not in ("full", "mixed"):
            raise ConfigurationError(f"precision must be full or mixed, got {self.precision!r}")
        if self.eval_samples != 0 and self.eval_samples < 2:
            raise ConfigurationError("eval_samples must be 0 (off) or at least 2")
        if not 1 <= self.eval_steps <= self.scheduler.num_timesteps:
            raise ConfigurationError(
                f"eval_steps must lie in [1, {self.scheduler.num_timesteps}]"
            )


def config_to_dict(cfg: TrainConfig) -> dict:
    from dataclasses import asdict

    out = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "class_order": list(cfg.class_order),
        "epochs_per_class": cfg.epochs_per_class,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "grad_accum": cfg.grad_accum,
        "seed": cfg.seed,
        "buffer_capacity": cfg.buffer_capacity,
        "precision": cfg.precision,
        "run_dir": cfg.run_dir,
        "eval_samples": cfg.eval_samples,
        "eval_steps": cfg.eval_steps,
        "cond_seed": cfg.cond_seed,
        "distill": asdict(cfg.distill),
        "scheduler": asdict(cfg.scheduler),
        "codec": asdict(cfg.codec),
    }
    for name in ("data_seed", "noise_seed", "buffer_seed"):
        value = getattr(cfg, name)
        if value is not None:
            out[name] = value
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    version = data.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(
            f"config schema version {version!r} unsupported (expected {CONFIG_SCHEMA_VERSION})"
        )
    known = set(config_to_dict(TrainConfig(class_order=("x",), epochs_per_class=1, batch_size=1)))
    known.discard("schema_version")
    known.update({"data_seed", "noise_seed", "buffer_seed"})
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for sub, cls in (("distill", DistillConfig), ("scheduler", SchedulerConfig), ("codec", CodecConfig)):
        if sub in data:
            if not isinstance(data[sub], dict):
                raise ConfigurationError(f"{sub} must be a table")
            data[sub] = cls(**data[sub])
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad config: {exc}") from None


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(toml_dumps(config_to_dict(cfg)).encode()).hexdigest()


def stream_seed(cfg: TrainConfig, stream: str, *parts) -> int:
    """64-bit seed for one position of one RNG stream."""
    base = {
        "data": cfg.data_seed,
        "noise": cfg.noise_seed,
        "buffer": cfg.buffer_seed,
    }.get(stream)
    if base is None:
        base = cfg.seed
    text = "\x1f".join([str(base), stream, *[str(p) for p in parts]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def weight_digest(model: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_class_latents(data_root, class_name: str, class_idx: int, codec) -> list[ReplaySample]:
    images, _ = load_image_dir(Path(data_root) / class_name, min_count=1)
    z = encode_latent(codec, images)
    return [
        ReplaySample(latent=z[i].clone(), cond_id=class_idx, source_class=class_idx)
        for i in range(z.shape[0])
    ]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path,
    cfg: TrainConfig,
    student,
    optimizer,
    class_index: int,
    global_step: int,
    buffer_sha: str,
    latent_hw: tuple[int, int],
) -> None:
    payload = {
        "schema_version": 1,
        "config_digest": config_digest(cfg),
        "config": config_to_dict(cfg),
        "student_spec": spec_to_dict(student.spec),
        "vocab": list(cfg.class_order),
        "latent_hw": tuple(latent_hw),
        "student_state": student.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "next_class_index": class_index + 1,
        "global_step": global_step,
        "buffer_file": "buffer.bin",
        "buffer_sha256": buffer_sha,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("schema_version") != 1:
        raise ConfigurationError(f"{path} is not a recognized checkpoint")
    return payload


def student_from_checkpoint(payload: dict):
    from .unet.model import materialize

    spec = spec_from_dict(payload["student_spec"])
    student = materialize(spec, seed=payload["config"]["seed"])
    student.load_state_dict(payload["student_state"])
    return student


# ---------------------------------------------------------------------------
# the loop


@dataclass(frozen=True)
class RunResult:
    run_dir: str
    global_step: int
    classes_trained: tuple[str, ...]
    losses_path: str
    checkpoint_paths: tuple[str, ...]
    metric_paths: tuple[str, ...]
    buffer_path: str
    teacher_digest: str | None


def train_continual(cfg: TrainConfig, teacher, student, data_root, resume=None) -> RunResult:
    if teacher is None:
        raise ConfigurationError("train_continual requires a teacher; use train_baseline otherwise")
    return _train(cfg, student, data_root, teacher=teacher, use_kd=True, use_replay=True, resume=resume)


def train_baseline(cfg: TrainConfig, student, data_root, mode: str, teacher=None, resume=None) -> RunResult:
    if mode not in BASELINE_MODES:
        raise UsageError(f"mode must be one of {BASELINE_MODES}, got {mode!r}")
    use_kd = mode == "no_replay"
    use_replay = mode == "no_kd"
    if use_kd and teacher is None:
        raise ConfigurationError("mode no_replay keeps distillation and needs a teacher")
    return _train(
        cfg,
        student,
        data_root,
        teacher=teacher if use_kd else None,
        use_kd=use_kd,
        use_replay=use_replay,
        resume=resume,
    )


def _plain_step(student, batch: LatentBatch, eps, gamma: float, scheduler, context, loss_scale):
    x_t = add_noise(scheduler, batch, eps, batch.timestep).data
    pred = student(x_t, batch.timestep, context)
    l_mse = F.mse_loss(pred, eps)
    total = gamma * l_mse
    (loss_scale * total).backward()
    return LossBreakdown(0.0, 0.0, 0.0, float(l_mse.detach()), float(total.detach()))


def _train(cfg: TrainConfig, student, data_root, teacher, use_kd: bool, use_replay: bool, resume) -> RunResult:
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "metrics").mkdir(exist_ok=True)
    (run_dir / "samples").mkdir(exist_ok=True)

    snapshot = toml_dumps(config_to_dict(cfg))
    config_path = run_dir / "config.toml"
    if config_path.exists():
        if config_path.read_text() != snapshot:
            raise ConfigurationError(
                f"{config_path} was written by a different config; refusing to mix runs"
            )
    else:
        config_path.write_text(snapshot)

    data_root = Path(data_root)
    for name in cfg.class_order:
        if not (data_root / name).is_dir():
            raise DatasetError(f"missing class folder {name!r} under {data_root}")

    scheduler = make_scheduler(cfg.scheduler)
    codec = make_codec(cfg.codec)
    table = build_conditioning(
        list(cfg.class_order), embed_dim=student.spec.context_dim, seed=cfg.cond_seed
    )
    num_classes = len(cfg.class_order)
    readout = None
    teacher_digest_start = None
    if use_kd:
        # the soft/hard terms discriminate between classes, so a one-class
        # vocabulary has nothing for them to match
        if num_classes < 2:
            raise ConfigurationError("distillation needs at least 2 classes in class_order")
        if num_classes != cfg.codec.latent_channels:
            readout = make_readout(cfg.codec.latent_channels, num_classes, seed=cfg.seed)
        if teacher.spec.context_dim != student.spec.context_dim:
            raise ConfigurationError(
                f"teacher context dim {teacher.spec.context_dim} != student {student.spec.context_dim}"
            )
        teacher.eval()
        teacher_digest_start = weight_digest(teacher)

    optimizer = torch.optim.AdamW(
        student.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=0.01
    )

    buffer = ReplayBuffer(capacity=cfg.buffer_capacity if use_replay else 0)
    start_class = 0
    global_step = 0
    log_mode = "w"
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["config_digest"] != config_digest(cfg):
            raise ConfigurationError("checkpoint was produced by a different config")
        student.load_state_dict(payload["student_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_class = payload["next_class_index"]
        global_step = payload["global_step"]
        buffer_path = run_dir / payload["buffer_file"]
        if not buffer_path.is_file():
            raise ConfigurationError(f"checkpoint references missing buffer file {buffer_path}")
        if _file_sha(buffer_path) != payload["buffer_sha256"]:
            raise ConfigurationError(f"{buffer_path} does not match the checkpointed buffer hash")
        buffer = load_buffer(buffer_path)
        log_mode = "a"

    autocast = (
        torch.autocast(device_type="cpu", dtype=torch.bfloat16)
        if cfg.precision == "mixed"
        else nullcontext()
    )

    checkpoint_paths: list[str] = []
    metric_paths: list[str] = []
    losses_path = run_dir / "losses.jsonl"
    loss_keys = ("l_soft", "l_hard", "l_feature", "l_mse", "total")

    with losses_path.open(log_mode) as log:
        for k in range(start_class, num_classes):
            name = cfg.class_order[k]
            current = load_class_latents(data_root, name, k, codec)
            train_set = compose_training_set(current, buffer, seed=stream_seed(cfg, "data", k))
            n = len(train_set)
            steps = (n // cfg.batch_size) // cfg.grad_accum
            if steps < 1:
                raise UsageError(
                    f"class {name!r}: {n} samples give zero optimizer steps at "
                    f"batch_size {cfg.batch_size} x grad_accum {cfg.grad_accum}"
                )
            latents = torch.stack([s.latent for s in train_set])
            cond = torch.tensor([s.cond_id for s in train_set], dtype=torch.long)

            for epoch in range(cfg.epochs_per_class):
                perm = np.random.default_rng(stream_seed(cfg, "data", k, epoch)).permutation(n)
                perm_t = torch.from_numpy(perm)
                for step in range(steps):
                    optimizer.zero_grad(set_to_none=True)
                    acc = dict.fromkeys(loss_keys, 0.0)
                    for micro in range(cfg.grad_accum):
                        lo = (step * cfg.grad_accum + micro) * cfg.batch_size
                        idx = perm_t[lo : lo + cfg.batch_size]
                        gen = torch.Generator().manual_seed(
                            stream_seed(cfg, "noise", k, epoch, step, micro)
                        )
                        t = torch.randint(
                            0, scheduler.num_timesteps, (len(idx),), generator=gen
                        )
                        eps = torch.randn(latents[idx].shape, generator=gen)
                        batch = LatentBatch(latents[idx], cond[idx], t)
                        context = table.rows(cond[idx])
                        with autocast:
                            if use_kd:
                                breakdown, _ = distill_step(
                                    teacher,
                                    student,
                                    batch,
                                    eps,
                                    cfg.distill,
                                    scheduler,
                                    context,
                                    num_classes,
                                    readout=readout,
                                    loss_scale=1.0 / cfg.grad_accum,
                                )
                            else:
                                breakdown = _plain_step(
                                    student,
                                    batch,
                                    eps,
                                    cfg.distill.gamma,
                                    scheduler,
                                    context,
                                    1.0 / cfg.grad_accum,
                                )
                        for key, value in breakdown.as_dict().items():
                            acc[key] += value / cfg.grad_accum
                    optimizer.step()
                    global_step += 1
                    record = {"step": global_step, "class_index": k, "class": name, "epoch": epoch}
                    record.update({key: acc[key] for key in loss_keys})
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()

            buffer = ingest_class(buffer, current, seed=stream_seed(cfg, "buffer", k))
            save_buffer(buffer, run_dir / "buffer.bin")
            ckpt_path = run_dir / "checkpoints" / f"class_{k}.ckpt"
            save_checkpoint(
                ckpt_path, cfg, student, optimizer, k, global_step,
                _file_sha(run_dir / "buffer.bin"), tuple(latents.shape[2:]),
            )
            checkpoint_paths.append(str(ckpt_path))
            if cfg.eval_samples:
                metric_paths.append(
                    _boundary_metrics(
                        cfg, student, table, scheduler, codec, data_root, run_dir, k,
                        latent_hw=tuple(latents.shape[2:]),
                    )
                )

    if use_kd and weight_digest(teacher) != teacher_digest_start:
        raise ValidationError("teacher weights changed during training; optimizer isolation broken")

    return RunResult(
        run_dir=str(run_dir),
        global_step=global_step,
        classes_trained=tuple(cfg.class_order[start_class:]),
        losses_path=str(losses_path),
        checkpoint_paths=tuple(checkpoint_paths),
        metric_paths=tuple(metric_paths),
        buffer_path=str(run_dir / "buffer.bin"),
        teacher_digest=teacher_digest_start,
    )


# ---------------------------------------------------------------------------
# sampling and held-out evaluation


def generate(
    student,
    table: ConditioningTable,
    prompt: str,
    steps: int,
    seed: int,
    scheduler: Scheduler | None = None,
    codec=None,
    latent_hw: tuple[int, int] | None = None,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic conditional sample, returned as an image [1,3,H,W] in [0,1]."""
    scheduler = scheduler if scheduler is not None else make_scheduler()
    codec = codec if codec is not None else make_codec(CodecConfig())
    idx = table.index(prompt)
    if not 1 <= steps <= scheduler.num_timesteps:
        raise UsageError(f"steps must lie in [1, {scheduler.num_timesteps}], got {steps}")
    if x_init is None:
        if latent_hw is None:
            raise UsageError("latent_hw is required when x_init is not given")
        gen = torch.Generator().manual_seed(
            int.from_bytes(hashlib.sha256(f"generate\x1f{seed}".encode()).digest()[:8], "little")
        )
        x = torch.randn(1, codec.cfg.latent_channels, *latent_hw, generator=gen)
    else:
        x = x_init.clone()
    context = table.rows(torch.tensor([idx]))
    taus = torch.linspace(scheduler.num_timesteps - 1, 0, steps).round().long()
    with torch.no_grad():
        for i in range(len(taus)):
            t = taus[i].view(1)
            ab_t = scheduler.alpha_bars[taus[i]]
            ab_prev = (
                scheduler.alpha_bars[taus[i + 1]] if i + 1 < len(taus) else torch.tensor(1.0)
            )
            eps = student(x, t, context)
            x = ddim_step(x, eps, ab_t, ab_prev)
    return decode_latent(codec, x).clamp(0.0, 1.0)


def save_image_png(image: torch.Tensor, path) -> None:
    from PIL import Image

    if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise ValidationError(f"expected [1,3,H,W] image, got {tuple(image.shape)}")
    arr = (image[0].permute(1, 2, 0).clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _boundary_metrics(cfg, student, table, scheduler, codec, data_root, run_dir, k, latent_hw) -> str:
    student.eval()
    results = {}
    try:
        for j in range(k + 1):
            cname = cfg.class_order[j]
            gen_dir = run_dir / "samples" / f"class_{k}" / cname
            gen_dir.mkdir(parents=True, exist_ok=True)
            for i in range(cfg.eval_samples):
                image = generate(
                    student,
                    table,
                    cname,
                    steps=cfg.eval_steps,
                    seed=stream_seed(cfg, "sample", k, j, i),
                    scheduler=scheduler,
                    codec=codec,
                    latent_hw=latent_hw,
                )
                save_image_png(image, gen_dir / f"{i:04d}.png")
            report = evaluate_run(Path(data_root) / cname, gen_dir, EvalConfig())
            results[cname] = json.loads(report.to_json())
    finally:
        student.train()
    path = run_dir / "metrics" / f"class_{k}.json"
    path.write_text(json.dumps({"class_index": k, "per_class": results}, indent=2, sort_keys=True))
    return str(path)


def heldout_denoise_mse(
    student,
    samples: list[ReplaySample],
    table: ConditioningTable,
    scheduler: Scheduler,
    seed: int,
    batch_size: int = 16,
) -> float:
    """Mean eps-prediction MSE over a fixed seeded corruption of `samples`."""
    if not samples:
        raise UsageError("need at least one held-out sample")
    student.eval()
    total = 0.0
    count = 0
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            x0 = torch.stack([s.latent for s in chunk])
            cond = torch.tensor([s.cond_id for s in chunk], dtype=torch.long)
            gen = torch.Generator().manual_seed(
                int.from_bytes(
                    hashlib.sha256(f"heldout\x1f{seed}\x1f{lo}".encode()).digest()[:8], "little"
                )
            )
            t = torch.randint(0, scheduler.num_timesteps, (len(chunk),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            x_t = add_noise(scheduler, LatentBatch(x0, cond, t), eps, t).data
            pred = student(x_t, t, table.rows(cond))
            total += float(((pred - eps) ** 2).sum())
            count += eps.numel()
    student.train()
    return total / count
