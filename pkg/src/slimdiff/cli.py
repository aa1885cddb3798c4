"""Command-line entrypoint.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
mistake (argparse shares 2). Experiment configs are TOML with a schema
version and strict unknown-key rejection; machine-readable outputs are
JSON. KDC_RUN_DIR overrides the configured run directory.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .dataset import scan_tree
from .errors import ConfigurationError, SlimdiffError
from .metrics import EvalConfig, evaluate_run
from .profiler import profile_spec
from .replay import buffer_histogram_csv, load_buffer
from .trainer import (
    TrainConfig,
    config_from_dict,
    generate,
    load_checkpoint,
    save_image_png,
    student_from_checkpoint,
    train_baseline,
    train_continual,
)
from .unet.model import materialize
from .unet.spec import original_spec, student_spec
from .unet.transfer import transfer_weights

EXPERIMENT_SCHEMA_VERSION = 1
TRAIN_MODES = ("full", "no_kd", "no_replay", "neither")


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "toy"
    arch: str = "student"
    init_seed: int = 0
    teacher_ckpt: str | None = None
    transfer: bool = True

    def __post_init__(self):
        if self.scale not in ("toy", "full"):
            raise ConfigurationError(f"model.scale must be toy or full, got {self.scale!r}")
        if self.arch not in ("student", "original"):
            raise ConfigurationError(f"model.arch must be student or original, got {self.arch!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data_root: str
    train: TrainConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid TOML: {exc}") from None

    version = data.pop("schema_version", None)
    if version != EXPERIMENT_SCHEMA_VERSION:
        raise ConfigurationError(
            f"experiment schema version {version!r} unsupported (expected {EXPERIMENT_SCHEMA_VERSION})"
        )
    unknown = set(data) - {"data_root", "train", "model", "eval"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {', '.join(sorted(unknown))}")
    if "data_root" not in data:
        raise ConfigurationError("config is missing data_root")
    if "train" not in data:
        raise ConfigurationError("config is missing the [train] table")

    train = config_from_dict({"schema_version": 1, **data["train"]})
    try:
        model = ModelConfig(**data.get("model", {}))
        eval_cfg = EvalConfig(**data.get("eval", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad config table: {exc}") from None
    return ExperimentConfig(data_root=data["data_root"], train=train, model=model, eval=eval_cfg)


def _build_models(model_cfg: ModelConfig, mode: str):
    """(teacher or None, trainee) for the requested mode."""
    needs_kd = mode in ("full", "no_replay")
    if model_cfg.arch == "original":
        if needs_kd:
            raise ConfigurationError(
                "arch=original trains the unpruned network; distillation modes need arch=student"
            )
        return None, materialize(original_spec(model_cfg.scale), seed=model_cfg.init_seed)

    if model_cfg.teacher_ckpt is not None:
        teacher = student_from_checkpoint(load_checkpoint(model_cfg.teacher_ckpt))
    else:
        teacher = materialize(original_spec(model_cfg.scale), seed=model_cfg.init_seed)
    student = materialize(student_spec(teacher.spec), seed=model_cfg.init_seed)
    if model_cfg.transfer:
        transfer_weights(teacher, student)
    return (teacher if needs_kd else None), student


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    manifest = scan_tree(args.root)
    text = manifest.to_json()
    Path(args.out).write_text(text + "\n")
    print(f"wrote {args.out}: {len(manifest.classes)} classes")
    return 0


def cmd_train(args) -> int:
    exp = load_experiment_config(args.config)
    train_cfg = exp.train
    env_dir = os.environ.get("KDC_RUN_DIR")
    if env_dir:
        train_cfg = replace(train_cfg, run_dir=env_dir)
    teacher, student = _build_models(exp.model, args.mode)
    if args.mode == "full":
        result = train_continual(train_cfg, teacher, student, exp.data_root, resume=args.resume)
    else:
        result = train_baseline(
            train_cfg, student, exp.data_root, args.mode, teacher=teacher, resume=args.resume
        )
    print(f"run {result.run_dir}: {result.global_step} steps, "
          f"{len(result.checkpoint_paths)} checkpoints")
    return 0


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def cmd_profile(args) -> int:
    spec = original_spec(args.scale)
    if args.arch == "student":
        spec = student_spec(spec)
    h, w = args.input
    report, _ = profile_spec(
        spec, arch=args.arch, input_shape=(1, spec.in_channels, h, w),
        context_length=args.context_length,
    )
    print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    report = evaluate_run(args.real, args.gen, EvalConfig())
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"fid={report.fid:.6g} kid={report.kid_mean:.6g}+/-{report.kid_std:.6g} "
          f"clip={report.clip_score:.6g} lpips={report.lpips:.6g}")
    return 0


def cmd_generate(args) -> int:
    payload = load_checkpoint(args.ckpt)
    student = student_from_checkpoint(payload)
    student.eval()
    cfg = config_from_dict(payload["config"])
    from .core.codec import make_codec
    from .core.conditioning import build_conditioning
    from .core.scheduler import make_scheduler

    table = build_conditioning(
        payload["vocab"], embed_dim=student.spec.context_dim, seed=cfg.cond_seed
    )
    image = generate(
        student,
        table,
        args.prompt,
        steps=args.steps,
        seed=args.seed,
        scheduler=make_scheduler(cfg.scheduler),
        codec=make_codec(cfg.codec),
        latent_hw=tuple(payload["latent_hw"]),
    )
    save_image_png(image, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_buffer_inspect(args) -> int:
    buffer = load_buffer(args.buffer)
    print(f"capacity={buffer.capacity} policy={buffer.policy} held={len(buffer)} "
          f"seen={buffer.total_seen}")
    print(buffer_histogram_csv(buffer), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimdiff",
        description="Compress a latent diffusion U-Net and train it class by class with replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a folder-per-class tree and write a manifest")
    p.add_argument("root")
    p.add_argument("--out", default="manifest.json")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="run continual training or a baseline mode")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=TRAIN_MODES, default="full")
    p.add_argument("--resume", default=None, metavar="CKPT")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("profile", help="parameter and MACs report for an architecture")
    p.add_argument("--arch", choices=("original", "student"), required=True)
    p.add_argument("--scale", choices=("full", "toy"), default="full")
    p.add_argument("--input", type=_parse_hw, default=(64, 64), metavar="HxW",
                   help="latent spatial size (default 64x64)")
    p.add_argument("--context-length", type=int, default=77)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("eval", help="compute metrics between two image directories")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", default="report.json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="sample one image from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", default="sample.png")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("buffer-inspect", help="summarize a serialized replay buffer")
    p.add_argument("--buffer", required=True)
    p.set_defaults(fn=cmd_buffer_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SlimdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
