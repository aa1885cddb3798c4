"""Procedural bar-image dataset for desk-scale experiments.

Two classes: a bright horizontal band or a bright vertical band on a
dark background, 16x16 by default. The band axis survives the codec's
8x pooling (a horizontal band varies the pooled rows, a vertical band
the pooled columns), so the classes stay distinguishable in latent
space, which is what the continual-learning experiments need.
"""

import hashlib
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

SHAPE_CLASSES = ("horizontal", "vertical")


def _rng(seed: int, class_name: str, index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"shapes\x1f{seed}\x1f{class_name}\x1f{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def bar_image(rng: np.random.Generator, hw: int, vertical: bool) -> np.ndarray:
    """One [hw, hw, 3] uint8 sample: a tinted band over a noisy dark field."""
    bg = rng.uniform(0.02, 0.12)
    fg = rng.uniform(0.7, 1.0)
    tint = rng.uniform(0.75, 1.0, size=3)
    thickness = int(rng.integers(3, 7))
    start = int(rng.integers(0, hw - thickness + 1))
    img = np.full((hw, hw, 3), bg, dtype=np.float64)
    img += rng.normal(0.0, 0.015, size=img.shape)
    if vertical:
        img[:, start : start + thickness, :] = fg * tint
    else:
        img[start : start + thickness, :, :] = fg * tint
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def write_shape_dataset(
    root,
    count_per_class: int = 256,
    hw: int = 16,
    seed: int = 0,
    classes: tuple[str, ...] = SHAPE_CLASSES,
) -> dict[str, int]:
    """Folder-per-class PNG tree under `root`; returns per-class counts."""
    from PIL import Image

    if count_per_class < 1 or hw < 8:
        raise ConfigurationError("need count_per_class >= 1 and hw >= 8")
    unknown = set(classes) - set(SHAPE_CLASSES)
    if unknown:
        raise ConfigurationError(f"unknown shape classes: {sorted(unknown)}")
    root = Path(root)
    counts = {}
    for name in classes:
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count_per_class):
            arr = bar_image(_rng(seed, name, i), hw, vertical=name == "vertical")
            Image.fromarray(arr).save(class_dir / f"{i:04d}.png")
        counts[name] = count_per_class
    return counts
