"""Generation-quality metrics over image directories.

All statistics run in float64. The feature space comes from a pluggable
extractor (see extractors.py); with the default random-conv stand-in the
absolute values mean nothing outside this package, so every report names
its extractor. The matrix square root inside the Frechet distance goes
through an eigendecomposition of the symmetrized product, with the
documented clamp policy for slightly negative eigenvalues.
"""

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core.conditioning import build_conditioning
from .errors import DatasetError, DimensionError, NumericalError, UsageError, ValidationError
from .floatstore import Slot, read_store, write_store

_EIG_TOL = 1e-6  # relative to the largest eigenvalue


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # [D] float64
    cov: np.ndarray  # [D,D] float64
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"stats shapes inconsistent: mean {mean.shape}, cov {cov.shape}"
            )
        if self.n < 2:
            raise ValidationError(f"need at least 2 samples for covariance, got {self.n}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise ValidationError("non-finite values in feature statistics")
        asym = np.abs(cov - cov.T).max() if cov.size else 0.0
        if asym > 1e-8:
            raise ValidationError(f"covariance asymmetric beyond tolerance ({asym:.3e})")
        if np.diag(cov).min() < -1e-12:
            raise ValidationError("negative variance on the covariance diagonal")


def compute_stats(features) -> FeatureStats:
    x = np.asarray(
        features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else features,
        dtype=np.float64,
    )
    if x.ndim != 2:
        raise DimensionError(f"features must be [N,D], got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean=mean, cov=cov, n=n)


def _psd_clamp(eigvals: np.ndarray, context: str) -> np.ndarray:
    peak = float(eigvals.max(initial=0.0))
    floor = -_EIG_TOL * max(peak, 1e-300)
    worst = float(eigvals.min(initial=0.0))
    if worst < floor:
        raise NumericalError(
            f"{context}: eigenvalue {worst:.6e} below tolerance {floor:.6e}; "
            "covariances are too ill-conditioned for a trustworthy square root"
        )
    return np.clip(eigvals, 0.0, None)


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    """Frechet distance between two Gaussians summarized by their stats."""
    if real.mean.shape != gen.mean.shape:
        raise DimensionError(
            f"feature dims differ: {real.mean.shape[0]} vs {gen.mean.shape[0]}"
        )
    diff = real.mean - gen.mean
    s1, s2 = real.cov, gen.cov

    vals1, vecs1 = np.linalg.eigh(s1)
    vals1 = _psd_clamp(vals1, "real covariance")
    root1 = (vecs1 * np.sqrt(vals1)) @ vecs1.T

    inner = root1 @ s2 @ root1
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    vals = _psd_clamp(vals, "product covariance")
    trace_sqrt = float(np.sqrt(vals).sum())

    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * trace_sqrt)
    if not math.isfinite(value):
        raise NumericalError(f"Frechet distance is non-finite ({value})")
    return value


def _kid_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    n, m = x.shape[0], y.shape[0]
    kxx = _kid_kernel(x, x)
    kyy = _kid_kernel(y, y)
    kxy = _kid_kernel(x, y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


def kid(
    real_features,
    gen_features,
    subsets: int = 10,
    subset_size: int | None = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Unbiased MMD^2 with the cubic kernel, averaged over random subsets.

    Returns (mean, population std) over the subset estimates.
    """
    x = np.asarray(
        real_features.detach().cpu().numpy() if isinstance(real_features, torch.Tensor) else real_features,
        dtype=np.float64,
    )
    y = np.asarray(
        gen_features.detach().cpu().numpy() if isinstance(gen_features, torch.Tensor) else gen_features,
        dtype=np.float64,
    )
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"feature arrays must be [N,D]/[M,D], got {x.shape} and {y.shape}")
    if subsets < 1:
        raise UsageError(f"need at least one subset, got {subsets}")
    b = min(x.shape[0], y.shape[0], 100) if subset_size is None else subset_size
    if b < 2 or x.shape[0] < b or y.shape[0] < b:
        raise UsageError(
            f"subset size {b} needs at least {max(b, 2)} samples per side "
            f"(have {x.shape[0]} and {y.shape[0]})"
        )
    rng = np.random.default_rng(seed)
    estimates = []
    for _ in range(subsets):
        xs = x[rng.choice(x.shape[0], size=b, replace=False)]
        ys = y[rng.choice(y.shape[0], size=b, replace=False)]
        estimates.append(_mmd2_unbiased(xs, ys))
    est = np.asarray(estimates)
    return float(est.mean()), float(est.std(ddof=0))


def clip_score(image_embeds, text_embeds, w: float = 100.0) -> float:
    a = torch.as_tensor(image_embeds, dtype=torch.float64)
    b = torch.as_tensor(text_embeds, dtype=torch.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValidationError("zero-norm embedding row; cosine undefined")
    cos = (a * b).sum(dim=1) / (na * nb)
    return float((w * cos.clamp(min=0.0)).mean())


def lpips_distance(img_a: torch.Tensor, img_b: torch.Tensor, extractor, layer_weights=None) -> float:
    """Perceptual-family distance under the stand-in extractor.

    Unit-normalizes each layer's channel vectors, then averages the
    squared gap over space, batch, and weighted layers. Not a calibrated
    LPIPS; comparable only against itself.
    """
    if img_a.shape != img_b.shape:
        raise DimensionError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    layers_a = extractor.extract_layers(img_a)
    layers_b = extractor.extract_layers(img_b)
    if layer_weights is None:
        layer_weights = [1.0] * len(layers_a)
    if len(layer_weights) != len(layers_a):
        raise DimensionError(
            f"{len(layer_weights)} layer weights for {len(layers_a)} layers"
        )
    total = 0.0
    for weight, fa, fb in zip(layer_weights, layers_a, layers_b):
        ua = fa / torch.clamp(fa.norm(dim=1, keepdim=True), min=1e-10)
        ub = fb / torch.clamp(fb.norm(dim=1, keepdim=True), min=1e-10)
        gap = ((ua - ub) ** 2).sum(dim=1)  # [N,H,W]
        total += weight * float(gap.mean())
    return total


# ---------------------------------------------------------------------------
# directory-level evaluation


@dataclass(frozen=True)
class EvalConfig:
    extractor_seed: int = 0
    feature_dim: int = 32
    kid_subsets: int = 10
    kid_subset_size: int | None = None
    kid_seed: int = 0
    clip_w: float = 100.0
    clip_text: str = "a photo"
    clip_embed_dim: int = 32
    clip_seed: int = 0
    min_count: int = 2
    cache_dir: str | None = None


@dataclass(frozen=True)
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    clip_score: float
    lpips: float
    extractor: str
    real_count: int
    gen_count: int
    lpips_pairs: int
    clip_text: str
    seeds: dict = field(default_factory=dict)
    note: str = (
        "stand-in extractor; values comparable only within this extractor family"
    )

    def __post_init__(self):
        for name in ("fid", "kid_mean", "kid_std", "clip_score", "lpips"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} is non-finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        return MetricReport(**json.loads(text))


def load_image_dir(path, min_count: int = 1) -> tuple[torch.Tensor, list[str]]:
    """All readable PNGs under `path`, sorted by name, as [N,3,H,W] in [0,1]."""
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    arrays, names = [], []
    for file in files:
        try:
            with Image.open(file) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {file.name}: {exc}", stacklevel=2)
            continue
        arrays.append(torch.from_numpy(rgb).permute(2, 0, 1))
        names.append(file.name)
    if len(arrays) < min_count:
        raise DatasetError(
            f"{root} holds {len(arrays)} readable PNGs; at least {min_count} required"
        )
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) > 1:
        raise DatasetError(f"{root} mixes image shapes: {sorted(shapes)}")
    return torch.stack(arrays), names


def _content_hash(root: Path, names: list[str]) -> str:
    digest = hashlib.sha256()
    for name in names:
        digest.update(name.encode())
        digest.update((root / name).read_bytes())
    return digest.hexdigest()[:16]


def _features_with_cache(images: torch.Tensor, names: list[str], root: Path, extractor, cache_dir):
    if cache_dir is None:
        return extractor.extract(images)
    cache_root = Path(cache_dir)
    cache_root.mkdir(parents=True, exist_ok=True)
    key = _content_hash(root, names)
    cache_path = cache_root / f"{extractor.name}_{key}.slf"
    if cache_path.exists():
        _, slots = read_store(cache_path)
        return torch.from_numpy(slots[0].array.copy())
    feats = extractor.extract(images)
    write_store(
        cache_path,
        {"kind": "feature_cache", "extractor": extractor.name, "content": key},
        [Slot(meta={"count": len(names)}, array=feats.numpy())],
    )
    return feats


def evaluate_run(real_dir, gen_dir, cfg: EvalConfig = EvalConfig()) -> MetricReport:
    from .extractors import RandomConvExtractor

    extractor = RandomConvExtractor(feature_dim=cfg.feature_dim, seed=cfg.extractor_seed)
    real_images, real_names = load_image_dir(real_dir, cfg.min_count)
    gen_images, gen_names = load_image_dir(gen_dir, cfg.min_count)

    real_feats = _features_with_cache(real_images, real_names, Path(real_dir), extractor, cfg.cache_dir)
    gen_feats = _features_with_cache(gen_images, gen_names, Path(gen_dir), extractor, cfg.cache_dir)

    fid_value = fid(compute_stats(real_feats), compute_stats(gen_feats))
    kid_mean, kid_std = kid(
        real_feats, gen_feats, subsets=cfg.kid_subsets, subset_size=cfg.kid_subset_size, seed=cfg.kid_seed
    )

    table = build_conditioning(
        [cfg.clip_text], embed_dim=cfg.clip_embed_dim, seed=cfg.clip_seed, prompt_template="{class}"
    )
    text_row = table.pooled(torch.zeros(gen_feats.shape[0], dtype=torch.long))
    proj_gen = torch.Generator().manual_seed(
        int.from_bytes(hashlib.sha256(f"clip-proj\x1f{cfg.clip_seed}".encode()).digest()[:8], "little")
    )
    proj = torch.randn(cfg.clip_embed_dim, gen_feats.shape[1], generator=proj_gen, dtype=torch.float32)
    image_embeds = gen_feats @ proj.t()
    clip_value = clip_score(image_embeds.double(), text_row.double(), w=cfg.clip_w)

    pair_count = min(real_images.shape[0], gen_images.shape[0])
    lpips_value = lpips_distance(
        real_images[:pair_count], gen_images[:pair_count], extractor
    )

    return MetricReport(
        fid=fid_value,
        kid_mean=kid_mean,
        kid_std=kid_std,
        clip_score=clip_value,
        lpips=lpips_value,
        extractor=extractor.name,
        real_count=real_images.shape[0],
        gen_count=gen_images.shape[0],
        lpips_pairs=pair_count,
        clip_text=cfg.clip_text,
        seeds={
            "extractor": cfg.extractor_seed,
            "kid": cfg.kid_seed,
            "clip": cfg.clip_seed,
        },
    )
