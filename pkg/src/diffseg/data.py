"""Synthetic dermoscopy-like samples, healthy counterfactuals, augmentation and on-disk layout."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffusion import ClassLabel
from .errors import DataError
from .pngio import read_mask_png, read_rgb_png, write_mask_png, write_rgb_png

SPLITS = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    size: int = 64
    lesion_count: tuple[int, int] = (1, 1)
    # semi-major axis in pixels, minor/major ratio, radial boundary wobble
    radius: tuple[float, float] = (9.0, 20.0)
    aspect: tuple[float, float] = (0.6, 1.0)
    boundary_amplitude: float = 0.12
    skin_color: tuple[float, float, float] = (0.86, 0.68, 0.58)
    skin_jitter: float = 0.05
    lesion_color: tuple[float, float, float] = (0.45, 0.27, 0.18)
    lesion_jitter: float = 0.08
    texture: float = 0.02
    hair_rate: float = 0.3
    bubble_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.lesion_count = tuple(int(v) for v in self.lesion_count)
        self.radius = tuple(float(v) for v in self.radius)
        self.aspect = tuple(float(v) for v in self.aspect)
        if self.size < 4:
            raise DataError(f"image size must be >= 4, got {self.size}")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise DataError(f"bad lesion count range {self.lesion_count}")
        if self.radius[0] <= 0 or self.radius[1] < self.radius[0]:
            raise DataError(f"bad radius range {self.radius}")
        if not 0 < self.aspect[0] <= self.aspect[1] <= 1:
            raise DataError(f"aspect range must lie in (0, 1], got {self.aspect}")
        for name in ("hair_rate", "bubble_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if 2 * self.radius[1] * (1 + self.boundary_amplitude) >= self.size:
            raise DataError(
                f"lesion of radius up to {self.radius[1]} does not fit a {self.size}px image"
            )


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: ClassLabel
    id: str = ""
    meta: dict = field(default_factory=dict)


def _smooth_field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _lesion_mask(rng, spec: SyntheticSpec, yy, xx):
    size = spec.size
    a = rng.uniform(*spec.radius)
    b = a * rng.uniform(*spec.aspect)
    reach = a * (1 + spec.boundary_amplitude)
    cy, cx = rng.uniform(reach, size - reach, size=2)
    phi = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    theta = np.arctan2(v / b, u / a)
    wobble = np.zeros_like(theta)
    if spec.boundary_amplitude > 0:
        ks = np.arange(2, 6)
        coef = rng.normal(size=(len(ks), 2)) / ks[:, None]
        coef *= spec.boundary_amplitude / np.abs(coef).sum()
        for k, (c, s) in zip(ks, coef):
            wobble += c * np.cos(k * theta) + s * np.sin(k * theta)
    edge = 1.0 + wobble
    return rho <= edge, rho / edge


def _draw_hair(rng, img, size):
    p0, p1, p2 = rng.uniform(-0.1 * size, 1.1 * size, size=(3, 2))
    tt = np.linspace(0, 1, 4 * size)[:, None]
    pts = (1 - tt) ** 2 * p0 + 2 * (1 - tt) * tt * p1 + tt**2 * p2
    canvas = np.zeros((size, size))
    ij = np.round(pts).astype(int)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < size) & (ij[:, 1] >= 0) & (ij[:, 1] < size)
    canvas[ij[ok, 0], ij[ok, 1]] = 1.0
    alpha = np.clip(ndimage.gaussian_filter(canvas, 0.5) * 2.5, 0, 1)[..., None]
    color = np.array([0.2, 0.14, 0.1]) * rng.uniform(0.6, 1.2)
    return img * (1 - alpha) + color * alpha


def _draw_bubble(rng, img, yy, xx, size):
    r = rng.uniform(2.0, 0.08 * size + 2.0)
    cy, cx = rng.uniform(0, size, size=2)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    rim = np.exp(-((d - r) ** 2) / 0.8)
    inside = (d < r) * 0.12
    alpha = np.clip(rim * 0.6 + inside, 0, 1)[..., None]
    return img * (1 - alpha) + 1.0 * alpha


def render_sample(spec: SyntheticSpec, index: int) -> Sample:
    """Render sample ``index``; the per-sample RNG substream makes this order-independent."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)

    skin = np.clip(np.array(spec.skin_color) + rng.normal(0, spec.skin_jitter, 3), 0.05, 0.98)
    shade = 1.0 + 0.04 * _smooth_field(rng, size, size / 6)
    img = skin[None, None, :] * shade[..., None]
    img = img + spec.texture * rng.standard_normal((size, size, 3))

    mask = np.zeros((size, size), dtype=bool)
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n):
        region, rho = _lesion_mask(rng, spec, yy, xx)
        # mostly brightness variation, a little hue
        base = np.array(spec.lesion_color) * rng.uniform(0.6, 1.3)
        base = np.clip(base + rng.normal(0, spec.lesion_jitter / 3, 3), 0.02, 0.9)
        # darker core, lighter rim; never reaches skin tone inside the region
        tone = base[None, None, :] * (0.85 + 0.25 * np.clip(rho, 0, 1))[..., None]
        tone = tone + spec.texture * rng.standard_normal((size, size, 3))
        img = np.where(region[..., None], tone, img)
        mask |= region

    if rng.random() < spec.hair_rate:
        for _ in range(int(rng.integers(1, 4))):
            img = _draw_hair(rng, img, size)
    if rng.random() < spec.bubble_rate:
        for _ in range(int(rng.integers(1, 3))):
            img = _draw_bubble(rng, img, yy, xx, size)

    label = ClassLabel.C1_UNHEALTHY if mask.any() else ClassLabel.C0_HEALTHY
    return Sample(np.clip(img, 0.0, 1.0), mask.astype(np.uint8), label, id=f"{index:04d}")


def synthesize(spec: SyntheticSpec, count: int, start: int = 0) -> list[Sample]:
    if count < 1:
        raise DataError("count must be >= 1")
    return [render_sample(spec, start + i) for i in range(count)]


def healthy_counterfactual(s: Sample, blend_sigma: float = 3.0) -> Sample:
    """Inpaint the lesion from surrounding skin and relabel the sample healthy.

    Lesion pixels take the colour of their nearest non-lesion neighbour, are
    Gaussian-smoothed, and get skin-like texture re-added so the patch is not
    conspicuously flat.
    """
    mask = np.asarray(s.mask).astype(bool)
    img = np.asarray(s.image, dtype=float)
    if mask.all():
        raise DataError("mask covers the entire image; nothing to inpaint from")
    if not mask.any():
        return Sample(img.copy(), np.zeros_like(s.mask), ClassLabel.C0_HEALTHY, s.id, dict(s.meta))

    _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
    filled = img[iy, ix]
    smooth = np.stack(
        [ndimage.gaussian_filter(filled[..., c], blend_sigma, mode="nearest") for c in range(3)],
        axis=-1,
    )
    # texture level from the skin's own high-pass residual
    resid = img - np.stack(
        [ndimage.gaussian_filter(img[..., c], 1.0, mode="nearest") for c in range(3)], axis=-1
    )
    # robust (MAD) scale; 0.87 undoes the attenuation of white noise by the sigma=1 high-pass
    r = resid[~mask]
    texture = 1.4826 * np.median(np.abs(r - np.median(r, axis=0)), axis=0) / 0.87
    seed = zlib.crc32(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    noise = np.random.default_rng(seed).standard_normal(img.shape) * texture
    grown = ndimage.binary_dilation(mask, iterations=1)
    alpha = np.clip(ndimage.gaussian_filter(grown.astype(float), 1.0), 0, 1)
    alpha = np.where(mask, 1.0, alpha)[..., None]
    patch = smooth + noise
    out = np.clip(img * (1 - alpha) + patch * alpha, 0.0, 1.0)
    return Sample(out, np.zeros_like(s.mask), ClassLabel.C0_HEALTHY, s.id + "h", dict(s.meta))


@dataclass
class AugmentConfig:
    p_blur: float = 0.3
    p_rotate: float = 0.3
    p_sharpen: float = 0.3
    right_angles: bool = True
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    sharpen_amount: tuple[float, float] = (0.5, 1.0)


def _per_channel(img, fn):
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def augment(s: Sample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Sample:
    """Random blur / rotation / sharpening. Rotation moves image and mask together."""
    cfg = cfg or AugmentConfig()
    img = np.asarray(s.image, dtype=float)
    mask = np.asarray(s.mask)
    # fixed draw count per call keeps the RNG stream aligned whatever fires
    u = rng.random(3)
    blur_sigma = rng.uniform(*cfg.blur_sigma)
    k = int(rng.integers(1, 4))
    angle = rng.uniform(0, 360)
    amount = rng.uniform(*cfg.sharpen_amount)

    if u[0] < cfg.p_blur:
        img = _per_channel(img, lambda c: ndimage.gaussian_filter(c, blur_sigma, mode="reflect"))
    if u[1] < cfg.p_rotate:
        if cfg.right_angles:
            img = np.rot90(img, k, axes=(0, 1))
            mask = np.rot90(mask, k, axes=(0, 1))
        else:
            img = _per_channel(
                img, lambda c: ndimage.rotate(c, angle, reshape=False, order=1, mode="reflect")
            )
            mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant")
    if u[2] < cfg.p_sharpen:
        blurred = _per_channel(img, lambda c: ndimage.gaussian_filter(c, 1.0, mode="reflect"))
        img = img + amount * (img - blurred)
    return Sample(
        np.ascontiguousarray(np.clip(img, 0.0, 1.0)),
        np.ascontiguousarray(mask),
        s.label,
        s.id,
        dict(s.meta),
    )


# ---------------------------------------------------------------------------
# dataset layout: root/{split}/{images,masks}/NNNN.png + root/labels.csv
# ---------------------------------------------------------------------------


def write_dataset(root, splits: dict[str, list[Sample]]) -> Path:
    root = Path(root)
    rows = []
    for split, samples in splits.items():
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_rgb_png(root / split / "images" / f"{s.id}.png", s.image)
            write_mask_png(root / split / "masks" / f"{s.id}.png", s.mask)
            rows.append((s.id, int(s.label), split))
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "split"])
        w.writerows(rows)
    return root


def read_dataset(root, split: str) -> list[Sample]:
    root = Path(root)
    table = root / "labels.csv"
    if not table.is_file():
        raise DataError(f"labels.csv not found under {root}")
    out = []
    with open(table, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            sid = row["id"]
            img = read_rgb_png(root / split / "images" / f"{sid}.png")
            mpath = root / split / "masks" / f"{sid}.png"
            mask = read_mask_png(mpath) if mpath.is_file() else np.zeros(img.shape[:2], np.uint8)
            out.append(Sample(img, mask, ClassLabel(int(row["label"])), sid))
    return out


def training_pool(samples: list[Sample]) -> list[Sample]:
    """Diseased samples plus their healthy counterfactuals; healthy samples pass through."""
    pool = []
    for s in samples:
        pool.append(s)
        if s.label == ClassLabel.C1_UNHEALTHY and s.mask.any():
            pool.append(healthy_counterfactual(s))
    return pool
