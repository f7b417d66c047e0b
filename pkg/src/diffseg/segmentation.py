"""Segmentation by differencing class-conditional noise predictions."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .diffusion import ClassLabel, DiffusionModel, forward_noise, predict_noise, to_model_space
from .errors import InputError, ModelError

DEFAULT_TIMESTEPS = tuple(range(60, 151, 10))


@dataclass
class DiffMap:
    values: np.ndarray  # (H, W), >= 0
    t: int


@dataclass
class BinaryMask:
    values: np.ndarray  # (H, W) uint8 in {0, 1}
    threshold: float


@dataclass
class MaskEnsemble:
    masks: list[BinaryMask]
    timesteps: list[int]
    image_id: str = ""

    def __post_init__(self):
        if len(self.masks) != len(self.timesteps):
            raise InputError("one timestep per mask is required")
        if any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise InputError(f"ensemble timesteps must be strictly increasing: {self.timesteps}")
        shapes = {m.values.shape for m in self.masks}
        if len(shapes) > 1:
            raise InputError(f"ensemble masks differ in shape: {shapes}")

    def __len__(self):
        return len(self.masks)

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in self.masks])


def timestep_rng(seed: int, t: int) -> np.random.Generator:
    """Noise substream for one ensemble member, keyed by (seed, timestep)."""
    return np.random.default_rng([int(seed), int(t)])


def noise_difference(model: DiffusionModel, image, t: int, rng, smooth_sigma: float = 0.0) -> DiffMap:
    """|eps(x_t, c0) - eps(x_t, c1)| averaged over channels, for one shared noisy x_t.

    ``image`` is (H, W, 3) in [0, 1]. Exactly one Gaussian draw is taken from ``rng``.
    """
    if not isinstance(model, DiffusionModel):
        raise ModelError("noise_difference needs a trained DiffusionModel")
    if not 1 <= t <= model.schedule.T:
        raise InputError(f"timestep {t} outside [1, {model.schedule.T}]")
    x0 = to_model_space(image)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, model.schedule, eps)
    pair = np.concatenate([x_t, x_t]).astype(model.nets[0].dtype)
    labels = np.array([ClassLabel.C0_HEALTHY, ClassLabel.C1_UNHEALTHY])
    pred = predict_noise(model, pair, labels, t)
    if not np.all(np.isfinite(pred)):
        raise ModelError("model produced non-finite noise predictions")
    d = np.abs(pred[0].astype(np.float64) - pred[1].astype(np.float64)).mean(axis=0)
    if smooth_sigma > 0:
        d = ndimage.gaussian_filter(d, smooth_sigma, mode="nearest")
    return DiffMap(d, int(t))


def _normalize(v: np.ndarray) -> np.ndarray | None:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return None
    return (v - lo) / (hi - lo)


def resolve_threshold(values: np.ndarray, delta) -> float:
    """Threshold for a delta policy: a number, ``"otsu"``, or ``"q<fraction>"`` (quantile)."""
    if isinstance(delta, str):
        if delta == "otsu":
            return float(threshold_otsu(values, nbins=256))
        if delta.startswith("q"):
            q = float(delta[1:])
            if not 0.0 <= q <= 1.0:
                raise InputError(f"quantile must lie in [0, 1], got {q}")
            # an order statistic, so thresholding commutes with monotone rescaling
            return float(np.quantile(values, q, method="inverted_cdf"))
        try:
            delta = float(delta)
        except ValueError:
            raise InputError(f"unknown delta policy {delta!r}") from None
    return float(delta)


def binarize(d: DiffMap | np.ndarray, delta=0.5, normalize: bool = True) -> BinaryMask:
    """Pixel -> 1 iff its (optionally min-max normalised) value is >= the threshold."""
    v = np.asarray(d.values if isinstance(d, DiffMap) else d, dtype=np.float64)
    if normalize:
        if not isinstance(delta, str) and not 0.0 <= float(delta) <= 1.0:
            raise InputError(f"delta must lie in [0, 1] with normalisation on, got {delta}")
        nv = _normalize(v)
        if nv is None:
            warnings.warn("constant difference map; returning an all-zero mask", RuntimeWarning)
            return BinaryMask(np.zeros(v.shape, np.uint8), float("nan"))
        v = nv
    thr = resolve_threshold(v, delta)
    return BinaryMask((v >= thr).astype(np.uint8), thr)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DIFFSEG_THREADS", "1")))
    except ValueError:
        return 1


def generate_ensemble(
    model: DiffusionModel,
    image,
    timesteps=DEFAULT_TIMESTEPS,
    delta=0.5,
    seed: int = 0,
    smooth_sigma: float = 0.0,
    image_id: str = "",
) -> tuple[MaskEnsemble, list[DiffMap]]:
    """One mask per timestep, each from its own noise substream."""
    timesteps = [int(t) for t in timesteps]
    if not timesteps:
        raise InputError("timestep list is empty")
    if len(set(timesteps)) != len(timesteps):
        raise InputError(f"duplicate timesteps in {timesteps}")
    T = model.schedule.T
    bad = [t for t in timesteps if not 1 <= t <= T]
    if bad:
        raise InputError(f"timesteps {bad} outside the schedule range [1, {T}]")
    timesteps = sorted(timesteps)

    def member(t):
        return noise_difference(model, image, t, timestep_rng(seed, t), smooth_sigma)

    workers = min(_workers(), len(timesteps))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            diffs = list(ex.map(member, timesteps))
    else:
        diffs = [member(t) for t in timesteps]
    masks = [binarize(d, delta) for d in diffs]
    return MaskEnsemble(masks, timesteps, image_id), diffs
