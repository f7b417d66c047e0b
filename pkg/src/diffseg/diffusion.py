"""Noise schedule, closed-form forward noising, training and conditional noise prediction."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, InputError, ModelError
from .nn import AdamState, Architecture, DenoiserNet, adam_step, load_model, noise_loss, save_model

log = logging.getLogger(__name__)


class ClassLabel(IntEnum):
    C0_HEALTHY = 0
    C1_UNHEALTHY = 1


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphabars: np.ndarray

    def alphabar(self, t) -> np.ndarray | float:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InputError(f"timestep out of range [1, {self.T}]: {t}")
        out = self.alphabars[t - 1]
        return float(out) if out.ndim == 0 else out


def build_schedule(T: int = 150, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp with alphabar as the running product of (1 - beta)."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    return NoiseSchedule(T, betas, np.cumprod(1.0 - betas))


def forward_noise(x0, t: int, schedule: NoiseSchedule, eps) -> np.ndarray:
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise InputError(f"noise shape {eps.shape} differs from image shape {x0.shape}")
    ab = schedule.alphabar(t)
    if np.ndim(ab):
        ab = np.asarray(ab).reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def to_model_space(images) -> np.ndarray:
    """(B, H, W, C) or (H, W, C) images in [0, 1] -> NCHW in [-1, 1]."""
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2) * 2.0 - 1.0)


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 8
    epochs: int = 30
    lr: float = 5e-4
    T: int = 150
    beta_start: float = 1e-4
    beta_end: float = 0.02
    conditioning: str = "embedding"
    loss: str = "l2"
    seed: int = 0
    channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    emb_dim: int = 64
    augment: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        for name in ("image_size", "batch_size", "lr", "T"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.conditioning not in ("embedding", "dual-model"):
            raise ConfigError(f"train.conditioning must be embedding or dual-model, got {self.conditioning!r}")
        if self.loss not in ("l2", "l1"):
            raise ConfigError(f"train.loss must be l2 or l1, got {self.loss!r}")

    def architecture(self) -> Architecture:
        return Architecture(
            channels=self.channels, blocks_per_level=self.blocks_per_level, emb_dim=self.emb_dim
        )

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class DiffusionModel:
    """One conditional net (embedding mode) or one net per class (dual-model mode)."""

    nets: list[DenoiserNet]
    conditioning: str
    schedule: NoiseSchedule
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        want = 1 if self.conditioning == "embedding" else 2
        if self.conditioning not in ("embedding", "dual-model") or len(self.nets) != want:
            raise ConfigError(
                f"{self.conditioning} conditioning needs {want} net(s), got {len(self.nets)}"
            )

    def save(self, path) -> None:
        meta = {
            **self.meta,
            "conditioning": self.conditioning,
            "T": self.schedule.T,
            "beta_start": float(self.schedule.betas[0]),
            "beta_end": float(self.schedule.betas[-1]),
        }
        save_model(path, self.nets, meta)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        nets, meta = load_model(path)
        try:
            schedule = build_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
            return cls(nets, meta["conditioning"], schedule, meta)
        except (KeyError, ConfigError) as exc:
            raise ModelError(f"model file {path} lacks a usable schedule/conditioning: {exc}") from exc


def predict_noise(model: DiffusionModel, x_t, c, t, schedule: NoiseSchedule | None = None):
    """Predicted noise for class(es) ``c`` at timestep(s) ``t``; NCHW in, NCHW out."""
    schedule = schedule or model.schedule
    x_t = np.asarray(x_t)
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (x_t.shape[0],))
    if np.any((labels != 0) & (labels != 1)):
        raise ConfigError(f"class label must be c0 or c1, got {labels}")
    ab = np.broadcast_to(np.asarray(schedule.alphabar(t), dtype=np.float64), (x_t.shape[0],))
    if model.conditioning == "embedding":
        return model.nets[0].forward(x_t, labels, ab)
    out = np.empty(x_t.shape, dtype=model.nets[0].dtype)
    for cls in (0, 1):
        sel = labels == cls
        if sel.any():
            # per-class nets ignore the label embedding; feed a fixed row
            out[sel] = model.nets[cls].forward(x_t[sel], 0, ab[sel])
    return out


def loss_and_grads(net: DenoiserNet, batch, labels, schedule: NoiseSchedule, rng, norm="l2"):
    """Sample t ~ U{1..T} and eps ~ N(0, I) per image, return (loss, grads)."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise InputError("batch must be a non-empty (B, C, H, W) array")
    labels = np.asarray(labels)
    if labels.shape != (batch.shape[0],):
        raise InputError(f"{len(labels)} labels for a batch of {batch.shape[0]}")
    t = rng.integers(1, schedule.T + 1, size=batch.shape[0])
    eps = rng.standard_normal(batch.shape)
    x_t = forward_noise(batch, t, schedule, eps)
    return noise_loss(net, x_t, labels, schedule.alphabar(t), eps, norm)


def train(
    samples,
    cfg: TrainConfig,
    checkpoint_dir=None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[DiffusionModel, list[float]]:
    """Train on a pool of labelled samples (see ``data.training_pool``).

    Returns the model and the per-epoch mean loss curve.
    """
    from .data import AugmentConfig, augment

    samples = list(samples)
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    present = set(labels.tolist())
    if cfg.conditioning == "embedding" and present != {0, 1}:
        raise ConfigError(f"embedding conditioning needs both classes in the data, found {sorted(present)}")
    if cfg.conditioning == "dual-model" and cfg.epochs > 0 and present != {0, 1}:
        raise ConfigError("dual-model conditioning needs samples of both classes")
    for s in samples:
        if s.image.shape[:2] != (cfg.image_size, cfg.image_size):
            raise ConfigError(f"sample {s.id} has size {s.image.shape[:2]}, config says {cfg.image_size}")

    rng = np.random.default_rng(cfg.seed)
    arch = cfg.architecture()
    n_nets = 1 if cfg.conditioning == "embedding" else 2
    nets = [DenoiserNet.init(arch, seed=cfg.seed * 1000 + i) for i in range(n_nets)]
    states = [AdamState(lr=cfg.lr) for _ in nets]
    schedule = cfg.schedule()
    aug = AugmentConfig() if cfg.augment else AugmentConfig(0.0, 0.0, 0.0)
    model = DiffusionModel(nets, cfg.conditioning, schedule, {"train": _jsonable(asdict(cfg))})
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    curve: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for k in range(n_nets):
            idx = order if n_nets == 1 else order[labels[order] == k]
            for start in range(0, len(idx), cfg.batch_size):
                chunk = idx[start : start + cfg.batch_size]
                imgs = [augment(samples[i], rng, aug).image for i in chunk]
                x0 = to_model_space(np.stack(imgs)).astype(np.float32)
                lab = labels[chunk] if n_nets == 1 else np.zeros(len(chunk), np.int64)
                loss, grads = loss_and_grads(nets[k], x0, lab, schedule, rng, cfg.loss)
                adam_step(nets[k], grads, states[k])
                losses.append(loss)
        curve.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.5f", epoch, cfg.epochs, curve[-1])
        if progress:
            progress(epoch, curve[-1])
        if ckdir and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            model.save(ckdir / f"epoch_{epoch:04d}.dseg")
    return model, curve


def write_loss_curve(path, curve: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve, 1):
            w.writerow([i, repr(float(v))])


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
