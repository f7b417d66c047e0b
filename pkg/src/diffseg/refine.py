"""Multi-output refinement: random member subsets, per-member CRF, two-stage averaging."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .densecrf import LESION, CrfParams, mean_field_fast, mean_field_naive, unary_from_diffmap
from .errors import ConfigError, InputError
from .pngio import write_mask_png
from .segmentation import BinaryMask, DiffMap, MaskEnsemble

CRF_METHODS = ("fast", "naive")


@dataclass
class RefineConfig:
    K: int = 3
    m: int = 4
    threshold: float = 0.5
    final_threshold: float = 0.5
    seed: int = 0
    method: str = "fast"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("refine.K must be >= 1")
        if self.m < 1:
            raise ConfigError("refine.m must be >= 1")
        for name in ("threshold", "final_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"refine.{name} must lie in [0, 1]")
        if self.method not in CRF_METHODS:
            raise ConfigError(f"refine.method must be one of {CRF_METHODS}, got {self.method!r}")


@dataclass
class RefineResult:
    final: BinaryMask
    iterations: list[BinaryMask]
    subsets: list[list[int]]  # indices into the ensemble, per iteration
    timesteps: list[list[int]]
    soft: list[np.ndarray] = field(repr=False, default_factory=list)

    def manifest(self, cfg: RefineConfig, crf: CrfParams) -> dict:
        return {
            "seed": cfg.seed,
            "refine": asdict(cfg),
            "crf": asdict(crf),
            "subsets": self.subsets,
            "subset_timesteps": self.timesteps,
            "iteration_threshold": cfg.threshold,
            "final_threshold": cfg.final_threshold,
        }

    def save(self, out_dir, cfg: RefineConfig, crf: CrfParams) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"final": "final.png"}
        write_mask_png(out / "final.png", self.final.values)
        for k, mask in enumerate(self.iterations, start=1):
            write_mask_png(out / f"iter_{k}.png", mask.values)
            files[f"iter_{k}"] = f"iter_{k}.png"
        doc = self.manifest(cfg, crf) | {"files": files}
        (out / "refine.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        return doc


def majority_binarize(soft, threshold: float = 0.5) -> BinaryMask:
    """Pixel -> 1 iff soft >= threshold."""
    s = np.asarray(soft, dtype=np.float64)
    if s.size and (s.min() < 0.0 or s.max() > 1.0):
        raise InputError("soft map must lie in [0, 1]")
    return BinaryMask((s >= threshold).astype(np.uint8), float(threshold))


def refine_ensemble(
    Y: MaskEnsemble,
    image,
    diffmaps: list[DiffMap],
    crf: CrfParams | None = None,
    cfg: RefineConfig | None = None,
) -> RefineResult:
    """K rounds: draw m members, CRF each member's unary, average Q(lesion), binarize; then vote."""
    crf = crf or CrfParams()
    cfg = cfg or RefineConfig()
    n = len(Y)
    if len(diffmaps) != n:
        raise InputError(f"{n} masks but {len(diffmaps)} difference maps")
    if cfg.m > n:
        raise ConfigError(f"refine.m = {cfg.m} exceeds the ensemble size {n}")
    if [d.t for d in diffmaps] != list(Y.timesteps):
        raise InputError("difference maps do not line up with the ensemble timesteps")
    solve = mean_field_fast if cfg.method == "fast" else mean_field_naive

    # a member's refinement does not depend on the round it is drawn in
    cache: dict[int, np.ndarray] = {}
    iters, subsets, soft_maps = [], [], []
    for k in range(cfg.K):
        rng = np.random.default_rng([int(cfg.seed), k])
        pick = sorted(int(i) for i in rng.choice(n, size=cfg.m, replace=False))
        for i in pick:
            if i not in cache:
                cache[i] = solve(unary_from_diffmap(diffmaps[i]), image, crf)[..., LESION]
        soft = np.mean([cache[i] for i in pick], axis=0)
        iters.append(majority_binarize(np.clip(soft, 0.0, 1.0), cfg.threshold))
        subsets.append(pick)
        soft_maps.append(soft)
    vote = np.mean([m.values for m in iters], axis=0)
    final = majority_binarize(vote, cfg.final_threshold)
    steps = [[int(Y.timesteps[i]) for i in p] for p in subsets]
    return RefineResult(final, iters, subsets, steps, soft_maps)
