"""Stage runners shared by the CLI and the end-to-end reproduction run."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig
from .data import Sample, read_dataset, synthesize, training_pool, write_dataset
from .diffusion import DiffusionModel, train, write_loss_curve
from .errors import InputError
from .metrics import MetricReport, corpus_mean, evaluate
from .pngio import read_heatmap, read_mask_png, write_heatmap, write_mask_png
from .refine import RefineResult, refine_ensemble
from .segmentation import BinaryMask, DiffMap, MaskEnsemble, generate_ensemble
from .uncertainty import UncertaintyReport, report

log = logging.getLogger(__name__)

AMBIGUITY_MAX = 0.25  # Bernoulli variance ceiling; heatmaps use this fixed range


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir, command: str, cfg: PipelineConfig, inputs: dict, outputs: dict, **extra) -> dict:
    doc = {
        "command": command,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": outputs,
        "version": __version__,
        "python": platform.python_version(),
        **extra,
    }
    write_json(Path(out_dir) / "manifest.json", doc)
    return doc


# -- data ----------------------------------------------------------------


def make_dataset(cfg: PipelineConfig, root) -> dict[str, list[Sample]]:
    d = cfg.data
    splits = {"train": synthesize(d.spec, d.train_count)} if d.train_count else {}
    if d.val_count:
        splits["val"] = synthesize(d.spec, d.val_count, start=d.test_offset // 2)
    if d.test_count:
        splits["test"] = synthesize(d.spec, d.test_count, start=d.test_offset)
    write_dataset(root, splits)
    return splits


# -- training ------------------------------------------------------------


def train_model(cfg: PipelineConfig, samples: list[Sample], out_dir) -> tuple[DiffusionModel, list[float]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, curve = train(training_pool(samples), cfg.train, checkpoint_dir=out / "checkpoints")
    model.save(out / "model.dseg")
    write_loss_curve(out / "loss.csv", curve)
    return model, curve


# -- ensemble / uncertainty / refine ---------------------------------------


def ensemble_for(model: DiffusionModel, image, cfg: PipelineConfig, image_id: str = ""):
    return generate_ensemble(
        model,
        image,
        cfg.segment.timesteps,
        cfg.segment.delta_policy(),
        seed=cfg.seed,
        smooth_sigma=cfg.segment.smooth_sigma,
        image_id=image_id,
    )


def write_ensemble(out_dir, ens: MaskEnsemble, diffs: list[DiffMap]) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for mask, d in zip(ens.masks, diffs):
        name = f"mask_t{d.t:03d}.png"
        write_mask_png(out / name, mask.values)
        write_heatmap(out / f"diff_t{d.t:03d}.png", d.values, extra={"t": d.t, "threshold": mask.threshold})
        files[str(d.t)] = name
    # exact values for downstream refinement; the PNGs are 8-bit views
    np.savez(out / "diffs.npz", **{f"t{d.t:03d}": d.values for d in diffs})
    doc = {"image_id": ens.image_id, "timesteps": list(ens.timesteps), "masks": files}
    write_json(out / "ensemble.json", doc)
    return doc


def read_ensemble(ens_dir) -> tuple[MaskEnsemble, list[DiffMap] | None]:
    """Load masks written by ``write_ensemble`` (difference maps if present)."""
    root = Path(ens_dir)
    paths = sorted(root.glob("mask_t*.png"))
    if not paths:
        raise InputError(f"no mask_t*.png files in {root}")
    steps = [int(p.stem[len("mask_t") :]) for p in paths]
    masks = [BinaryMask(read_mask_png(p), float("nan")) for p in paths]
    image_id = ""
    if (root / "ensemble.json").is_file():
        image_id = json.loads((root / "ensemble.json").read_text()).get("image_id", "")
    diffs = None
    if (root / "diffs.npz").is_file():
        with np.load(root / "diffs.npz") as z:
            diffs = [DiffMap(z[f"t{t:03d}"], t) for t in steps]
    elif all((root / f"diff_t{t:03d}.png").is_file() for t in steps):
        diffs = [DiffMap(read_heatmap(root / f"diff_t{t:03d}.png"), t) for t in steps]
    return MaskEnsemble(masks, steps, image_id), diffs


def write_uncertainty(out_dir, rep: UncertaintyReport) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_heatmap(out / "coherence.png", rep.coherence, 0.0, 1.0)
    write_heatmap(out / "ambiguity.png", rep.ambiguity, 0.0, AMBIGUITY_MAX)
    doc = rep.to_json("coherence.png", "ambiguity.png")
    write_json(out / "uncertainty.json", doc)
    return doc


def _metric_row(m: MetricReport) -> dict:
    return {"dice": m.dice, "jaccard": m.jaccard, "precision": m.precision, "recall": m.recall, "flags": m.flags}


def process_sample(model: DiffusionModel, s: Sample, cfg: PipelineConfig, out_dir=None) -> dict:
    """Ensemble, uncertainty and refinement for one image, scored against its mask."""
    ens, diffs = ensemble_for(model, s.image, cfg, s.id)
    unc = report(ens)
    res: RefineResult = refine_ensemble(ens, s.image, diffs, cfg.crf, cfg.refine)
    members = [evaluate(m, s.mask) for m in ens.masks]
    stack = ens.stack()
    agree = np.all(stack == stack[0], axis=0)
    row = {
        "id": s.id,
        "final": _metric_row(evaluate(res.final, s.mask)),
        "members_mean": corpus_mean(members),
        "ged": unc.ged,
        "ambiguity_max_where_agree": float(unc.ambiguity[agree].max()) if agree.any() else 0.0,
        "subsets": res.subsets,
    }
    if out_dir is not None:
        out = Path(out_dir)
        write_ensemble(out, ens, diffs)
        write_uncertainty(out, unc)
        res.save(out, cfg.refine, cfg.crf)
    return row


def summarize(rows: list[dict]) -> dict:
    keys = ("dice", "jaccard", "precision", "recall")
    final = {k: float(np.mean([r["final"][k] for r in rows])) for k in keys}
    members = {k: float(np.mean([r["members_mean"][k] for r in rows])) for k in keys}
    geds = [r["ged"] for r in rows if r["ged"] is not None]
    return {
        "n_images": len(rows),
        "final": final,
        "members": members,
        "mean_ged": float(np.mean(geds)) if geds else None,
        "ambiguity_max_where_agree": max(r["ambiguity_max_where_agree"] for r in rows),
    }


def write_metrics(out_dir, rows: list[dict], summary: dict, extra: dict | None = None) -> None:
    out = Path(out_dir)
    write_json(out / "metrics.json", {"summary": summary, "images": rows, **(extra or {})})
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "dice", "jaccard", "precision", "recall", "members_dice", "ged"])
        for r in rows:
            f = r["final"]
            w.writerow([r["id"], f["dice"], f["jaccard"], f["precision"], f["recall"],
                        r["members_mean"]["dice"], r["ged"]])


def reproduce(cfg: PipelineConfig, out_dir, progress=None) -> dict:
    """synth -> train -> ensemble -> uncertainty -> refine -> eval, all under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    timings = {}
    t0 = time.perf_counter()
    make_dataset(cfg, out / "data")
    # train and evaluate from the written PNGs, as the separate commands would
    train_set = read_dataset(out / "data", "train")
    test_set = read_dataset(out / "data", "test")
    timings["synth_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model, curve = train_model(cfg, train_set, out / "model")
    timings["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rows = []
    for i, s in enumerate(test_set):
        rows.append(process_sample(model, s, cfg, out / "test" / s.id))
        if progress:
            progress(i + 1, len(test_set))
    timings["inference_s"] = time.perf_counter() - t0
    summary = summarize(rows)
    write_metrics(out, rows, summary, {"config_hash": cfg.digest(), "seed": cfg.seed})
    write_manifest(
        out,
        "reproduce",
        cfg,
        {},
        {"metrics": "metrics.json", "model": "model/model.dseg", "test": "test/"},
        timings=timings,
        loss_curve=curve,
    )
    log.info("reproduce done: %s", json.dumps(summary["final"]))
    return {"summary": summary, "rows": rows, "timings": timings, "curve": curve}
