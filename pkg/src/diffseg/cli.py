"""Command-line entry point: ``diffseg <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, parse_timesteps
from .data import read_dataset
from .densecrf import LESION, mean_field_fast, mean_field_naive, unary_from_probability
from .diffusion import DiffusionModel
from .errors import ConfigError, DiffSegError, ModelError
from .metrics import corpus_mean, evaluate
from .pipeline import (
    ensemble_for,
    make_dataset,
    read_ensemble,
    reproduce,
    train_model,
    write_ensemble,
    write_json,
    write_manifest,
    write_uncertainty,
)
from .pngio import read_mask_png, read_rgb_png, write_heatmap, write_mask_png
from .refine import majority_binarize, refine_ensemble
from .segmentation import binarize, noise_difference, timestep_rng
from .uncertainty import report

log = logging.getLogger("diffseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(DiffSegError):
    kind = "usage"


def _need(path, what: str) -> Path:
    p = Path(path) if path else None
    if p is None or not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _model(path) -> DiffusionModel:
    if not path or not Path(path).is_file():
        raise UsageError(f"model not found: {path}")
    return DiffusionModel.load(path)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seg = cfg.segment
    if getattr(args, "timesteps", None):
        seg = dataclasses.replace(seg, timesteps=parse_timesteps(args.timesteps))
    if getattr(args, "delta", None) is not None:
        seg = dataclasses.replace(seg, delta=args.delta)
    ref = cfg.refine
    if getattr(args, "iters", None) is not None:
        ref = dataclasses.replace(ref, K=args.iters)
    if getattr(args, "subset", None) is not None:
        ref = dataclasses.replace(ref, m=args.subset)
    cfg = dataclasses.replace(cfg, segment=seg, refine=ref)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    splits = make_dataset(cfg, out)
    counts = {k: len(v) for k, v in splits.items()}
    write_manifest(out, "synth", cfg, {}, {"labels": "labels.csv", "splits": counts})
    return counts


def cmd_train(args) -> dict:
    cfg = _config(args)
    data = _need(args.data, "dataset")
    samples = read_dataset(data, "train")
    out = _out(args)
    _, curve = train_model(cfg, samples, out)
    write_manifest(out, "train", cfg, {"data": data}, {"model": "model.dseg", "loss": "loss.csv"})
    return {"epochs": len(curve), "final_loss": curve[-1] if curve else None}


def cmd_segment(args) -> dict:
    cfg = _config(args)
    model = _model(args.model)
    image = read_rgb_png(_need(args.image, "image"))
    out = _out(args)
    d = noise_difference(model, image, args.t, timestep_rng(cfg.seed, args.t), cfg.segment.smooth_sigma)
    mask = binarize(d, cfg.segment.delta_policy())
    write_mask_png(out / "mask.png", mask.values)
    write_heatmap(out / "diff.png", d.values, extra={"t": d.t, "threshold": mask.threshold})
    write_manifest(out, "segment", cfg, {"model": args.model, "image": args.image},
                   {"mask": "mask.png", "diff": "diff.png"}, t=args.t)
    return {"t": args.t, "threshold": mask.threshold, "lesion_pixels": int(mask.values.sum())}


def cmd_ensemble(args) -> dict:
    cfg = _config(args)
    model = _model(args.model)
    image = read_rgb_png(_need(args.image, "image"))
    out = _out(args)
    ens, diffs = ensemble_for(model, image, cfg, Path(args.image).stem)
    doc = write_ensemble(out, ens, diffs)
    write_manifest(out, "ensemble", cfg, {"model": args.model, "image": args.image}, doc["masks"])
    return {"masks": len(ens)}


def cmd_uncertainty(args) -> dict:
    cfg = _config(args)
    ens, _ = read_ensemble(_need(args.ensemble, "ensemble directory"))
    out = _out(args)
    doc = write_uncertainty(out, report(ens))
    write_manifest(out, "uncertainty", cfg, {"ensemble": args.ensemble}, doc)
    return {"ged": doc["ged"], "n": doc["n"]}


def cmd_refine(args) -> dict:
    cfg = _config(args)
    ens, diffs = read_ensemble(_need(args.ensemble, "ensemble directory"))
    if diffs is None:
        raise UsageError(f"difference maps not found in {args.ensemble}")
    image = read_rgb_png(_need(args.image, "image"))
    out = _out(args)
    res = refine_ensemble(ens, image, diffs, cfg.crf, cfg.refine)
    doc = res.save(out, cfg.refine, cfg.crf)
    write_manifest(out, "refine", cfg, {"ensemble": args.ensemble, "image": args.image}, doc["files"])
    return {"lesion_pixels": int(res.final.values.sum()), "subsets": res.subsets}


def _pairs(pred: Path, truth: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_file() and truth.is_file():
        return [(pred.stem, pred, truth)]
    if pred.is_dir() and truth.is_dir():
        out = []
        for p in sorted(truth.glob("*.png")):
            q = pred / p.name
            if not q.is_file():
                # per-image run directories: pred/<id>/final.png
                q = pred / p.stem / "final.png"
            if not q.is_file():
                raise UsageError(f"prediction for {p.name} not found under {pred}")
            out.append((p.stem, q, p))
        if not out:
            raise UsageError(f"no ground-truth masks in {truth}")
        return out
    raise UsageError("--pred and --truth must both be files or both be directories")


def cmd_eval(args) -> dict:
    cfg = _config(args)
    pred = _need(args.pred, "prediction")
    truth = _need(args.truth, "ground truth")
    out = _out(args)
    rows, reports = [], []
    for sid, p, t in _pairs(pred, truth):
        r = evaluate(read_mask_png(p), read_mask_png(t))
        reports.append(r)
        rows.append({"id": sid, **r.as_dict()})
    mean = corpus_mean(reports)
    write_json(out / "metrics.json", {"images": rows, "mean": mean})
    with open(out / "metrics.csv", "w") as fh:
        fh.write("id,dice,jaccard,precision,recall,flags\n")
        for r in rows:
            fh.write(f"{r['id']},{r['dice']!r},{r['jaccard']!r},{r['precision']!r},{r['recall']!r},"
                     f"{';'.join(r['flags'])}\n")
        fh.write(f"mean,{mean['dice']!r},{mean['jaccard']!r},{mean['precision']!r},{mean['recall']!r},\n")
    write_manifest(out, "eval", cfg, {"pred": pred, "truth": truth}, {"json": "metrics.json", "csv": "metrics.csv"})
    return mean


def cmd_refine_one(args) -> dict:
    cfg = _config(args)
    mask = read_mask_png(_need(args.mask, "mask"))
    image = read_rgb_png(_need(args.image, "image"))
    if mask.shape != image.shape[:2]:
        raise UsageError(f"mask {mask.shape} and image {image.shape[:2]} differ in size")
    if not 0.5 < args.confidence < 1.0:
        raise ConfigError("--confidence must lie in (0.5, 1)")
    p = np.where(mask > 0, args.confidence, 1.0 - args.confidence)
    solve = mean_field_fast if cfg.refine.method == "fast" else mean_field_naive
    q = solve(unary_from_probability(p), image, cfg.crf)[..., LESION]
    out = _out(args)
    name = args.name or "refined.png"
    write_mask_png(out / name, majority_binarize(q, 0.5).values)
    write_manifest(out, "refine-one", cfg, {"mask": args.mask, "image": args.image}, {"mask": name},
                   confidence=args.confidence)
    return {"lesion_pixels_in": int(mask.sum()), "lesion_pixels_out": int((q >= 0.5).sum())}


def cmd_reproduce(args) -> dict:
    cfg = _config(args)
    res = reproduce(cfg, _out(args), progress=lambda i, n: log.info("image %d/%d", i, n))
    return res["summary"]


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffseg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI pipeline config")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="run directory")
        for f in flags:
            f(p)
        p.set_defaults(fn=fn)
        return p

    model = lambda p: p.add_argument("--model", help="model file (.dseg)")  # noqa: E731
    image = lambda p: p.add_argument("--image", help="RGB image PNG")  # noqa: E731
    steps = lambda p: p.add_argument("--timesteps", help="start:stop:step, stop inclusive (default 60:150:10)")  # noqa: E731
    delta = lambda p: p.add_argument("--delta", help="threshold in [0, 1], 'otsu' or 'q<fraction>'")  # noqa: E731
    ens = lambda p: p.add_argument("--ensemble", help="directory written by 'ensemble'")  # noqa: E731

    def refine_flags(p):
        p.add_argument("--iters", type=int, help="refinement rounds K")
        p.add_argument("--subset", type=int, help="members drawn per round m")

    command("synth", cmd_synth, "write a synthetic dataset")
    command("train", cmd_train, "train the conditional denoiser",
            lambda p: p.add_argument("--data", help="dataset root written by 'synth'"))
    command("segment", cmd_segment, "one difference map and mask", model, image, delta,
            lambda p: p.add_argument("--t", type=int, default=100, help="timestep (default 100)"))
    command("ensemble", cmd_ensemble, "masks over several timesteps", model, image, steps, delta)
    command("uncertainty", cmd_uncertainty, "coherence, ambiguity and GED", ens)
    command("refine", cmd_refine, "CRF refinement of an ensemble", ens, image, refine_flags)
    command("eval", cmd_eval, "Dice / Jaccard / precision / recall",
            lambda p: p.add_argument("--pred", help="predicted mask PNG or directory"),
            lambda p: p.add_argument("--truth", help="ground-truth mask PNG or directory"))

    def one_flags(p):
        p.add_argument("--mask", help="mask PNG to refine")
        p.add_argument("--confidence", type=float, default=0.8, help="P(lesion) inside the mask")
        p.add_argument("--name", help="output file name (default refined.png)")

    command("refine-one", cmd_refine_one, "CRF refinement of a single mask", image, one_flags)
    command("reproduce", cmd_reproduce, "full synthetic chain end to end", steps, delta, refine_flags)
    return ap


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.fn(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ModelError as exc:
        if "not found" in str(exc):
            return _fail("usage", str(exc), EXIT_USAGE)
        return _fail(exc.kind, str(exc), EXIT_FAIL)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except DiffSegError as exc:
        return _fail(exc.kind, str(exc), EXIT_FAIL)
    print(json.dumps({"command": args.command, "out": str(args.out), "result": result}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
