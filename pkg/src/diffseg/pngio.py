"""8-bit PNG reading/writing for images, masks and scaled real-valued maps."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError


def to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(a, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    # fixed compression settings keep bytes reproducible
    Image.fromarray(arr, mode=mode).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_rgb_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    Path(path).write_bytes(_png_bytes(to_u8(img), "RGB"))


def read_rgb_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Path(path).write_bytes(_png_bytes(m, "L"))


def read_mask_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"mask not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def render_heatmap(values: np.ndarray, vmin: float | None = None, vmax: float | None = None):
    """Linearly scale a real map to 8-bit grayscale PNG bytes.

    Returns ``(png_bytes, sidecar)`` where the sidecar records the scaling so the
    quantised map can be recovered as ``vmin + q / 255 * (vmax - vmin)``.
    A constant map with no explicit range renders as all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise InputError(f"heatmap expects a 2-D map, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError("heatmap input contains non-finite values")
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    span = hi - lo
    q = np.zeros(v.shape) if span <= 0 else (v - lo) / span
    return _png_bytes(to_u8(q), "L"), {"min": lo, "max": hi}


def write_heatmap(path, values, vmin=None, vmax=None, extra: dict | None = None) -> dict:
    png, side = render_heatmap(values, vmin, vmax)
    path = Path(path)
    path.write_bytes(png)
    side = {**side, **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return side


def read_heatmap(path) -> np.ndarray:
    """Decode a heatmap PNG back to real values using its JSON sidecar."""
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        q = np.asarray(im.convert("L"), dtype=np.float64)
    return side["min"] + q / 255.0 * (side["max"] - side["min"])
