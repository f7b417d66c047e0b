"""Coherence / ambiguity maps and the within-ensemble generalized energy distance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .segmentation import MaskEnsemble


def _stack(Y) -> np.ndarray:
    if isinstance(Y, MaskEnsemble):
        a = Y.stack()
    else:
        a = np.asarray([getattr(m, "values", m) for m in Y])
    if a.shape[0] == 0:
        raise InputError("empty ensemble")
    return a.astype(np.float64)


def coherence(Y) -> np.ndarray:
    return _stack(Y).mean(axis=0)


def ambiguity(Y) -> np.ndarray:
    """Population (divide-by-N) pixelwise variance."""
    a = _stack(Y)
    return ((a - a.mean(axis=0)) ** 2).mean(axis=0)


def normalized_distance(p, q) -> float:
    """Euclidean distance between two masks scaled by the pixel count: sqrt(sum (p-q)^2 / (w h))."""
    p = np.asarray(getattr(p, "values", p), dtype=np.float64)
    q = np.asarray(getattr(q, "values", q), dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"mask shapes differ: {p.shape} vs {q.shape}")
    return math.sqrt(float(((p - q) ** 2).sum()) / p.size)


def distance_matrix(Y) -> np.ndarray:
    a = _stack(Y)
    a = a.reshape(a.shape[0], -1)
    # binary masks keep the Gram-matrix route exact: all terms are small integers
    sq = (a * a).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (a @ a.T), 0.0)
    return np.sqrt(d2 / a.shape[1])


def ged(Y) -> float:
    """2/N^2 sum_{i<j} d(y_i, y_j) - 1/N^2 sum_i d(y_i, y_i) - 1/N^2 sum_j d(y_j, y_j)."""
    a = _stack(Y)
    n = a.shape[0]
    if n < 2:
        raise InputError("GED needs at least two ensemble members")
    d = distance_matrix(a)
    iu = np.triu_indices(n, k=1)
    self_terms = np.trace(d)
    return float(2.0 / n**2 * d[iu].sum() - self_terms / n**2 - self_terms / n**2)


@dataclass
class UncertaintyReport:
    coherence: np.ndarray
    ambiguity: np.ndarray
    ged: float | None
    n: int

    def to_json(self, coherence_png=None, ambiguity_png=None) -> dict:
        return {
            "ged": self.ged,
            "n": self.n,
            "coherence_png": None if coherence_png is None else str(coherence_png),
            "ambiguity_png": None if ambiguity_png is None else str(ambiguity_png),
            "ambiguity_scale": 4.0,
        }


def report(Y) -> UncertaintyReport:
    """All three measures for one ensemble; ``ged`` is None when N = 1."""
    a = _stack(Y)
    g = ged(a) if a.shape[0] >= 2 else None
    return UncertaintyReport(coherence(a), ambiguity(a), g, a.shape[0])
