"""Fully connected two-label CRF: energy, exact mean-field oracle and a filtered fast path.

Labels are indexed 0 = background, 1 = lesion.  Pixel positions are in pixels,
colours on the 0-255 RGB scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ConfigError, InputError

BACKGROUND, LESION = 0, 1
NAIVE_MAX_SIDE = 64


@dataclass
class CrfParams:
    w1: float = 3.0
    w2: float = 1.0
    theta_alpha: float = 30.0
    theta_beta: float = 10.0
    theta_gamma: float = 3.0
    iterations: int = 10
    tol: float = 1e-4
    # fast path: per-message work cap (multiply-adds) used to pick the splat tier
    work_budget: float = 2e8

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("crf.w1 and crf.w2 must be >= 0")
        for name in ("theta_alpha", "theta_beta", "theta_gamma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"crf.{name} must be > 0")
        if self.iterations < 1:
            raise ConfigError("crf.iterations must be >= 1")
        if self.tol < 0:
            raise ConfigError("crf.tol must be >= 0")
        if self.work_budget <= 0:
            raise ConfigError("crf.work_budget must be > 0")


def potts(xi: int, xj: int) -> int:
    return int(xi != xj)


def pairwise_kernel(pi, pj, Ii, Ij, params: CrfParams) -> float:
    """w1 * appearance + w2 * smoothness for one pixel pair."""
    dp = float(np.sum((np.asarray(pi, float) - np.asarray(pj, float)) ** 2))
    dI = float(np.sum((np.asarray(Ii, float) - np.asarray(Ij, float)) ** 2))
    app = math.exp(-dp / (2 * params.theta_alpha**2) - dI / (2 * params.theta_beta**2))
    smooth = math.exp(-dp / (2 * params.theta_gamma**2))
    return params.w1 * app + params.w2 * smooth


def unary_from_diffmap(d, eps_clamp: float = 1e-3) -> np.ndarray:
    """(H, W, 2) negative log-probabilities from a min-max normalised difference map."""
    if not 0 < eps_clamp < 0.5:
        raise ConfigError("eps_clamp must lie in (0, 0.5)")
    v = np.asarray(getattr(d, "values", d), dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        warnings.warn("constant difference map; using a uniform unary", RuntimeWarning)
        p = np.full(v.shape, 0.5)
    else:
        p = np.clip((v - lo) / (hi - lo), eps_clamp, 1.0 - eps_clamp)
    return -np.log(np.stack([1.0 - p, p], axis=-1))


def unary_from_probability(p, eps_clamp: float = 1e-3) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps_clamp, 1.0 - eps_clamp)
    return -np.log(np.stack([1.0 - p, p], axis=-1))


def _rgb255(image) -> np.ndarray:
    im = np.asarray(image, dtype=np.float64)
    if im.ndim == 2:
        im = im[..., None]
    if im.shape[-1] == 1:
        im = np.repeat(im, 3, axis=-1)
    if im.max() <= 1.0:
        im = im * 255.0
    return im


def _check(unary, image):
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 3 or unary.shape[-1] != 2:
        raise InputError(f"unary must be (H, W, 2), got {unary.shape}")
    if not np.all(np.isfinite(unary)):
        raise InputError("unary contains non-finite values")
    img = _rgb255(image)
    if img.shape[:2] != unary.shape[:2]:
        raise InputError(f"image {img.shape[:2]} and unary {unary.shape[:2]} differ in size")
    return unary, img


def softmax_neg(unary: np.ndarray) -> np.ndarray:
    z = -unary - (-unary).max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kernel_matrix(image, params: CrfParams) -> np.ndarray:
    """Dense (N, N) pairwise kernel with a zero diagonal; small images only."""
    img = _rgb255(image)
    H, W = img.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    col = img.reshape(-1, 3)
    dp = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    dI = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    K = params.w1 * np.exp(-dp / (2 * params.theta_alpha**2) - dI / (2 * params.theta_beta**2))
    K += params.w2 * np.exp(-dp / (2 * params.theta_gamma**2))
    np.fill_diagonal(K, 0.0)
    return K


def _mean_field(unary, message, params: CrfParams, init=None, on_iter=None):
    # message(Q) -> (H, W, 2) of sum_{j != i} k(i, j) Q_j(l)
    Q = softmax_neg(unary) if init is None else np.asarray(init, dtype=np.float64).copy()
    for it in range(params.iterations):
        m = message(Q)
        # Potts: label l pays for the mass the neighbours put on the other label
        pair = m[..., ::-1]
        Qn = softmax_neg(unary + pair)
        delta = float(np.abs(Qn - Q).max())
        Q = Qn
        if on_iter:
            on_iter(it, Q)
        if delta < params.tol:
            break
    return Q


def mean_field_naive(unary, image, params: CrfParams, init=None, on_iter=None) -> np.ndarray:
    """Exact O(N^2) mean-field inference (the oracle path), up to 64x64."""
    unary, img = _check(unary, image)
    H, W = unary.shape[:2]
    if H > NAIVE_MAX_SIDE or W > NAIVE_MAX_SIDE:
        raise InputError(f"naive CRF is limited to {NAIVE_MAX_SIDE}x{NAIVE_MAX_SIDE}; got {H}x{W}")
    K = kernel_matrix(img, params)

    def message(Q):
        return (K @ Q.reshape(-1, 2)).reshape(H, W, 2)

    return _mean_field(unary, message, params, init, on_iter)


@dataclass(frozen=True)
class _Tier:
    splat: float  # Gaussian splat width, grid cells
    reach: float  # splat truncation radius, grid cells
    sigma: float  # colour bandwidth, grid cells
    spatial_tol: float  # relative eigenvalue cut for the spatial factors
    dtype: type

    @property
    def width(self) -> int:
        return 2 * int(math.ceil(self.reach))


# finest first; each tier trades accuracy for a smaller splat footprint
_TIERS = (
    _Tier(0.9, 4.5, 2.5, 1e-8, np.float64),
    _Tier(0.7, 3.0, 2.0, 1e-6, np.float64),
    _Tier(0.6, 2.0, 2.0, 1e-5, np.float32),
)
# colour distance, in bandwidths, beyond which the pair path drops a pair
_PAIR_REACH = 6.0


def _spatial_factors(n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    w, U = np.linalg.eigh(_gauss_matrix(n, sigma))
    return w[::-1], U[:, ::-1]


def _axis_splat(u: np.ndarray, tier: _Tier) -> tuple[np.ndarray, np.ndarray]:
    r = int(math.ceil(tier.reach))
    idx = np.floor(u).astype(np.int64)[:, None] + np.arange(1 - r, r + 1)
    d = u[:, None] - idx
    w = np.exp(-(d**2) / (2 * tier.splat**2)) / (math.sqrt(2 * math.pi) * tier.splat)
    w[np.abs(d) > tier.reach] = 0.0
    return w, idx


class _GridFilter:
    """sum_{j != i} k_app(i, j) v_j with a low-rank spatial factor and a colour grid.

    The spatial Gaussian is separable over the pixel lattice, so it is applied
    through its leading eigenvectors (exact up to the eigenvalue cut).  Colours
    are rotated onto their principal axes (the kernel is isotropic) and filtered
    on a downsampled grid: Gaussian splat, Gaussian blur, Gaussian slice.  The
    three widths compose to the target bandwidth, and because every factor is
    Gaussian the grid error is relative to the kernel value rather than to its
    peak.  The approximate self-interaction is subtracted exactly.
    """

    def __init__(self, tier: _Tier, V, lam, u: np.ndarray):
        # u: principal-axis colours in grid cells, shifted to start at reach + 1
        n = u.shape[0]
        self.tier, self.dtype = tier, tier.dtype
        sb2 = tier.sigma**2 - 2 * tier.splat**2
        amp = tier.sigma / math.sqrt(sb2)  # per-axis blur amplitude for a peak-one kernel
        ws, ids, self.blur = [], [], []
        self_w = np.ones(n)
        for k in range(3):
            w, idx = _axis_splat(u[:, k], tier)
            ws.append(w)
            ids.append(idx)
            size = int(idx.max()) + 1
            d = np.arange(size)[:, None] - np.arange(size)[None, :]
            B = amp * np.exp(-(d**2) / (2 * sb2))
            self.blur.append(B.astype(self.dtype))
            local = B[: w.shape[1], : w.shape[1]]  # splat offsets are shared by all pixels
            self_w *= np.einsum("na,ab,nb->n", w, local, w)
        self.shape = tuple(int(i.max()) + 1 for i in ids)
        P3 = tier.width**3
        vals = (ws[0][:, :, None, None] * ws[1][:, None, :, None] * ws[2][:, None, None, :]).reshape(n, -1)
        cols = (
            (ids[0][:, :, None, None] * self.shape[1] + ids[1][:, None, :, None]) * self.shape[2]
            + ids[2][:, None, None, :]
        ).reshape(n, -1)
        self.S = sparse.csr_matrix(
            (vals.ravel().astype(self.dtype), cols.ravel(), np.arange(0, n * P3 + 1, P3)),
            shape=(n, int(np.prod(self.shape))),
        )
        self.St = self.S.T.tocsr()
        self.self_weight = (V**2 @ lam) * self_w
        self.V = V.astype(self.dtype)
        self.lam = lam.astype(self.dtype)

    def filter(self, values: np.ndarray) -> np.ndarray:
        v = values.ravel()
        Z = self.V * v.astype(self.dtype)[:, None]
        C = Z.shape[1]
        g = (self.St @ Z).reshape(self.shape + (C,))
        g = np.einsum("ai,ibcz->abcz", self.blur[0], g, optimize=True)
        g = np.einsum("bi,aicz->abcz", self.blur[1], g, optimize=True)
        g = np.einsum("ci,abiz->abcz", self.blur[2], g, optimize=True)
        out = self.S @ g.reshape(-1, C)
        full = np.einsum("nc,nc,c->n", out, self.V, self.lam).astype(np.float64)
        return (full - self.self_weight * v).reshape(values.shape)


class _PairFilter:
    """Direct sum over pixel pairs closer than _PAIR_REACH colour bandwidths.

    Exact up to that truncation; cheap when colours are spread out, so that
    each pixel has few colour neighbours.
    """

    def __init__(self, pairs: np.ndarray, pos: np.ndarray, col: np.ndarray):
        i, j = pairs[:, 0], pairs[:, 1]
        k = np.exp(-0.5 * (((pos[i] - pos[j]) ** 2).sum(1) + ((col[i] - col[j]) ** 2).sum(1)))
        n = pos.shape[0]
        K = sparse.coo_matrix((k, (i, j)), shape=(n, n)).tocsr()
        self.K = K + K.T

    def filter(self, values: np.ndarray) -> np.ndarray:
        return (self.K @ values.ravel()).reshape(values.shape)


def _appearance_filter(img: np.ndarray, params: CrfParams):
    """Pick the appearance filter by estimated work per message.

    Preference order: the finest grid tier that fits the budget, then the pair
    sum if it fits, then whichever of the coarsest tier and the pair sum is cheaper.
    Colour bandwidths too narrow for a grid always take the pair sum.
    """
    H, W = img.shape[:2]
    n = H * W
    wy, Uy = _spatial_factors(H, params.theta_alpha)
    wx, Ux = _spatial_factors(W, params.theta_alpha)
    lam = np.outer(wy, wx)
    col = img.reshape(-1, 3) - img.reshape(-1, 3).mean(axis=0)
    _, _, Vt = np.linalg.svd(col, full_matrices=False)
    rot = col @ Vt.T
    extent = rot.max(axis=0) - rot.min(axis=0)

    def grid_cost(tier):
        r = int((lam > tier.spatial_tol * lam.max()).sum())
        cells = extent * tier.sigma / params.theta_beta + 2 * tier.reach + 2
        return 2 * n * r * tier.width**3 + float(np.prod(cells)) * r * float(cells.sum())

    def fits(tier):
        # 8-bit colours gain nothing from grid cells finer than one level
        return params.theta_beta / tier.sigma >= 1.0

    def build_grid(tier):
        cell = params.theta_beta / tier.sigma
        keep = np.argwhere(lam > tier.spatial_tol * lam.max())
        V = (Uy[:, keep[:, 0]][:, None, :] * Ux[:, keep[:, 1]][None, :, :]).reshape(n, -1)
        u = rot / cell
        return _GridFilter(tier, V, lam[keep[:, 0], keep[:, 1]], u - u.min(axis=0) + tier.reach + 1.0)

    for tier in _TIERS[:-1]:
        if fits(tier) and grid_cost(tier) <= params.work_budget:
            return build_grid(tier)
    yy, xx = np.mgrid[0:H, 0:W]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1) / params.theta_alpha
    cf = img.reshape(-1, 3) / params.theta_beta
    tree = cKDTree(cf)
    # ordered pairs including self; a message costs about two sparse passes per pair
    pair_cost = 2.0 * float(tree.count_neighbors(tree, _PAIR_REACH))
    coarse = _TIERS[-1]
    if not fits(coarse) or pair_cost <= max(params.work_budget, grid_cost(coarse)):
        return _PairFilter(tree.query_pairs(_PAIR_REACH, output_type="ndarray"), pos, cf)
    return build_grid(coarse)


def _gauss_matrix(n: int, sigma: float) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    return np.exp(-((i[:, None] - i[None, :]) ** 2) / (2 * sigma**2))


def mean_field_fast(unary, image, params: CrfParams, init=None, on_iter=None) -> np.ndarray:
    """Mean-field with filtered message passing.

    Smoothness messages use the exact separable spatial Gaussian (two small
    dense matrix products); appearance messages go through the filter picked by ``_appearance_filter``.
    """
    unary, img = _check(unary, image)
    H, W = unary.shape[:2]
    Gy = _gauss_matrix(H, params.theta_gamma)
    Gx = _gauss_matrix(W, params.theta_gamma)

    filt = None
    if params.w1 > 0:
        if params.theta_alpha < 1.0:
            raise ConfigError("spatial bandwidth is below one pixel; use mean_field_naive")
        filt = _appearance_filter(img, params)
        # sum_j k(i,j) over both labels is Q-independent; only Q(lesion) is filtered per step
        total_app = filt.filter(np.ones((H, W)))

    def message(Q):
        q1 = Q[..., LESION]
        q0 = Q[..., BACKGROUND]
        m = np.empty_like(Q)
        m[..., LESION] = params.w2 * (Gy @ q1 @ Gx - q1)
        m[..., BACKGROUND] = params.w2 * (Gy @ q0 @ Gx - q0)
        if filt is not None:
            a1 = filt.filter(q1)
            m[..., LESION] += params.w1 * a1
            m[..., BACKGROUND] += params.w1 * (total_app - a1)
        return m

    return _mean_field(unary, message, params, init, on_iter)


def energy(labeling, unary, image, params: CrfParams) -> float:
    """Exact energy of a hard labeling: unary sum plus Potts-weighted kernel over i < j."""
    x = np.asarray(getattr(labeling, "values", labeling)).astype(np.int64)
    unary, img = _check(unary, image)
    if x.shape != unary.shape[:2]:
        raise InputError("labeling and unary differ in shape")
    un = float(np.take_along_axis(unary, x[..., None], axis=-1).sum())
    if params.w1 == 0 and params.w2 == 0:
        return un
    K = kernel_matrix(img, params)
    f = x.ravel().astype(np.float64)
    # sum_{i<j} [x_i != x_j] K_ij with K symmetric and zero on the diagonal
    return un + float(f @ K @ (1.0 - f))
