"""Dominant image motion as a homography fitted robustly to dense flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import FlowField
from .errors import DataError, DegenerateError, NoConsensusError
from .flow import pixel_grid

MAX_SAMPLES = 20000
_SCORE_CHUNK = 64


@dataclass
class MotionModel:
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)
        if h[2, 2] != 0:
            h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateError("homography is singular")
        self.h = h

    @classmethod
    def identity(cls) -> "MotionModel":
        return cls(np.eye(3))

    def transfer(self, pts) -> np.ndarray:
        return apply_homography(self.h, pts)


@dataclass
class RansacParams:
    iterations: int = 500
    inlier_threshold: float = 1.0
    sample_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or not self.inlier_threshold > 0:
            raise ValueError("RansacParams need iterations >= 1 and threshold > 0")
        if self.sample_size < 4:
            raise ValueError("a homography needs at least 4 points per sample")


def apply_homography(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    x = H[0, 0] * pts[..., 0] + H[0, 1] * pts[..., 1] + H[0, 2]
    y = H[1, 0] * pts[..., 0] + H[1, 1] * pts[..., 1] + H[1, 2]
    z = H[2, 0] * pts[..., 0] + H[2, 1] * pts[..., 1] + H[2, 2]
    return np.stack([x / z, y / z], axis=-1)


def hartley_normalization(pts) -> np.ndarray:
    """Similarity taking the centroid to the origin and mean distance to sqrt(2)."""
    pts = np.asarray(pts, dtype=np.float64)
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    if np.any(d == 0):
        raise DegenerateError("all points coincide")
    s = np.sqrt(2) / d
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _dlt_rows(src, dst) -> np.ndarray:
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    return np.concatenate([r1, r2], axis=-2)


def _transform(T, pts):
    return pts @ np.swapaxes(T[..., :2, :2], -1, -2) + T[..., None, :2, 2]


def _batched_dlt(src, dst):
    """Normalized DLT on stacked correspondence sets ``(..., n, 2)``.

    Returns homographies ``(..., 3, 3)`` and singular-value ratios
    ``s[-2] / s[0]`` of the normalized system.
    """
    T1 = hartley_normalization(src)
    T2 = hartley_normalization(dst)
    A = _dlt_rows(_transform(T1, src), _transform(T2, dst))
    if A.shape[-2] < 9:
        A = np.concatenate([A, np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))], axis=-2)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    Hn = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    H = np.linalg.inv(T2) @ Hn @ T1
    return H, s[..., -2] / s[..., 0]


def _has_collinear_triple(pts, tol=1e-6):
    """``pts`` is ``(..., 4, 2)``; flags samples with three (near) collinear points."""
    bad = np.zeros(pts.shape[:-2], dtype=bool)
    scale = np.ptp(pts, axis=-2).max(axis=-1) ** 2 + 1e-300
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[..., i, :], pts[..., j, :], pts[..., k, :]
        area = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
        bad |= np.abs(area) <= tol * scale
    return bad


def fit_homography_dlt(src, dst) -> MotionModel:
    """Least-squares homography ``dst ~ H src`` by Hartley-normalized DLT."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst differ in length")
    if len(src) < 4:
        raise DegenerateError(f"need at least 4 correspondences, got {len(src)}")
    if len(src) == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateError("three of the four points are collinear")
    H, ratio = _batched_dlt(src, dst)
    if ratio < 1e-12:
        raise DegenerateError("degenerate configuration for DLT")
    return MotionModel(H)


def transfer_error(model: MotionModel, src, dst) -> np.ndarray:
    return np.linalg.norm(model.transfer(src) - np.asarray(dst), axis=-1)


def grid_stride(height: int, width: int, max_samples: int = MAX_SAMPLES) -> int:
    s = 1
    while -(-height // s) * -(-width // s) > max_samples:
        s += 1
    return s


def _count_inliers(H, src, dst, thr2):
    """Inlier counts of stacked hypotheses ``H`` ``(k, 3, 3)``."""
    x, y = src[:, 0], src[:, 1]
    X = H[:, 0, 0, None] * x + H[:, 0, 1, None] * y + H[:, 0, 2, None]
    Y = H[:, 1, 0, None] * x + H[:, 1, 1, None] * y + H[:, 1, 2, None]
    Z = H[:, 2, 0, None] * x + H[:, 2, 1, None] * y + H[:, 2, 2, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        e2 = (X / Z - dst[:, 0]) ** 2 + (Y / Z - dst[:, 1]) ** 2
    return np.count_nonzero(e2 <= thr2, axis=1)


def ransac_dominant_motion(flow: FlowField, params: RansacParams | None = None):
    """Robust homography for the dominant motion of ``flow``.

    Hypotheses come from minimal samples of a grid-subsampled set of
    correspondences ``(x, x + flow(x))``; the best-supported one (lowest index
    on ties) is refit on its inliers. Returns ``(model, inlier_mask)`` with the
    mask evaluated at every pixel.
    """
    params = params or RansacParams()
    h, w = flow.shape
    if h < 8 or w < 8:
        raise DataError(f"flow too small for RANSAC: {w}x{h}")
    stride = grid_stride(h, w)
    xx, yy = pixel_grid(flow.shape)
    sl = (slice(0, None, stride), slice(0, None, stride))
    src = np.stack([xx[sl].ravel(), yy[sl].ravel()], axis=1)
    dst = src + np.stack([flow.u[sl].ravel(), flow.v[sl].ravel()], axis=1)
    ok = np.all(np.isfinite(dst), axis=1)
    src, dst = src[ok], dst[ok]
    m = len(src)
    k = params.sample_size
    min_support = 4 * k
    if m < min_support:
        raise NoConsensusError("not enough finite flow samples")

    rng = np.random.default_rng(params.seed)
    idx = np.array([rng.choice(m, size=k, replace=False) for _ in range(params.iterations)])
    S, D = src[idx], dst[idx]
    bad = _has_collinear_triple(S[:, :4]) | _has_collinear_triple(D[:, :4])
    counts = np.full(params.iterations, -1)
    thr2 = params.inlier_threshold**2
    good = np.flatnonzero(~bad)
    if len(good):
        H, ratio = _batched_dlt(S[good], D[good])
        valid = (ratio >= 1e-12) & np.all(np.isfinite(H), axis=(1, 2))
        for start in range(0, len(good), _SCORE_CHUNK):
            sel = slice(start, start + _SCORE_CHUNK)
            c = _count_inliers(H[sel], src, dst, thr2)
            counts[good[sel]] = np.where(valid[sel], c, -1)
    best = int(np.argmax(counts))
    best_count = int(counts[best])
    if best_count < min_support:
        raise NoConsensusError(f"best hypothesis has {best_count} inliers, need {min_support}")

    Hbest, _ = _batched_dlt(S[best], D[best])
    model = MotionModel(Hbest)
    inl = transfer_error(model, src, dst) <= params.inlier_threshold
    try:
        refit = fit_homography_dlt(src[inl], dst[inl])
        refit_count = int(np.count_nonzero(transfer_error(refit, src, dst) <= params.inlier_threshold))
        if refit_count >= best_count:
            model, best_count = refit, refit_count
    except DegenerateError:
        pass
    assert best_count >= counts.max()

    mask = residual_map(flow, model) <= params.inlier_threshold
    return model, mask


def model_flow(model: MotionModel, width: int, height: int) -> FlowField:
    """Image motion induced by ``model``; pixels mapped to infinity get ``inf``."""
    H = model.h
    xx, yy = pixel_grid((height, width))
    X = H[0, 0] * xx + H[0, 1] * yy + H[0, 2]
    Y = H[1, 0] * xx + H[1, 1] * yy + H[1, 2]
    Z = H[2, 0] * xx + H[2, 1] * yy + H[2, 2]
    far = np.abs(Z) < 1e-12
    Zs = np.where(far, 1.0, Z)
    u = np.where(far, np.inf, X / Zs - xx)
    v = np.where(far, np.inf, Y / Zs - yy)
    return FlowField(u, v)


def residual_map(flow: FlowField, model: MotionModel) -> np.ndarray:
    """Per-pixel distance between ``flow`` and the model-induced flow."""
    mf = model_flow(model, flow.width, flow.height)
    r = np.hypot(flow.u - mf.u, flow.v - mf.v)
    return np.where(np.isfinite(mf.u), r, np.inf)
