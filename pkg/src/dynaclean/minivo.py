"""Minimal monocular visual odometry.

Shi-Tomasi corners, pyramidal Lucas-Kanade tracking, 8-point essential
matrix RANSAC with a Sampson test, cheirality-resolved decomposition and
frame-to-frame chaining with unit step length. No mapping, no bundle
adjustment, no loop closure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .dataset_io import Frame, Trajectory
from .errors import DataError, DegenerateError, NoConsensusError
from .flow import downsample, gradients
from .geometry import Intrinsics, PoseSE3, skew
from .seeding import derive_seed

log = logging.getLogger(__name__)

MIN_INLIERS = 12
_SCORE_CHUNK = 128


@dataclass
class VoParams:
    max_features: int = 500
    quality_level: float = 0.01
    min_distance: float = 8.0
    ransac_iterations: int = 1000
    ransac_threshold: float = 1e-3  # Sampson distance, normalized coordinates
    seed: int = 0
    track_window: int = 15
    track_levels: int = 3
    track_iterations: int = 20
    track_max_residual: float = 12.0  # mean abs patch difference, 8-bit levels
    min_parallax: float = 1e-3  # radians, median rotation-compensated ray angle
    redetect_ratio: float = 0.5
    fail_ratio: float = 0.25

    def __post_init__(self):
        if self.max_features < 8 or self.ransac_iterations < 1:
            raise ValueError("VoParams need max_features >= 8 and ransac_iterations >= 1")
        if not (self.quality_level > 0 and self.min_distance > 0 and self.ransac_threshold > 0):
            raise ValueError("quality_level, min_distance and ransac_threshold must be positive")
        if self.track_window < 3 or self.track_window % 2 == 0:
            raise ValueError("track_window must be odd and >= 3")


class Keypoint(NamedTuple):
    x: float
    y: float
    response: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def keypoint_array(kps) -> np.ndarray:
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2)


def _pixels(img) -> np.ndarray:
    return (img.pixels if isinstance(img, Frame) else np.asarray(img)).astype(np.float64)


# ---------------------------------------------------------------- corners


def shi_tomasi(img) -> np.ndarray:
    """Smaller eigenvalue of the gradient structure tensor summed over 3x3."""
    I = _pixels(img)
    gx, gy = gradients(I)
    a = ndimage.uniform_filter(gx * gx, 3, mode="nearest") * 9
    b = ndimage.uniform_filter(gx * gy, 3, mode="nearest") * 9
    c = ndimage.uniform_filter(gy * gy, 3, mode="nearest") * 9
    r = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return np.maximum(r, 0.0)


def _subpixel(r, y, x):
    """Parabolic peak offset along each axis, clipped to half a pixel."""
    h, w = r.shape
    dx = dy = 0.0
    if 0 < x < w - 1:
        den = r[y, x - 1] - 2 * r[y, x] + r[y, x + 1]
        if den < 0:
            dx = float(np.clip(0.5 * (r[y, x - 1] - r[y, x + 1]) / den, -0.5, 0.5))
    if 0 < y < h - 1:
        den = r[y - 1, x] - 2 * r[y, x] + r[y + 1, x]
        if den < 0:
            dy = float(np.clip(0.5 * (r[y - 1, x] - r[y + 1, x]) / den, -0.5, 0.5))
    return x + dx, y + dy


def detect_corners(frame, params: VoParams | None = None, mask=None) -> list[Keypoint]:
    """Local maxima of the Shi-Tomasi response, strongest first.

    Candidates below ``quality_level * max_response`` are dropped, then a
    greedy pass in (response desc, raster) order keeps points at least
    ``min_distance`` apart, up to ``max_features``. Pixels where ``mask`` is
    set are never candidates.
    """
    params = params or VoParams()
    I = _pixels(frame)
    if I.ndim != 2 or min(I.shape) < 16:
        raise DataError(f"corner detection needs a frame of at least 16x16, got {I.shape}")
    r = shi_tomasi(I)
    rmax = r.max()
    if rmax <= 0:
        return []
    peak = (r == ndimage.maximum_filter(r, size=3, mode="nearest")) & (r > params.quality_level * rmax)
    peak[:2], peak[-2:], peak[:, :2], peak[:, -2:] = False, False, False, False
    if mask is not None:
        peak &= ~np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(peak)  # raster order
    order = np.argsort(-r[ys, xs], kind="stable")
    ys, xs = ys[order], xs[order]

    cell = params.min_distance
    d2 = params.min_distance**2
    grid: dict[tuple[int, int], list] = {}
    out = []
    for y, x in zip(ys, xs):
        gx, gy = int(x // cell), int(y // cell)
        close = False
        for cx in (gx - 1, gx, gx + 1):
            for cy in (gy - 1, gy, gy + 1):
                for (px, py) in grid.get((cx, cy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < d2:
                        close = True
                        break
                if close:
                    break
            if close:
                break
        if close:
            continue
        grid.setdefault((gx, gy), []).append((x, y))
        sx, sy = _subpixel(r, y, x)
        out.append(Keypoint(sx, sy, float(r[y, x])))
        if len(out) >= params.max_features:
            break
    return out


# ---------------------------------------------------------------- tracking


def _pyramid(I, levels):
    pyr = [I]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 16:
            break
        pyr.append(downsample(pyr[-1]))
    return pyr


def _sample(img, x, y):
    return ndimage.map_coordinates(img, [y, x], order=1, mode="nearest")


def track_corners(f1, f2, points, params: VoParams | None = None):
    """Pyramidal Lucas-Kanade translation tracking.

    Returns ``(positions, valid)``. A track is invalid when its normal
    matrix is ill-conditioned, the estimate diverges or leaves the image,
    or the final mean absolute patch difference exceeds
    ``track_max_residual``.
    """
    params = params or VoParams()
    I1, I2 = _pixels(f1), _pixels(f2)
    if I1.shape != I2.shape:
        raise DataError(f"dimension mismatch: {I1.shape} vs {I2.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return pts.copy(), np.zeros(0, dtype=bool)
    h, w = I1.shape
    p1, p2 = _pyramid(I1, params.track_levels), _pyramid(I2, params.track_levels)
    nlev = len(p1)
    half = params.track_window // 2
    oy, ox = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    ox, oy = ox.ravel(), oy.ravel()

    d = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    for lvl in range(nlev - 1, -1, -1):
        A, B = p1[lvl], p2[lvl]
        s = 2.0**lvl
        base = (pts + 0.5) / s - 0.5  # box-pyramid coordinates
        X = base[:, :1] + ox
        Y = base[:, 1:] + oy
        gx, gy = gradients(A)
        T = _sample(A, X, Y)
        Gx, Gy = _sample(gx, X, Y), _sample(gy, X, Y)
        gxx, gxy, gyy = (Gx * Gx).sum(1), (Gx * Gy).sum(1), (Gy * Gy).sum(1)
        det = gxx * gyy - gxy * gxy
        min_eig = 0.5 * (gxx + gyy) - np.sqrt(0.25 * (gxx - gyy) ** 2 + gxy * gxy)
        good = min_eig > 1e-3 * len(ox)
        ok &= good
        det = np.where(good, det, 1.0)
        dl = d / s
        for _ in range(params.track_iterations):
            J = _sample(B, X + dl[:, :1], Y + dl[:, 1:])
            e = T - J
            bx, by = (Gx * e).sum(1), (Gy * e).sum(1)
            step = np.stack([(gyy * bx - gxy * by) / det, (gxx * by - gxy * bx) / det], axis=1)
            step[~ok] = 0.0
            dl += step
            if np.all(np.abs(step[ok]) < 0.01):
                break
        d = dl * s
        ok &= np.all(np.isfinite(d), axis=1) & (np.abs(d) < 0.5 * min(h, w)).all(axis=1)
        d[~ok] = 0.0

    out = pts + d
    inside = (out[:, 0] >= 0) & (out[:, 0] <= w - 1) & (out[:, 1] >= 0) & (out[:, 1] <= h - 1)
    T = _sample(I1, pts[:, :1] + ox, pts[:, 1:] + oy)
    J = _sample(I2, out[:, :1] + ox, out[:, 1:] + oy)
    resid = np.abs(T - J).mean(axis=1)
    valid = ok & inside & (resid <= params.track_max_residual)
    return out, valid


# ---------------------------------------------------------------- two-view geometry


def _homog(x):
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def project_essential(E) -> np.ndarray:
    """Closest essential matrix: singular values set to ``(s, s, 0)``."""
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[..., 0] + S[..., 1])
    D = np.zeros(S.shape)
    D[..., 0] = s
    D[..., 1] = s
    return (U * D[..., None, :]) @ Vt


def _eight_point(x1, x2):
    """Batched linear 8-point solve on normalized coordinates ``(..., n, 2)``."""
    a, b = x1[..., 0], x1[..., 1]
    c, d = x2[..., 0], x2[..., 1]
    one = np.ones_like(a)
    A = np.stack([c * a, c * b, c, d * a, d * b, d, a, b, one], axis=-1)
    _, _, Vt = np.linalg.svd(A, full_matrices=False) if A.shape[-2] >= 9 else np.linalg.svd(A)
    E = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    E = project_essential(E)
    return E / np.linalg.norm(E, axis=(-2, -1), keepdims=True)


def sampson_distance(E, x1, x2) -> np.ndarray:
    """First-order geometric epipolar error (normalized coordinates, not squared)."""
    X1, X2 = _homog(x1), _homog(x2)
    Ex1 = X1 @ np.swapaxes(E, -1, -2)  # rows E @ x1
    Etx2 = X2 @ E  # rows E^T @ x2
    num = (X2 * Ex1).sum(-1) ** 2
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(np.where(den > 0, num / den, np.inf))


def _canonical_sign(E):
    k = np.argmax(np.abs(E).ravel())
    return E if E.ravel()[k] >= 0 else -E


def _msac_cost(d, thr):
    return np.minimum(d * d, thr * thr).sum(axis=-1)


def _essential_from_params(R0, p):
    R = Rotation.from_rotvec(p[:3]).as_matrix() @ R0
    t = np.array([np.sin(p[3]) * np.cos(p[4]), np.sin(p[3]) * np.sin(p[4]), np.cos(p[3])])
    return skew(t) @ R


def refine_essential(E, x1, x2, thr: float):
    """Minimise a robust Sampson cost over ``(R, t-direction)``.

    Both rotations of the decomposition are used as starting points; the
    result with the lower MSAC cost wins. The output is exactly of the form
    ``[t]x R`` with unit Frobenius norm.
    """
    best_cost, best_E = np.inf, None
    for R0, t0 in decompose_essential(E)[::2]:
        p0 = np.array([0.0, 0.0, 0.0, np.arccos(np.clip(t0[2], -1.0, 1.0)), np.arctan2(t0[1], t0[0])])
        res = least_squares(
            lambda p, R0=R0: sampson_distance(_essential_from_params(R0, p), x1, x2),
            p0,
            loss="soft_l1",
            f_scale=thr / 3,
            ftol=1e-15,
            xtol=1e-15,
            gtol=1e-15,
            max_nfev=200,
        )
        Ec = _essential_from_params(R0, res.x)
        Ec /= np.linalg.norm(Ec)
        cost = _msac_cost(sampson_distance(Ec, x1, x2), thr)
        if cost < best_cost:
            best_cost, best_E = cost, Ec
    return best_E


def estimate_essential(pts1, pts2, K: Intrinsics, params: VoParams | None = None, rng=None):
    """RANSAC over 8-point hypotheses; returns ``(E, inliers)``.

    ``E`` relates normalized coordinates, ``x2^T E x1 = 0``, with unit
    Frobenius norm. Hypotheses are ranked by the truncated quadratic (MSAC)
    Sampson cost, which separates the sideways-translation and rotation
    explanations of a shallow scene far better than a bare inlier count.
    The winner is re-estimated on its inliers linearly and then by
    :func:`refine_essential`; each step is kept only if it lowers the cost.
    Inliers are correspondences with Sampson distance below the threshold.
    """
    params = params or VoParams()
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    n = len(pts1)
    if len(pts2) != n:
        raise DataError("correspondence arrays differ in length")
    if n < 8:
        raise DataError(f"essential matrix needs at least 8 correspondences, got {n}")
    x1, x2 = K.normalize(pts1), K.normalize(pts2)
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    thr = params.ransac_threshold

    samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(params.ransac_iterations)])
    best_cost, best_E = np.inf, None
    for start in range(0, len(samples), _SCORE_CHUNK):
        idx = samples[start : start + _SCORE_CHUNK]
        E = _eight_point(x1[idx], x2[idx])
        cost = _msac_cost(sampson_distance(E, x1, x2), thr)
        cost = np.where(np.isfinite(cost), cost, np.inf)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best_E = float(cost[k]), E[k]
    if best_E is None:
        raise NoConsensusError("no finite essential hypothesis")
    inl = sampson_distance(best_E, x1, x2) < thr
    if inl.sum() < MIN_INLIERS:
        raise NoConsensusError(f"best essential hypothesis has {int(inl.sum())} inliers (< {MIN_INLIERS})")

    E, cost = best_E, best_cost
    lin = _eight_point(x1[inl], x2[inl])
    c = _msac_cost(sampson_distance(lin, x1, x2), thr)
    if c <= cost:
        E, cost = lin, c
    inl = sampson_distance(E, x1, x2) < thr
    ref = refine_essential(E, x1[inl], x2[inl], thr)
    c = _msac_cost(sampson_distance(ref, x1, x2), thr)
    if c <= cost:
        E = ref
    inl = sampson_distance(E, x1, x2) < thr
    if inl.sum() < MIN_INLIERS:
        raise NoConsensusError(f"refined essential matrix has {int(inl.sum())} inliers (< {MIN_INLIERS})")
    return _canonical_sign(E), inl


def decompose_essential(E):
    """The four ``(R, t)`` candidates with ``x2 ~ R x1 + t`` and ``|t| = 1``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_midpoint(R, t, x1, x2):
    """Midpoint of the closest approach of the two rays, in camera-1 coordinates."""
    d1 = _homog(x1)
    d2 = _homog(x2) @ R  # R^T applied to each row
    c2 = -R.T @ t
    # minimise |l1 d1 - (c2 + l2 d2)|
    a = (d1 * d1).sum(1)
    b = (d1 * d2).sum(1)
    c = (d2 * d2).sum(1)
    e = d1 @ c2
    f = d2 @ c2
    den = a * c - b * b
    den = np.where(np.abs(den) < 1e-15, np.nan, den)
    l1 = (c * e - b * f) / den
    l2 = (b * e - a * f) / den
    return 0.5 * (l1[:, None] * d1 + c2 + l2[:, None] * d2)


def cheirality_count(R, t, x1, x2) -> int:
    X = triangulate_midpoint(R, t, x1, x2)
    z1 = X[:, 2]
    z2 = (X @ R.T + t)[:, 2]
    return int(np.count_nonzero((z1 > 0) & (z2 > 0)))


def _parallax(R, x1, x2) -> float:
    d1 = _homog(x1)
    d2 = _homog(x2) @ R
    cos = (d1 * d2).sum(1) / (np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1))
    return float(np.median(np.arccos(np.clip(cos, -1.0, 1.0))))


def recover_pose(E, pts1, pts2, K: Intrinsics, min_parallax: float = 1e-3) -> PoseSE3:
    """Relative pose ``X2 = R X1 + t`` (unit ``t``) chosen by cheirality.

    Raises :class:`DegenerateError` when the rotation-compensated rays show
    less than ``min_parallax`` radians of median parallax (no baseline) or
    when no candidate puts a majority of points in front of both cameras.
    """
    x1 = K.normalize(np.asarray(pts1, dtype=np.float64).reshape(-1, 2))
    x2 = K.normalize(np.asarray(pts2, dtype=np.float64).reshape(-1, 2))
    if len(x1) < 1:
        raise DataError("recover_pose needs at least one correspondence")
    cands = decompose_essential(np.asarray(E, dtype=np.float64))
    if min(_parallax(cands[0][0], x1, x2), _parallax(cands[2][0], x1, x2)) < min_parallax:
        raise DegenerateError("insufficient parallax: translation is not observable")
    counts = [cheirality_count(R, t, x1, x2) for R, t in cands]
    k = int(np.argmax(counts))
    if counts[k] <= 0.5 * len(x1):
        raise DegenerateError(f"no decomposition puts a majority in front ({counts[k]}/{len(x1)})")
    R, t = cands[k]
    return PoseSE3.from_rt(R, t)


# ---------------------------------------------------------------- odometry


@dataclass
class VoResult:
    trajectory: Trajectory
    log: list = field(default_factory=list)
    failed: bool = False

    @property
    def held(self) -> int:
        return sum(1 for e in self.log if e["held"])

    def to_dict(self) -> dict:
        return {"failed": self.failed, "held_pairs": self.held, "pairs": self.log}


def _in_mask(mask, pts) -> np.ndarray:
    h, w = mask.shape
    xi = np.clip(np.floor(pts[:, 0] + 0.5).astype(int), 0, w - 1)
    yi = np.clip(np.floor(pts[:, 1] + 0.5).astype(int), 0, h - 1)
    return mask[yi, xi]


def run_vo(frames, K: Intrinsics, params: VoParams | None = None, masks=None) -> VoResult:
    """Frame-to-frame odometry; ``P_{t+1} = P_t * relative^-1``, unit steps.

    With ``masks`` given, keypoints whose rounded position falls in the mask
    of either frame of a pair are discarded. A pair without a usable
    relative pose keeps the previous pose and is logged as held; the run is
    flagged failed when at least ``fail_ratio`` of the pairs are held.
    """
    params = params or VoParams()
    n = len(frames)
    if n < 2:
        raise DataError("visual odometry needs at least two frames")
    if masks is not None:
        if len(masks) != n:
            raise DataError(f"{n} frames but {len(masks)} masks")
        masks = [np.asarray(m, dtype=bool) for m in masks]

    poses = [PoseSE3.identity()]
    entries = []
    pts = np.zeros((0, 2))
    for t in range(n - 1):
        entry = {"pair": t, "redetected": False, "features": 0, "tracked": 0, "inliers": 0, "held": False, "reason": ""}
        if len(pts) < params.redetect_ratio * params.max_features:
            kps = detect_corners(frames[t], params, None if masks is None else masks[t])
            pts = keypoint_array(kps)
            entry["redetected"] = True
        if masks is not None and len(pts):
            pts = pts[~_in_mask(masks[t], pts)]
        entry["features"] = int(len(pts))
        nxt, valid = track_corners(frames[t], frames[t + 1], pts, params)
        if masks is not None and len(nxt):
            valid &= ~_in_mask(masks[t + 1], nxt)
        a, b = pts[valid], nxt[valid]
        entry["tracked"] = int(valid.sum())
        rel = None
        try:
            rng = np.random.default_rng(derive_seed(params.seed, "vo", t))
            E, inl = estimate_essential(a, b, K, params, rng)
            entry["inliers"] = int(inl.sum())
            rel = recover_pose(E, a[inl], b[inl], K, params.min_parallax)
        except (DataError, NoConsensusError, DegenerateError) as exc:
            entry["held"] = True
            entry["reason"] = str(exc)
            log.warning("pair %d held: %s", t, exc)
        poses.append(poses[-1] if rel is None else poses[-1] @ rel.inverse())
        entries.append(entry)
        pts = b

    traj = Trajectory.from_poses([f.timestamp for f in frames], poses)
    held = sum(e["held"] for e in entries)
    return VoResult(traj, entries, held >= params.fail_ratio * (n - 1))
