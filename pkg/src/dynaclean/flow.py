"""Coarse-to-fine Horn-Schunck optical flow, warping, forward-backward checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset_io import FlowField, Frame
from .errors import DataError

MIN_COARSE_SIZE = 8


@dataclass
class FlowParams:
    """Horn-Schunck settings.

    ``alpha`` is expressed in 8-bit intensity units: images are scaled to
    [0, 1] internally and the effective weight is ``alpha / 255``.
    """

    levels: int = 4
    alpha: float = 15.0
    iterations: int = 200
    downscale: int = 2

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1 or not self.alpha > 0:
            raise ValueError("FlowParams need levels >= 1, iterations >= 1, alpha > 0")
        if self.downscale != 2:
            raise ValueError("only a downscale factor of 2 is supported")


def _as_float(img) -> np.ndarray:
    px = img.pixels if isinstance(img, Frame) else np.asarray(img)
    if px.dtype == np.uint8:
        return px.astype(np.float64) / 255.0
    return px.astype(np.float64)


def _check_same(a, b):
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise DataError(f"dimension mismatch: {tuple(sa)} vs {tuple(sb)}")


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box average; odd sizes are padded by edge replication."""
    h, w = img.shape
    p = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def upsample_flow(u: np.ndarray, v: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear x2 upsampling of a flow field, values doubled."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [(yy + 0.5) / 2 - 0.5, (xx + 0.5) / 2 - 0.5]
    uu = ndimage.map_coordinates(u, coords, order=1, mode="nearest")
    vv = ndimage.map_coordinates(v, coords, order=1, mode="nearest")
    return 2 * uu, 2 * vv


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` at real positions; returns ``(values, inside)``.

    Positions outside ``[0, w-1] x [0, h-1]`` are flagged and sampled with
    edge clamping.
    """
    h, w = img.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(np.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0), 0, w - 1)
    yc = np.clip(np.nan_to_num(y, nan=0.0, posinf=0.0, neginf=0.0), 0, h - 1)
    vals = ndimage.map_coordinates(np.asarray(img, dtype=np.float64), [yc, xc], order=1, mode="nearest")
    return vals, inside & np.isfinite(x) & np.isfinite(y)


def pixel_grid(shape) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences ``(I(x+1) - I(x-1)) / 2`` with replicated edges."""
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


def _neighbor_sum(a: np.ndarray) -> np.ndarray:
    s = np.zeros_like(a)
    s[1:] += a[:-1]
    s[:-1] += a[1:]
    s[:, 1:] += a[:, :-1]
    s[:, :-1] += a[:, 1:]
    return s


def _neighbor_count(shape) -> np.ndarray:
    return _neighbor_sum(np.ones(shape))


def hs_energy(Ix, Iy, c, u, v, alpha2: float) -> float:
    """Linearized Horn-Schunck energy.

    ``sum (Ix u + Iy v + c)^2 + alpha2 * sum over 4-neighbor edges of
    (du^2 + dv^2)``.
    """
    data = ((Ix * u + Iy * v + c) ** 2).sum()
    smooth = sum(
        (np.diff(f, axis=ax) ** 2).sum() for f in (u, v) for ax in (0, 1)
    )
    return float(data + alpha2 * smooth)


def horn_schunck(I1, I2, alpha: float, iterations: int, u0=None, v0=None, energy_trace=None):
    """Jacobi relaxation of the Horn-Schunck Euler-Lagrange equations.

    ``I2`` should already be warped by the initial flow ``(u0, v0)``; the
    data term is linearized around it. Each sweep solves every pixel's 2x2
    system given the previous sweep's neighbor average, which never
    increases :func:`hs_energy`. Pass a list as ``energy_trace`` to record
    the energy before the first and after every sweep.
    """
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    _check_same(I1, I2)
    shape = I1.shape
    u0 = np.zeros(shape) if u0 is None else np.asarray(u0, dtype=np.float64)
    v0 = np.zeros(shape) if v0 is None else np.asarray(v0, dtype=np.float64)
    g1x, g1y = gradients(I1)
    g2x, g2y = gradients(I2)
    Ix = 0.5 * (g1x + g2x)
    Iy = 0.5 * (g1y + g2y)
    c = (I2 - I1) - Ix * u0 - Iy * v0
    alpha2 = alpha * alpha
    denom_base = _neighbor_count(shape)
    a = denom_base * alpha2
    denom = a + Ix * Ix + Iy * Iy
    u, v = u0.copy(), v0.copy()
    if energy_trace is not None:
        energy_trace.append(hs_energy(Ix, Iy, c, u, v, alpha2))
    for _ in range(iterations):
        ubar = _neighbor_sum(u) / denom_base
        vbar = _neighbor_sum(v) / denom_base
        t = (Ix * ubar + Iy * vbar + c) / denom
        u = ubar - Ix * t
        v = vbar - Iy * t
        if energy_trace is not None:
            energy_trace.append(hs_energy(Ix, Iy, c, u, v, alpha2))
    return u, v


def _clamp_levels(shape, levels: int) -> int:
    while levels > 1 and min(shape) // 2 ** (levels - 1) < MIN_COARSE_SIZE:
        levels -= 1
    return levels


def warp_array(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    xx, yy = pixel_grid(img.shape)
    return bilinear(img, xx + u, yy + v)


def dense_flow(f1, f2, params: FlowParams | None = None, energy_trace=None) -> FlowField:
    """Flow ``w`` with ``f1(x) ~ f2(x + w(x))``.

    Pyramid of 2x2 box averages; at each level ``f2`` is warped by the
    current estimate and Horn-Schunck refines it. ``energy_trace`` (a list)
    receives the per-sweep energies of the coarsest level.
    """
    params = params or FlowParams()
    _check_same(f1, f2)
    I1, I2 = _as_float(f1), _as_float(f2)
    levels = _clamp_levels(I1.shape, params.levels)
    pyr1, pyr2 = [I1], [I2]
    for _ in range(levels - 1):
        pyr1.append(downsample(pyr1[-1]))
        pyr2.append(downsample(pyr2[-1]))

    alpha = params.alpha / 255.0
    u = v = None
    for lvl in range(levels - 1, -1, -1):
        A, B = pyr1[lvl], pyr2[lvl]
        if u is None:
            u, v = np.zeros(A.shape), np.zeros(A.shape)
        else:
            u, v = upsample_flow(u, v, A.shape)
        Bw, _ = warp_array(B, u, v)
        trace = energy_trace if lvl == levels - 1 else None
        u, v = horn_schunck(A, Bw, alpha, params.iterations, u, v, energy_trace=trace)
    return FlowField(u, v)


def warp_image(img: Frame, flow: FlowField) -> tuple[Frame, np.ndarray]:
    """Backward warp ``out(x) = img(x + flow(x))``; returns ``(frame, valid)``.

    Samples falling outside the image are invalid and set to 0.
    """
    _check_same(img, flow)
    vals, valid = warp_array(_as_float(img) * 255.0, flow.u, flow.v)
    out = np.where(valid, np.clip(np.floor(vals + 0.5), 0, 255), 0).astype(np.uint8)
    return Frame(out, img.index, img.timestamp), valid


def flow_consistency(fwd: FlowField, bwd: FlowField) -> np.ndarray:
    """``|fwd(x) + bwd(x + fwd(x))|``; ``inf`` where the lookup leaves the image."""
    _check_same(fwd, bwd)
    xx, yy = pixel_grid(fwd.shape)
    x2, y2 = xx + fwd.u, yy + fwd.v
    bu, inside = bilinear(bwd.u, x2, y2)
    bv, _ = bilinear(bwd.v, x2, y2)
    err = np.hypot(fwd.u + bu, fwd.v + bv)
    return np.where(inside, err, np.inf)


def compose_flows(first: FlowField, second: FlowField) -> FlowField:
    """Chain ``a -> b`` with ``b -> c`` into ``a -> c``.

    Lookups outside the image are clamped to the border.
    """
    _check_same(first, second)
    xx, yy = pixel_grid(first.shape)
    x2, y2 = xx + first.u, yy + first.v
    su, _ = bilinear(second.u, x2, y2)
    sv, _ = bilinear(second.v, x2, y2)
    return FlowField(first.u + su, first.v + sv)


def sequence_flows(frames, params: FlowParams | None = None, backward: bool = True):
    """Pairwise flows of a sequence.

    Returns ``(fwd, bwd)`` where ``fwd[t]`` maps frame t to t+1 and
    ``bwd[t]`` maps frame t+1 back to t (``bwd`` is empty when
    ``backward`` is false).
    """
    params = params or FlowParams()
    fwd = [dense_flow(a, b, params) for a, b in zip(frames[:-1], frames[1:])]
    bwd = [dense_flow(b, a, params) for a, b in zip(frames[:-1], frames[1:])] if backward else []
    return fwd, bwd
