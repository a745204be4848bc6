"""Flow-guided video inpainting with a Laplace fallback, and PSNR/SSIM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset_io import FlowField, Frame
from .errors import DataError
from .flow import FlowParams, bilinear, pixel_grid, sequence_flows
from .segmentation import dilate

PSNR_CAP = 99.0


@dataclass
class InpaintParams:
    max_hops: int = 10
    diffusion_tol: float = 1e-3
    diffusion_max_iters: int = 10000
    consistency_thresh: float = 1.0
    # flow inside masks (plus this margin) is replaced by a smooth completion;
    # Horn-Schunck smoothing drags object motion several pixels outward
    flow_margin: int = 12

    def __post_init__(self):
        if self.max_hops < 1 or not self.diffusion_tol > 0:
            raise ValueError("InpaintParams need max_hops >= 1 and diffusion_tol > 0")


# ---------------------------------------------------------------- Laplace


def _jacobi(u, holes, nb_count, tol, max_iters):
    """Jacobi sweeps on ``holes`` until the largest update is below ``tol``."""
    hy, hx = np.nonzero(holes)
    it = 0
    while it < max_iters:
        s = np.zeros_like(u)
        s[1:] += u[:-1]
        s[:-1] += u[1:]
        s[:, 1:] += u[:, :-1]
        s[:, :-1] += u[:, 1:]
        new = s[hy, hx] / nb_count[hy, hx]
        delta = np.abs(new - u[hy, hx]).max()
        u[hy, hx] = new
        it += 1
        if delta < tol:
            break
    return it


def _restrict(vals, holes):
    h, w = vals.shape
    ph, pw = h % 2, w % 2
    known = np.pad(~holes, ((0, ph), (0, pw)), constant_values=False).astype(np.float64)
    v = np.pad(np.where(holes, 0.0, vals), ((0, ph), (0, pw)))
    cnt = known[0::2, 0::2] + known[1::2, 0::2] + known[0::2, 1::2] + known[1::2, 1::2]
    tot = v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2]
    coarse_holes = cnt == 0
    return np.where(coarse_holes, 0.0, tot / np.maximum(cnt, 1)), coarse_holes


def _solve(vals, holes, tol, max_iters):
    h, w = vals.shape
    u = vals.astype(np.float64).copy()
    iters = 0
    depth = ndimage.distance_transform_cdt(holes, metric="taxicab").max()
    if depth > 4 and min(h, w) >= 8:
        cv, ch = _restrict(vals, holes)
        coarse, iters = _solve(cv, ch, tol, max_iters)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        up = ndimage.map_coordinates(coarse, [(yy + 0.5) / 2 - 0.5, (xx + 0.5) / 2 - 0.5], order=1, mode="nearest")
        u[holes] = up[holes]
    else:
        ring = dilate(holes, 1) & ~holes
        u[holes] = vals[ring].mean() if ring.any() else 0.0
    nb = np.zeros((h, w))
    nb[1:] += 1
    nb[:-1] += 1
    nb[:, 1:] += 1
    nb[:, :-1] += 1
    iters += _jacobi(u, holes, nb, tol, max_iters)
    return u, iters


def solve_laplace(values, holes, tol: float, max_iters: int = 10000):
    """Harmonic fill of ``values`` over ``holes`` (Dirichlet data elsewhere).

    Hole pixels on the image border see replicated edges. The fine-level
    Jacobi iteration is started from the solution of the same problem on a
    2x coarser grid (recursively) and stops once no pixel moves by ``tol``
    or more. Returns ``(filled, total_iterations)``.
    """
    vals = np.asarray(values, dtype=np.float64)
    holes = np.asarray(holes, dtype=bool)
    if vals.shape != holes.shape:
        raise DataError("holes mask does not match the image")
    if not holes.any():
        return vals.copy(), 0
    if holes.all():
        raise DataError("nothing to diffuse from: every pixel is a hole")
    ys, xs = np.nonzero(holes)
    y0, y1 = max(ys.min() - 1, 0), min(ys.max() + 2, vals.shape[0])
    x0, x1 = max(xs.min() - 1, 0), min(xs.max() + 2, vals.shape[1])
    out = vals.copy()
    sub, iters = _solve(vals[y0:y1, x0:x1], holes[y0:y1, x0:x1], tol, max_iters)
    out[y0:y1, x0:x1] = sub
    return out, iters


def laplace_residual(u, holes) -> np.ndarray:
    """``|n u - sum of in-image neighbors|`` at hole pixels (n = neighbor count)."""
    s = np.zeros_like(u)
    nb = np.zeros_like(u)
    for sl_dst, sl_src in (
        ((slice(1, None),), (slice(None, -1),)),
        ((slice(None, -1),), (slice(1, None),)),
        ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
        ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
    ):
        s[sl_dst] += u[sl_src]
        nb[sl_dst] += 1
    return np.abs(nb * u - s)[holes]


def diffuse_fill(frame: Frame, holes, params: InpaintParams | None = None) -> Frame:
    """Fill ``holes`` with the discrete harmonic interpolant of their surroundings."""
    params = params or InpaintParams()
    holes = np.asarray(holes, dtype=bool)
    if not holes.any():
        return frame.with_pixels(frame.pixels.copy())
    filled, _ = solve_laplace(frame.pixels, holes, params.diffusion_tol * 255.0, params.diffusion_max_iters)
    out = frame.pixels.copy()
    out[holes] = np.clip(np.floor(filled[holes] + 0.5), 0, 255).astype(np.uint8)
    return frame.with_pixels(out)


def complete_flow(flow: FlowField, region, tol: float = 1e-3, max_iters: int = 10000) -> FlowField:
    """Replace ``flow`` inside ``region`` by a harmonic fill from its border."""
    region = np.asarray(region, dtype=bool)
    if not region.any() or region.all():
        return flow
    u, _ = solve_laplace(flow.u, region, tol, max_iters)
    v, _ = solve_laplace(flow.v, region, tol, max_iters)
    return FlowField(u, v)


# ---------------------------------------------------------------- propagation


def _check_inputs(frames, masks):
    if len(frames) != len(masks):
        raise DataError(f"{len(frames)} frames but {len(masks)} masks")
    for f, m in zip(frames, masks):
        if np.shape(m) != f.shape or f.shape != frames[0].shape:
            raise DataError("frame/mask dimension mismatch")


def _completed_flows(frames, masks, params, flows, flow_params):
    n = len(frames)
    if flows is None:
        flows = sequence_flows(frames, flow_params or FlowParams(), backward=True)
    fwd, bwd = flows
    grown = [dilate(np.asarray(m, bool), params.flow_margin) for m in masks]
    fwd_c = [complete_flow(fwd[t], grown[t]) for t in range(n - 1)]
    bwd_c = [complete_flow(bwd[t], grown[t + 1]) for t in range(n - 1)]
    return fwd_c, bwd_c


def _step(px, py, alive, flow_a, flow_b, thresh):
    """Advance positions one frame along ``flow_a``; ``flow_b`` is its reverse."""
    du, ok_a = bilinear(flow_a.u, px, py)
    dv, _ = bilinear(flow_a.v, px, py)
    nx, ny = px + du, py + dv
    bu, ok_b = bilinear(flow_b.u, nx, ny)
    bv, _ = bilinear(flow_b.v, nx, ny)
    consistent = np.hypot(du + bu, dv + bv) <= thresh
    return nx, ny, alive & ok_a & ok_b & consistent


def _donor_free(mask, x, y):
    """True where none of the 4 bilinear support pixels is masked."""
    h, w = mask.shape
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ~(mask[y0, x0] | mask[y0, x1] | mask[y1, x0] | mask[y1, x1])


def propagate_pixels(frames, masks, params: InpaintParams | None = None, flows=None, flow_params=None):
    """Copy masked pixels from the nearest frame that sees them.

    For every masked pixel of frame t the hops t+1, t-1, t+2, t-2, ... up to
    ``max_hops`` are tried in turn by chaining pairwise flows. A donor is
    accepted when the chain stayed inside the image and forward-backward
    consistent at every step and the landing point is unmasked in the donor
    frame. Returns ``(frames, residual_holes)``.

    ``flows`` may pass precomputed ``(fwd, bwd)`` from
    :func:`dynaclean.flow.sequence_flows`; flow inside the masks is replaced by
    a smooth completion before chaining.
    """
    params = params or InpaintParams()
    _check_inputs(frames, masks)
    masks = [np.asarray(m, dtype=bool) for m in masks]
    n = len(frames)
    out = [f.with_pixels(f.pixels.copy()) for f in frames]
    holes = [m.copy() for m in masks]
    if n < 2 or not any(m.any() for m in masks):
        return out, holes
    fwd, bwd = _completed_flows(frames, masks, params, flows, flow_params)
    data = [f.pixels.astype(np.float64) for f in frames]

    for t in range(n):
        ys, xs = np.nonzero(masks[t])
        if len(ys) == 0:
            continue
        x0, y0 = xs.astype(np.float64), ys.astype(np.float64)
        value = np.zeros(len(ys))
        filled = np.zeros(len(ys), dtype=bool)
        chains = {
            +1: [x0.copy(), y0.copy(), np.ones(len(ys), bool)],
            -1: [x0.copy(), y0.copy(), np.ones(len(ys), bool)],
        }
        for hop in range(1, params.max_hops + 1):
            for sgn in (+1, -1):
                s = t + sgn * hop
                if not 0 <= s < n:
                    continue
                px, py, alive = chains[sgn]
                if sgn > 0:
                    px, py, alive = _step(px, py, alive, fwd[s - 1], bwd[s - 1], params.consistency_thresh)
                else:
                    px, py, alive = _step(px, py, alive, bwd[s], fwd[s], params.consistency_thresh)
                chains[sgn] = [px, py, alive]
                take = alive & ~filled & _donor_free(masks[s], px, py)
                if take.any():
                    vals, _ = bilinear(data[s], px[take], py[take])
                    value[take] = vals
                    filled |= take
            if filled.all():
                break
        px_out = out[t].pixels
        px_out[ys[filled], xs[filled]] = np.clip(np.floor(value[filled] + 0.5), 0, 255).astype(np.uint8)
        holes[t][ys[filled], xs[filled]] = False
    return out, holes


def inpaint_sequence(frames, masks, params: InpaintParams | None = None, flows=None, flow_params=None) -> list[Frame]:
    """Temporal propagation, then Laplace fill of whatever is left."""
    params = params or InpaintParams()
    out, holes = propagate_pixels(frames, masks, params, flows, flow_params)
    return [diffuse_fill(f, hl, params) if hl.any() else f for f, hl in zip(out, holes)]


# ---------------------------------------------------------------- metrics


def psnr(a: Frame, b: Frame, region=None) -> float:
    pa = a.pixels if isinstance(a, Frame) else np.asarray(a)
    pb = b.pixels if isinstance(b, Frame) else np.asarray(b)
    if pa.shape != pb.shape:
        raise DataError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    diff = pa.astype(np.float64) - pb.astype(np.float64)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != pa.shape:
            raise DataError("region does not match image size")
        if not region.any():
            raise DataError("empty PSNR region")
        diff = diff[region]
    mse = np.mean(diff**2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP))


SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def _box_sum(a, k):
    c = np.pad(a, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def ssim(a: Frame, b: Frame) -> float:
    """Mean SSIM over all 8x8 windows (stride 1), population statistics."""
    pa = (a.pixels if isinstance(a, Frame) else np.asarray(a)).astype(np.float64)
    pb = (b.pixels if isinstance(b, Frame) else np.asarray(b)).astype(np.float64)
    if pa.shape != pb.shape:
        raise DataError(f"dimension mismatch: {pa.shape} vs {pb.shape}")
    k = SSIM_WINDOW
    if min(pa.shape) < k:
        raise DataError(f"SSIM needs images of at least {k}x{k}")
    n = k * k
    # centre the data first to keep the box sums well conditioned
    off = 0.5 * (pa.mean() + pb.mean())
    xa, xb = pa - off, pb - off
    ma = _box_sum(xa, k) / n
    mb = _box_sum(xb, k) / n
    va = _box_sum(xa * xa, k) / n - ma * ma
    vb = _box_sum(xb * xb, k) / n - mb * mb
    cov = _box_sum(xa * xb, k) / n - ma * mb
    ma, mb = ma + off, mb + off
    s = ((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)) / ((ma**2 + mb**2 + SSIM_C1) * (va + vb + SSIM_C2))
    return float(s.mean())
