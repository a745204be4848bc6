"""Binary dynamic-object masks from ego-motion residuals."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .dataset_io import FlowField
from .egomotion import RansacParams, ransac_dominant_motion, residual_map
from .errors import DataError, NoConsensusError
from .flow import FlowParams, compose_flows, sequence_flows
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class SegParams:
    mad_k: float = 6.0
    min_area: int = 64
    morph_radius: int = 2
    vote_window: int = 5
    vote_quorum: float = 0.5

    def __post_init__(self):
        if not self.mad_k > 0:
            raise ValueError("mad_k must be positive")
        if self.vote_window < 1 or self.vote_window % 2 == 0:
            raise ValueError("vote_window must be odd and >= 1")
        if not 0 < self.vote_quorum <= 1:
            raise ValueError("vote_quorum must lie in (0, 1]")
        if self.morph_radius < 0 or self.min_area < 0:
            raise ValueError("morph_radius and min_area must be nonnegative")


class Component(NamedTuple):
    area: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int


def threshold_residuals(residuals, params: SegParams | float | None = None) -> np.ndarray:
    """Pixels with ``r > median + mad_k * MAD`` are dynamic.

    Statistics use the finite residuals. An ``inf`` pixel is dynamic only if
    the median of its 8 neighbors exceeds the threshold. A MAD below 1e-6
    means no evidence of independent motion and gives an empty mask.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise DataError("empty residual map")
    k = params.mad_k if isinstance(params, SegParams) else (6.0 if params is None else float(params))
    finite = np.isfinite(r)
    if not finite.any():
        return np.zeros(r.shape, dtype=bool)
    vals = r[finite]
    med = np.median(vals)
    mad = np.median(np.abs(vals - med))
    if mad < 1e-6:
        return np.zeros(r.shape, dtype=bool)
    thr = med + k * mad
    mask = finite & (r > thr)
    h, w = r.shape
    for y, x in zip(*np.nonzero(np.isinf(r))):
        nb = r[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].ravel().tolist()
        nb.remove(r[y, x])
        if nb and np.median(nb) > thr:
            mask[y, x] = True
    return mask


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="nearest")


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.minimum_filter(mask, size=2 * radius + 1, mode="nearest")


def morph_clean(mask: np.ndarray, radius: int) -> np.ndarray:
    """Closing then opening with a ``(2r+1)^2`` square; borders replicate."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    closed = erode(dilate(mask, radius), radius)
    return dilate(erode(closed, radius), radius)


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(mask: np.ndarray, min_area: int = 0) -> tuple[np.ndarray, list[Component]]:
    """8-connected components; those smaller than ``min_area`` are dropped.

    Components are listed by area, largest first; ties keep raster order of
    each component's first pixel.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)
    if n == 0:
        return np.zeros(labels.shape, dtype=bool), []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    comps = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if keep[lab]:
            comps.append((int(areas[lab]), lab, Component(int(areas[lab]), sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1)))
    comps.sort(key=lambda c: (-c[0], c[1]))
    return keep[labels], [c[2] for c in comps]


def temporal_vote(masks, flows, center: int, quorum: float = 0.5) -> np.ndarray:
    """Majority vote of neighbor masks pulled into the center frame.

    ``flows[k]`` maps center pixels to their position in frame ``k`` (the
    entry at ``center`` is ignored). Neighbor masks are sampled at the
    rounded position; samples outside the image abstain.
    """
    if len(masks) != len(flows):
        raise DataError(f"{len(masks)} masks but {len(flows)} flows")
    if not 0 <= center < len(masks):
        raise DataError("center outside window")
    ref = np.asarray(masks[center], dtype=bool)
    h, w = ref.shape
    votes = ref.astype(np.int32)
    voters = np.ones((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    for k, (m, fl) in enumerate(zip(masks, flows)):
        if k == center:
            continue
        m = np.asarray(m, dtype=bool)
        if m.shape != ref.shape or fl.shape != ref.shape:
            raise DataError("mask/flow dimension mismatch in window")
        xs = np.floor(xx + fl.u + 0.5)
        ys = np.floor(yy + fl.v + 0.5)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        xi = np.where(ok, xs, 0).astype(int)
        yi = np.where(ok, ys, 0).astype(int)
        votes += (ok & m[yi, xi]).astype(np.int32)
        voters += ok.astype(np.int32)
    return votes >= quorum * voters


def chained_flows(fwd, bwd, center: int, lo: int, hi: int) -> list[FlowField]:
    """Center-to-frame flows for frames ``lo..hi`` (inclusive).

    ``fwd[t]`` maps frame t to t+1 and ``bwd[t]`` maps frame t+1 to t.
    """
    shape = (fwd[0] if fwd else bwd[0]).shape
    out: dict[int, FlowField] = {center: FlowField.zeros(*shape)}
    acc = None
    for j in range(center + 1, hi + 1):
        acc = fwd[j - 1] if acc is None else compose_flows(acc, fwd[j - 1])
        out[j] = acc
    acc = None
    for j in range(center - 1, lo - 1, -1):
        acc = bwd[j] if acc is None else compose_flows(acc, bwd[j])
        out[j] = acc
    return [out[j] for j in range(lo, hi + 1)]


def pairwise_mask(flow: FlowField, ransac_params: RansacParams, seg_params: SegParams) -> np.ndarray:
    """Residual threshold, morphology and area filter for one frame pair."""
    model, _ = ransac_dominant_motion(flow, ransac_params)
    mask = threshold_residuals(residual_map(flow, model), seg_params)
    mask = morph_clean(mask, seg_params.morph_radius)
    mask, _ = connected_components(mask, seg_params.min_area)
    return mask


def detect_dynamic_masks(
    frames,
    flow_params: FlowParams | None = None,
    ransac_params: RansacParams | None = None,
    seg_params: SegParams | None = None,
    flows=None,
    warnings: list | None = None,
) -> list[np.ndarray]:
    """Per-frame dynamic masks for a sequence of at least two frames.

    ``flows`` may carry precomputed ``(fwd, bwd)`` lists as returned by
    :func:`dynaclean.flow.sequence_flows`. Frames whose RANSAC fails get an
    empty pairwise mask; their indices are appended to ``warnings``.
    """
    flow_params = flow_params or FlowParams()
    ransac_params = ransac_params or RansacParams()
    seg_params = seg_params or SegParams()
    n = len(frames)
    if n < 2:
        raise DataError("dynamic-object detection needs at least two frames")
    need_bwd = seg_params.vote_window > 1
    if flows is None:
        flows = sequence_flows(frames, flow_params, backward=need_bwd)
    fwd, bwd = flows

    pair_masks = []
    for t in range(n - 1):
        rp = RansacParams(
            ransac_params.iterations,
            ransac_params.inlier_threshold,
            ransac_params.sample_size,
            derive_seed(ransac_params.seed, "ransac", t),
        )
        try:
            pair_masks.append(pairwise_mask(fwd[t], rp, seg_params))
        except NoConsensusError as exc:
            log.warning("frame %d: no dominant motion (%s); using an empty mask", t, exc)
            if warnings is not None:
                warnings.append(t)
            pair_masks.append(np.zeros(fwd[t].shape, dtype=bool))
    pair_masks.append(pair_masks[-1].copy())

    if not need_bwd:
        return pair_masks
    half = seg_params.vote_window // 2
    out = []
    for t in range(n):
        lo, hi = max(0, t - half), min(n - 1, t + half)
        chain = chained_flows(fwd, bwd, t, lo, hi)
        out.append(temporal_vote(pair_masks[lo : hi + 1], chain, t - lo, seg_params.vote_quorum))
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union
