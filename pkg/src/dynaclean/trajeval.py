"""Absolute and relative pose error, run comparisons and their text/plot outputs."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset_io import Trajectory, associate_timestamps
from .errors import DataError
from .geometry import rotation_angle, umeyama_align


class AlignMode(str, Enum):
    NONE = "none"
    SE3 = "se3"
    SIM3 = "sim3"


@dataclass(frozen=True)
class ErrorStats:
    rmse: float
    mean: float
    median: float
    std: float
    min: float
    max: float
    n: int

    @classmethod
    def from_errors(cls, errors) -> "ErrorStats":
        e = np.asarray(errors, dtype=np.float64).reshape(-1)
        if e.size == 0:
            raise DataError("no errors to summarize")
        return cls(
            rmse=float(np.sqrt(np.mean(e * e))),
            mean=float(e.mean()),
            median=float(np.median(e)),
            std=float(e.std()),
            min=float(e.min()),
            max=float(e.max()),
            n=int(e.size),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ErrorSeries:
    """Per-pose errors with the reference timestamps they belong to."""

    timestamps: np.ndarray
    errors: np.ndarray

    def __len__(self) -> int:
        return len(self.errors)


def _associated(reference: Trajectory, estimate: Trajectory, max_diff: float, need: int):
    pairs = associate_timestamps(reference, estimate, max_diff)
    if len(pairs) < need:
        raise DataError(f"only {len(pairs)} associated poses (need {need})")
    i = np.array([p[0] for p in pairs])
    j = np.array([p[1] for p in pairs])
    return reference.subset(i), estimate.subset(j)


def ape(reference: Trajectory, estimate: Trajectory, mode: AlignMode | str = AlignMode.SIM3, max_diff: float = 0.02):
    """Translational absolute pose error after optional alignment.

    Returns ``(ErrorStats, ErrorSeries)``. ``mode`` is ``none``, ``se3`` or
    ``sim3``; alignment maps estimate positions onto the reference with
    Umeyama's method.
    """
    mode = AlignMode(mode)
    ref, est = _associated(reference, estimate, max_diff, 3)
    p_est = est.positions
    if mode is not AlignMode.NONE:
        S = umeyama_align(p_est, ref.positions, with_scale=mode is AlignMode.SIM3)
        p_est = S.apply(p_est)
    err = np.linalg.norm(ref.positions - p_est, axis=1)
    return ErrorStats.from_errors(err), ErrorSeries(ref.timestamps.copy(), err)


def scale_to_reference(reference: Trajectory, estimate: Trajectory, max_diff: float = 0.02) -> Trajectory:
    """Estimate with positions multiplied by the sim3 alignment scale.

    Monocular runs have an arbitrary global scale, so their RPE translation
    part is only meaningful after this. Rotations and timestamps are kept.
    """
    ref, est = _associated(reference, estimate, max_diff, 3)
    s = umeyama_align(est.positions, ref.positions, with_scale=True).scale
    return Trajectory(estimate.timestamps.copy(), estimate.quats.copy(), estimate.positions * s)


def relative_errors(reference: Trajectory, estimate: Trajectory, delta: int = 1):
    """``E_i = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d})`` for already associated poses."""
    Q, P = reference.matrices(), estimate.matrices()
    n = len(Q)
    Qi, Qj = Q[: n - delta], Q[delta:]
    Pi, Pj = P[: n - delta], P[delta:]
    dQ = np.linalg.inv(Qi) @ Qj
    dP = np.linalg.inv(Pi) @ Pj
    return np.linalg.inv(dQ) @ dP


def rpe(
    reference: Trajectory,
    estimate: Trajectory,
    delta: int = 1,
    part: str = "trans",
    max_diff: float = 0.02,
):
    """Relative pose error over ``delta`` associated poses, no alignment.

    ``part="trans"`` gives the translation norm of each error pose (trajectory
    units), ``part="rot"`` its rotation angle in degrees.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if part not in ("trans", "rot"):
        raise ValueError(f"part must be 'trans' or 'rot', got {part!r}")
    ref, est = _associated(reference, estimate, max_diff, delta + 1)
    E = relative_errors(ref, est, delta)
    if part == "trans":
        err = np.linalg.norm(E[:, :3, 3], axis=1)
    else:
        err = np.degrees(rotation_angle(E[:, :3, :3]))
    return ErrorStats.from_errors(err), ErrorSeries(ref.timestamps[: len(err)].copy(), err)


# ---------------------------------------------------------------- comparisons


@dataclass(frozen=True)
class MetricComparison:
    baseline: float
    processed: float
    delta: float
    improved: bool


@dataclass(frozen=True)
class RunComparison:
    ape: MetricComparison
    rpe: MetricComparison
    sequence: str = ""

    def to_dict(self) -> dict:
        """Flat JSON layout used by the reports."""
        return {
            "sequence": self.sequence,
            "ape_baseline": self.ape.baseline,
            "rpe_baseline": self.rpe.baseline,
            "ape": self.ape.processed,
            "rpe": self.rpe.processed,
            "ape_delta": self.ape.delta,
            "rpe_delta": self.rpe.delta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunComparison":
        return compare_values(d["ape_baseline"], d["rpe_baseline"], d["ape"], d["rpe"], d.get("sequence", ""))


def _metric(base: float, proc: float) -> MetricComparison:
    delta = float(proc) - float(base)
    return MetricComparison(float(base), float(proc), delta, delta < 0)


def compare_values(ape_base: float, rpe_base: float, ape_proc: float, rpe_proc: float, sequence: str = "") -> RunComparison:
    return RunComparison(_metric(ape_base, ape_proc), _metric(rpe_base, rpe_proc), sequence)


def compare_runs(baseline, processed, sequence: str = "") -> RunComparison:
    """Deltas ``processed - baseline`` of the RMSE of (APE, RPE) pairs.

    Each side is an ``(ape, rpe)`` pair of :class:`ErrorStats` or plain
    numbers.
    """
    def rmse(x):
        return x.rmse if isinstance(x, ErrorStats) else float(x)

    (ab, rb), (ap, rp) = baseline, processed
    return compare_values(rmse(ab), rmse(rb), rmse(ap), rmse(rp), sequence)


TABLE_HEADERS = ("Sequence", "APE(Baseline)", "RPE(Baseline)", "APE", "RPE")


def format_table(rows, digits: int = 6) -> str:
    """Column-aligned text table of comparisons; deltas follow in brackets."""
    body = []
    for r in rows:
        c = r if isinstance(r, RunComparison) else RunComparison.from_dict(r)
        body.append(
            (
                c.sequence,
                f"{c.ape.baseline:.{digits}f}",
                f"{c.rpe.baseline:.{digits}f}",
                f"{c.ape.processed:.{digits}f} ({c.ape.delta:+.{digits}f})",
                f"{c.rpe.processed:.{digits}f} ({c.rpe.delta:+.{digits}f})",
            )
        )
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(TABLE_HEADERS)]
    fmt = lambda cells: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(TABLE_HEADERS), "-+-".join("-" * w for w in widths)]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def comparison_json(rows) -> str:
    return json.dumps([r.to_dict() if isinstance(r, RunComparison) else r for r in rows], indent=2) + "\n"


# ---------------------------------------------------------------- emission


def emit_error_series(series: ErrorSeries, path) -> None:
    """CSV with header ``index,timestamp,error``; reals with 9 significant digits."""
    if len(series) == 0:
        raise DataError("empty error series")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "timestamp", "error"])
        for i, (t, e) in enumerate(zip(series.timestamps, series.errors)):
            w.writerow([i, f"{t:.9g}", f"{e:.9g}"])


def read_error_series(path) -> ErrorSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ErrorSeries(np.array([float(r["timestamp"]) for r in rows]), np.array([float(r["error"]) for r in rows]))


BLUE = np.array([0.0, 0.0, 255.0])
RED = np.array([255.0, 0.0, 0.0])


def error_color(e: float, lo: float, hi: float) -> str:
    a = 0.0 if hi <= lo else (e - lo) / (hi - lo)
    rgb = np.floor((1 - a) * BLUE + a * RED + 0.5).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_colormap_svg(positions, errors, path, size: int = 400, margin: int = 10) -> None:
    """Trajectory in the x-z plane; segment ``i`` is coloured by ``errors[i]``.

    Colours run linearly from blue at the minimum error to red at the maximum.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0 or len(p) == 0:
        raise DataError("empty error series")
    if len(p) != len(e):
        raise DataError(f"{len(p)} positions but {len(e)} errors")
    xz = p[:, [0, 2]]
    lo_xy = xz.min(axis=0)
    span = max(float((xz.max(axis=0) - lo_xy).max()), 1e-12)
    s = (size - 2 * margin) / span
    sx = margin + (xz[:, 0] - lo_xy[0]) * s
    sy = size - margin - (xz[:, 1] - lo_xy[1]) * s  # z up
    lo, hi = float(e.min()), float(e.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i in range(max(len(p) - 1, 0)):
        parts.append(
            f'<polyline points="{sx[i]:.3f},{sy[i]:.3f} {sx[i + 1]:.3f},{sy[i + 1]:.3f}" '
            f'stroke="{error_color(e[i], lo, hi)}" stroke-width="2" fill="none"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
