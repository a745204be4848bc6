"""End-to-end runs: detect, inpaint, odometry with and without, evaluate.

A run is described by :class:`PipelineConfig` (JSON, one block per stage)
and produces a directory of artifacts plus ``report.json`` and
``report.txt``. Stage seeds come from the global seed through
:func:`dynaclean.seeding.derive_seed` with the tags ``synth``,
``egomotion`` and ``minivo``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import synthbench as sb
from .dataset_io import (
    DEFAULT_PATTERN,
    Trajectory,
    associate_timestamps,
    load_masks,
    load_sequence,
    load_trajectory,
    read_times,
    save_trajectory,
    store_masks,
    store_sequence,
    write_flow,
)
from .egomotion import RansacParams
from .errors import ConfigError, DataError
from .flow import FlowParams, sequence_flows
from .geometry import Intrinsics
from .inpaint import InpaintParams, inpaint_sequence, psnr, ssim
from .minivo import VoParams, run_vo
from .seeding import derive_seed
from .segmentation import SegParams, detect_dynamic_masks, dilate, iou
from .trajeval import (
    AlignMode,
    ape,
    compare_runs,
    emit_colormap_svg,
    emit_error_series,
    format_table,
    rpe,
    scale_to_reference,
)

log = logging.getLogger(__name__)

FORMATS = ("synth", "kitti", "tum")
REPORT_VERSION = 1
# fields that legitimately differ between identical runs
NON_CANON = ("created", "timing")


@dataclass
class DatasetConfig:
    format: str = "synth"
    path: str | None = None  # frame directory (kitti/tum) or a written synth dataset
    preset: str | None = None  # synth: generate this preset instead of reading ``path``
    frame_count: int | None = None  # synth presets only
    pattern: str = DEFAULT_PATTERN
    groundtruth: str | None = None
    timestamps: str | None = None  # tum: "timestamp ..." lines, one per frame
    intrinsics: list | None = None  # [fx, fy, cx, cy]
    calib: str | None = None  # kitti calib.txt; P0 gives the intrinsics
    name: str | None = None


@dataclass
class EvalConfig:
    align: str = "sim3"
    rpe_delta: int = 1
    max_diff: float = 0.02
    # multiply estimate positions by the sim3 scale before RPE (monocular VO)
    rpe_scale: bool = True


_BLOCKS = {
    "flow": FlowParams,
    "ransac": RansacParams,
    "seg": SegParams,
    "inpaint": InpaintParams,
    "vo": VoParams,
}


def _build(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    out: str = "out"
    seed: int = 0
    flow: FlowParams = field(default_factory=FlowParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    seg: SegParams = field(default_factory=SegParams)
    inpaint: InpaintParams = field(default_factory=InpaintParams)
    vo: VoParams = field(default_factory=VoParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    write_flows: bool = False  # forward flows as .flo; about 600 kB per frame at 320x240

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {k: _build(c, d.get(k), k) for k, c in _BLOCKS.items()}
        kw["dataset"] = _build(DatasetConfig, d.get("dataset"), "dataset")
        kw["eval"] = _build(EvalConfig, d.get("eval"), "eval")
        for k in ("out", "seed", "write_flows"):
            if k in d:
                kw[k] = d[k]
        if not isinstance(kw.get("seed", 0), int):
            raise ConfigError("seed must be an integer")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Check everything that can be checked before a stage runs."""
        ds = self.dataset
        if ds.format not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}, got {ds.format!r}")
        try:
            AlignMode(self.eval.align)
        except ValueError:
            raise ConfigError(f"eval.align must be none, se3 or sim3, got {self.eval.align!r}") from None
        if self.eval.rpe_delta < 1:
            raise ConfigError("eval.rpe_delta must be >= 1")
        if ds.format == "synth":
            if (ds.preset is None) == (ds.path is None):
                raise ConfigError("synth datasets need exactly one of dataset.preset or dataset.path")
            if ds.preset is not None and ds.preset not in sb.PRESETS:
                raise ConfigError(f"unknown preset {ds.preset!r}; choose from {', '.join(sb.PRESETS)}")
            if ds.frame_count is not None and ds.frame_count < 2:
                raise ConfigError("dataset.frame_count must be >= 2")
            if ds.path is not None:
                _must_exist(Path(ds.path) / "frames", "dataset.path/frames")
                _must_exist(Path(ds.path) / "spec.json", "dataset.path/spec.json")
            return
        if ds.path is None:
            raise ConfigError(f"{ds.format} datasets need dataset.path")
        _must_exist(ds.path, "dataset.path")
        if ds.groundtruth is None:
            raise ConfigError(f"{ds.format} datasets need dataset.groundtruth")
        _must_exist(ds.groundtruth, "dataset.groundtruth")
        if ds.intrinsics is None and ds.calib is None:
            raise ConfigError("dataset.intrinsics or dataset.calib is required")
        if ds.intrinsics is not None and len(ds.intrinsics) != 4:
            raise ConfigError("dataset.intrinsics must be [fx, fy, cx, cy]")
        for key in ("calib", "timestamps"):
            if getattr(ds, key) is not None:
                _must_exist(getattr(ds, key), f"dataset.{key}")

    def stage_params(self):
        """Parameter blocks with their seeds derived from the global seed."""
        ransac = replace(self.ransac, seed=derive_seed(self.seed, "egomotion"))
        vo = replace(self.vo, seed=derive_seed(self.seed, "minivo"))
        return self.flow, ransac, self.seg, self.inpaint, vo


def _must_exist(path, what):
    if not Path(path).exists():
        raise ConfigError(f"{what} does not exist: {path}")


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    name: str
    frames: list
    K: Intrinsics
    groundtruth: Trajectory
    clean_frames: list | None = None
    gt_masks: list | None = None


def read_kitti_calib(path) -> Intrinsics:
    for line in Path(path).read_text().splitlines():
        if line.startswith("P0:"):
            P = np.array([float(x) for x in line.split()[1:]]).reshape(3, 4)
            return Intrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2])
    raise DataError(f"{path}: no P0 line")


def read_tum_timestamps(path) -> np.ndarray:
    """First column of every non-comment line (e.g. TUM ``rgb.txt``)."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(float(line.split()[0]))
    return np.array(out)


def load_dataset(cfg: PipelineConfig) -> Dataset:
    ds = cfg.dataset
    if ds.format == "synth" and ds.preset is not None:
        spec = sb.preset(ds.preset, seed=derive_seed(cfg.seed, "synth"))
        if ds.frame_count is not None:
            spec.frame_count = ds.frame_count
        seq = sb.generate_scene(spec)
        return Dataset(ds.name or ds.preset, seq.frames, spec.K, seq.gt_trajectory, seq.clean_frames, seq.gt_masks)
    root = Path(ds.path)
    if ds.format == "synth":
        spec = sb.SceneSpec.from_dict(json.loads((root / "spec.json").read_text()))
        times = read_times(root / "times.txt") if (root / "times.txt").exists() else None
        frames = load_sequence(root / "frames", ds.pattern, times)
        clean = load_sequence(root / "clean", ds.pattern, times) if (root / "clean").exists() else None
        masks = load_masks(root / "masks", len(frames), ds.pattern) if (root / "masks").exists() else None
        gt = load_trajectory(root / "groundtruth.txt", "tum")
        return Dataset(ds.name or root.name, frames, spec.K, gt, clean, masks)
    K = Intrinsics(*ds.intrinsics) if ds.intrinsics is not None else read_kitti_calib(ds.calib)
    if ds.format == "kitti":
        frames = load_sequence(root, ds.pattern)  # frame index is the clock
    else:
        times = read_tum_timestamps(ds.timestamps) if ds.timestamps else None
        frames = load_sequence(root, ds.pattern, times)
    gt = load_trajectory(ds.groundtruth, ds.format)
    return Dataset(ds.name or root.name, frames, K, gt)


# ---------------------------------------------------------------- report


def report_canon(report: dict) -> str:
    """Deterministic JSON of a report without its wall-clock fields."""
    return json.dumps({k: v for k, v in report.items() if k not in NON_CANON}, sort_keys=True, indent=2)


def _finite(x):
    """JSON-safe float."""
    x = float(x)
    return x if np.isfinite(x) else None


class _Stages:
    def __init__(self, report):
        self.report = report

    def run(self, name, fn, *needs):
        if any(self.report["stages"].get(n, {}).get("status") != "ok" for n in needs):
            self.report["stages"][name] = {"status": "skipped"}
            return None
        t0 = time.perf_counter()
        try:
            out = fn()
            self.report["stages"][name] = {"status": "ok"}
        except DataError as exc:
            log.error("stage %s failed: %s", name, exc)
            self.report["stages"][name] = {"status": "failed", "error": str(exc)}
            out = None
        self.report["timing"][name] = round(time.perf_counter() - t0, 3)
        return out


def evaluate_trajectory(gt: Trajectory, est: Trajectory, cfg: EvalConfig):
    """APE, RPE (translation) and RPE (rotation, degrees) as used in reports."""
    a_stats, a_series = ape(gt, est, cfg.align, cfg.max_diff)
    r_est = scale_to_reference(gt, est, cfg.max_diff) if cfg.rpe_scale else est
    r_stats, r_series = rpe(gt, r_est, cfg.rpe_delta, "trans", cfg.max_diff)
    rot_stats, _ = rpe(gt, est, cfg.rpe_delta, "rot", cfg.max_diff)
    return a_stats, a_series, r_stats, r_series, rot_stats


def _quality(data: Dataset, raw_masks, masks, inpainted) -> dict:
    q = {"dynamic_fraction": float(np.mean([m.mean() for m in raw_masks]))}
    if data.gt_masks is not None:
        scores = [iou(m, g) for m, g in zip(raw_masks, data.gt_masks) if g.any()]
        q["sprite_frames"] = len(scores)
        q["iou_mean"] = float(np.mean(scores)) if scores else None
        q["iou_ge_half"] = float(np.mean(np.array(scores) >= 0.5)) if scores else None
    if inpainted is not None:
        same = [np.array_equal(o.pixels[~m], f.pixels[~m]) for o, f, m in zip(inpainted, data.frames, masks)]
        q["identity_frames"] = float(np.mean(same))
        if data.clean_frames is not None:
            on = [t for t, m in enumerate(masks) if m.any()]
            q["psnr_frames"] = len(on)
            q["psnr_mean"] = float(np.mean([psnr(inpainted[t], data.clean_frames[t], masks[t]) for t in on])) if on else None
            q["ssim_mean"] = float(np.mean([ssim(inpainted[t], data.clean_frames[t]) for t in on])) if on else None
    return q


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage, write artifacts under ``cfg.out`` and return the report.

    Failures of individual stages (data errors) are recorded in the report,
    dependent stages are skipped and the report status becomes ``partial``.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    flow_p, ransac_p, seg_p, inpaint_p, vo_p = cfg.stage_params()
    report = {
        "version": REPORT_VERSION,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "status": "complete",
        "sequence": None,
        "config": cfg.to_dict(),
        "stages": {},
        "timing": {},
        "artifacts": [],
    }
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    st = _Stages(report)

    def artifact(rel):
        report["artifacts"].append(rel)
        return out / rel

    def load():
        d = load_dataset(cfg)
        if len(d.frames) < 2:
            raise DataError(f"dataset has {len(d.frames)} frames; at least two are needed")
        return d

    data = st.run("load", load)
    if data is not None:
        report["sequence"] = data.name
        report["frames"] = len(data.frames)
        save_trajectory(data.groundtruth, artifact("groundtruth.txt"), "tum")

    flows = st.run("flow", lambda: sequence_flows(data.frames, flow_p, backward=True), "load")
    if flows is not None and cfg.write_flows:
        flow_dir = artifact("flows")
        flow_dir.mkdir(exist_ok=True)
        for t, fl in enumerate(flows[0]):
            write_flow(fl, flow_dir / f"{t:06d}.flo")

    def detect():
        raw = detect_dynamic_masks(data.frames, flow_p, ransac_p, seg_p, flows=flows, warnings=report.setdefault("ransac_failures", []))
        # one more ring before inpainting: flow boundaries bleed
        return raw, [dilate(m, seg_p.morph_radius) for m in raw]

    detected = st.run("detect", detect, "flow")
    raw_masks, masks = detected if detected is not None else (None, None)
    if masks is not None:
        store_masks(masks, artifact("masks"))

    inpainted = st.run("inpaint", lambda: inpaint_sequence(data.frames, masks, inpaint_p, flows=flows), "detect")
    if inpainted is not None:
        store_sequence(inpainted, artifact("inpainted"))

    vo_raw = st.run("vo_baseline", lambda: run_vo(data.frames, data.K, vo_p), "load")
    vo_inp = st.run("vo_processed", lambda: run_vo(inpainted, data.K, vo_p), "inpaint")

    results = {}
    for side, vo in (("baseline", vo_raw), ("processed", vo_inp)):
        if vo is None:
            continue
        save_trajectory(vo.trajectory, artifact(f"trajectory_{side}.txt"), "tum")
        artifact(f"vo_{side}.json").write_text(json.dumps(vo.to_dict(), indent=2, sort_keys=True) + "\n")

        def evaluate(side=side, vo=vo):
            # evaluate what was persisted so `eval` on the files reproduces these numbers
            gt = load_trajectory(out / "groundtruth.txt", "tum")
            est = load_trajectory(out / f"trajectory_{side}.txt", "tum")
            a, a_series, r, r_series, rot = evaluate_trajectory(gt, est, cfg.eval)
            emit_error_series(a_series, artifact(f"ape_{side}.csv"))
            emit_error_series(r_series, artifact(f"rpe_{side}.csv"))
            ref_pos = gt.subset([i for i, _ in associate_timestamps(gt, est, cfg.eval.max_diff)]).positions
            emit_colormap_svg(ref_pos, a_series.errors, artifact(f"ape_{side}.svg"))
            return {
                "ape": a.to_dict(),
                "rpe": r.to_dict(),
                "rpe_rot_deg": rot.to_dict(),
                "vo_held_pairs": vo.held,
                "vo_failed": vo.failed,
            }

        res = st.run(f"eval_{side}", evaluate, f"vo_{side}")
        if res is not None:
            results[side] = res
            report[side] = res

    if len(results) == 2:
        b, p = results["baseline"], results["processed"]
        cmp = compare_runs((b["ape"]["rmse"], b["rpe"]["rmse"]), (p["ape"]["rmse"], p["rpe"]["rmse"]), data.name)
        report["comparison"] = {**cmp.to_dict(), "ape_improved": cmp.ape.improved, "rpe_improved": cmp.rpe.improved}
        report["stages"]["compare"] = {"status": "ok"}
        artifact("report.txt").write_text(format_table([cmp]))
    else:
        report["stages"]["compare"] = {"status": "skipped"}

    if raw_masks is not None:
        report["quality"] = _quality(data, raw_masks, masks, inpainted)

    if any(s["status"] != "ok" for s in report["stages"].values()):
        report["status"] = "partial"
    report["artifacts"] = sorted(set(report["artifacts"]))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
