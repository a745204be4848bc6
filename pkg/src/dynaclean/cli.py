"""Command-line entry point: ``dynaclean <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed inputs, or a pipeline run that ended partial).
Every subcommand accepts ``--seed``, ``--config`` and ``--out``; values from
the JSON config are overridden by explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import synthbench as sb
from .dataset_io import (
    DEFAULT_PATTERN,
    load_masks,
    load_sequence,
    load_trajectory,
    save_trajectory,
    store_masks,
    store_sequence,
    write_flow,
)
from .errors import ConfigError, DataError
from .flow import sequence_flows
from .geometry import Intrinsics
from .inpaint import inpaint_sequence
from .minivo import run_vo
from .pipeline import (
    PipelineConfig,
    evaluate_trajectory,
    read_kitti_calib,
    read_tum_timestamps,
    run_pipeline,
)
from .seeding import derive_seed
from .segmentation import detect_dynamic_masks, dilate
from .trajeval import comparison_json, compare_values, emit_error_series, format_table

log = logging.getLogger("dynaclean")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _common(p):
    p.add_argument("--seed", type=int, help="global seed (default: config value or 0)")
    p.add_argument("--config", help="JSON config with one block per stage")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _flow_flags(p):
    g = p.add_argument_group("flow")
    g.add_argument("--alpha", type=float)
    g.add_argument("--levels", type=int)
    g.add_argument("--iterations", type=int)


def _seg_flags(p):
    g = p.add_argument_group("detection")
    g.add_argument("--ransac-iterations", type=int)
    g.add_argument("--inlier-threshold", type=float)
    g.add_argument("--mad-k", type=float)
    g.add_argument("--min-area", type=int)
    g.add_argument("--morph-radius", type=int)
    g.add_argument("--vote-window", type=int)
    g.add_argument("--vote-quorum", type=float)


def _eval_flags(p):
    p.add_argument("--mode", dest="align", choices=("none", "se3", "sim3"), help="APE alignment")
    p.add_argument("--delta", dest="rpe_delta", type=int, help="RPE frame step")
    p.add_argument("--max-diff", type=float, help="timestamp association tolerance (s)")
    p.add_argument("--rpe-scale", dest="rpe_scale", action="store_true", default=None, help="sim3-scale the estimate before RPE")
    p.add_argument("--no-rpe-scale", dest="rpe_scale", action="store_false")


def _intrinsics_flags(p):
    p.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"))
    p.add_argument("--calib", help="KITTI calib.txt (P0 row)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dynaclean", description="Dynamic-object removal and its effect on monocular VO.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic preset dataset")
    _common(p)
    p.add_argument("--preset", choices=sb.PRESETS)
    p.add_argument("--frame-count", type=int)

    p = sub.add_parser("flow", help="forward (and backward) Horn-Schunck flows of a frame directory")
    _common(p)
    p.add_argument("frames")
    p.add_argument("--pattern", default=DEFAULT_PATTERN)
    p.add_argument("--backward", action="store_true", help="also write backward flows")
    _flow_flags(p)

    p = sub.add_parser("detect", help="dynamic-object masks of a frame directory")
    _common(p)
    p.add_argument("frames")
    p.add_argument("--pattern", default=DEFAULT_PATTERN)
    _flow_flags(p)
    _seg_flags(p)

    p = sub.add_parser("inpaint", help="remove masked regions from a frame directory")
    _common(p)
    p.add_argument("frames")
    p.add_argument("--masks", required=True)
    p.add_argument("--pattern", default=DEFAULT_PATTERN)
    p.add_argument("--max-hops", type=int)
    p.add_argument("--consistency-thresh", type=float)
    _flow_flags(p)

    p = sub.add_parser("vo", help="monocular visual odometry on a frame directory")
    _common(p)
    p.add_argument("frames")
    p.add_argument("--pattern", default=DEFAULT_PATTERN)
    p.add_argument("--masks", help="mask directory; masked keypoints are ignored")
    p.add_argument("--timestamps", help="times.txt or TUM rgb.txt (default: frame index)")
    _intrinsics_flags(p)
    p.add_argument("--max-features", type=int)
    p.add_argument("--ransac-threshold", type=float)

    p = sub.add_parser("eval", help="APE/RPE of an estimated trajectory")
    _common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--sequence", default="")
    _eval_flags(p)

    p = sub.add_parser("compare", help="comparison table of two reports")
    _common(p)
    p.add_argument("baseline", help="report JSON (eval or pipeline)")
    p.add_argument("processed", help="report JSON (eval or pipeline)")
    p.add_argument("--side", choices=("baseline", "processed"), default="processed", help="run taken from pipeline reports")
    p.add_argument("--sequence")

    p = sub.add_parser("pipeline", help="detect, inpaint, VO with and without, evaluate")
    _common(p)
    p.add_argument("--preset", choices=sb.PRESETS)
    p.add_argument("--frame-count", type=int)
    p.add_argument("--dataset-format", choices=("synth", "kitti", "tum"))
    p.add_argument("--dataset-path")
    p.add_argument("--groundtruth")
    p.add_argument("--timestamps")
    _intrinsics_flags(p)
    _eval_flags(p)
    return ap


# ---------------------------------------------------------------- config merge


def _set(obj, **kw):
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return obj
    try:
        return replace(obj, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    a = vars(args)
    cfg.seed = args.seed if args.seed is not None else cfg.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.flow = _set(cfg.flow, alpha=a.get("alpha"), levels=a.get("levels"), iterations=a.get("iterations"))
    cfg.ransac = _set(cfg.ransac, iterations=a.get("ransac_iterations"), inlier_threshold=a.get("inlier_threshold"))
    cfg.seg = _set(
        cfg.seg,
        mad_k=a.get("mad_k"),
        min_area=a.get("min_area"),
        morph_radius=a.get("morph_radius"),
        vote_window=a.get("vote_window"),
        vote_quorum=a.get("vote_quorum"),
    )
    cfg.inpaint = _set(cfg.inpaint, max_hops=a.get("max_hops"), consistency_thresh=a.get("consistency_thresh"))
    cfg.vo = _set(cfg.vo, max_features=a.get("max_features"), ransac_threshold=a.get("ransac_threshold"))
    cfg.eval = _set(cfg.eval, align=a.get("align"), rpe_delta=a.get("rpe_delta"), max_diff=a.get("max_diff"), rpe_scale=a.get("rpe_scale"))
    ds = cfg.dataset
    if a.get("preset") is not None:
        ds = replace(ds, format="synth", preset=a["preset"], path=None)
    ds = _set(
        ds,
        frame_count=a.get("frame_count"),
        format=a.get("dataset_format"),
        path=a.get("dataset_path"),
        groundtruth=a.get("groundtruth"),
        timestamps=a.get("timestamps") if args.command == "pipeline" else None,
        intrinsics=a.get("intrinsics") if args.command == "pipeline" else None,
        calib=a.get("calib") if args.command == "pipeline" else None,
    )
    cfg.dataset = ds
    return cfg


def _need_out(args, cfg) -> Path:
    if args.out is None and not args.config:
        raise UsageError(f"{args.command}: --out is required")
    return Path(cfg.out)


def _frames(args):
    frames = load_sequence(args.frames, args.pattern)
    if not frames:
        raise DataError(f"no frames matching {args.pattern!r} in {args.frames}")
    return frames


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    out = _need_out(args, cfg)
    name = args.preset or cfg.dataset.preset
    if name is None:
        raise UsageError("synth: --preset is required")
    spec = sb.preset(name, seed=derive_seed(cfg.seed, "synth"))
    if cfg.dataset.frame_count is not None:
        spec.frame_count = cfg.dataset.frame_count
    root = sb.write_dataset(sb.generate_scene(spec), out)
    print(f"wrote {name} ({spec.frame_count} frames) to {root}")


def cmd_flow(args, cfg):
    out = _need_out(args, cfg)
    frames = _frames(args)
    fwd, bwd = sequence_flows(frames, cfg.flow, backward=args.backward)
    for sub, flows in (("forward", fwd), ("backward", bwd)):
        if flows:
            (out / sub).mkdir(parents=True, exist_ok=True)
            for t, fl in enumerate(flows):
                write_flow(fl, out / sub / f"{t:06d}.flo")
    print(f"wrote {len(fwd)} flow pairs to {out}")


def cmd_detect(args, cfg):
    out = _need_out(args, cfg)
    frames = _frames(args)
    flow_p, ransac_p, seg_p, _, _ = cfg.stage_params()
    failed = []
    raw = detect_dynamic_masks(frames, flow_p, ransac_p, seg_p, warnings=failed)
    # same handoff ring as the pipeline
    store_masks([dilate(m, seg_p.morph_radius) for m in raw], out)
    if failed:
        print(f"no dominant motion for pairs {failed}; their masks are empty", file=sys.stderr)
    print(f"wrote {len(raw)} masks to {out}")


def cmd_inpaint(args, cfg):
    out = _need_out(args, cfg)
    frames = _frames(args)
    masks = load_masks(args.masks, len(frames), args.pattern)
    result = inpaint_sequence(frames, masks, cfg.inpaint, flow_params=cfg.flow)
    store_sequence(result, out)
    print(f"wrote {len(result)} frames to {out}")


def cmd_vo(args, cfg):
    out = _need_out(args, cfg)
    if args.intrinsics is None and args.calib is None:
        raise UsageError("vo: --intrinsics or --calib is required")
    K = Intrinsics(*args.intrinsics) if args.intrinsics else read_kitti_calib(args.calib)
    times = read_tum_timestamps(args.timestamps) if args.timestamps else None
    frames = load_sequence(args.frames, args.pattern, times)
    if not frames:
        raise DataError(f"no frames matching {args.pattern!r} in {args.frames}")
    masks = load_masks(args.masks, len(frames), args.pattern) if args.masks else None
    _, _, _, _, vo_p = cfg.stage_params()
    res = run_vo(frames, K, vo_p, masks)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(res.trajectory, out / "trajectory.txt", "tum")
    (out / "vo_log.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{len(frames)} poses, {res.held} held pairs{' (run failed)' if res.failed else ''}; wrote {out / 'trajectory.txt'}")


def _stats_line(label, s):
    return f"{label:<8} rmse {s.rmse:.6f}  mean {s.mean:.6f}  median {s.median:.6f}  std {s.std:.6f}  min {s.min:.6f}  max {s.max:.6f}  n {s.n}"


def cmd_eval(args, cfg):
    ref, est = load_trajectory(args.ref), load_trajectory(args.est)
    a, a_series, r, r_series, rot = evaluate_trajectory(ref, est, cfg.eval)
    print(_stats_line("APE", a))
    print(_stats_line("RPE", r))
    print(_stats_line("RPE(deg)", rot))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        emit_error_series(a_series, out / "ape.csv")
        emit_error_series(r_series, out / "rpe.csv")
        rep = {"kind": "eval", "sequence": args.sequence, "eval": vars(cfg.eval), "ape": a.to_dict(), "rpe": r.to_dict(), "rpe_rot_deg": rot.to_dict()}
        (out / "eval.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")


def _report_metrics(path, side):
    try:
        rep = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(rep, dict):
        raise DataError(f"{path}: not a report object")
    body = rep.get(side, rep) if "ape" not in rep else rep
    try:
        ape, rpe = body["ape"], body["rpe"]
        ape = ape["rmse"] if isinstance(ape, dict) else float(ape)
        rpe = rpe["rmse"] if isinstance(rpe, dict) else float(rpe)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: no {side} APE/RPE values") from exc
    return float(ape), float(rpe), rep.get("sequence") or ""


def cmd_compare(args, cfg):
    ab, rb, seq_b = _report_metrics(args.baseline, args.side)
    ap, rp, seq_p = _report_metrics(args.processed, args.side)
    cmp = compare_values(ab, rb, ap, rp, args.sequence if args.sequence is not None else (seq_p or seq_b))
    print(format_table([cmp]), end="")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(comparison_json([cmp]))
        (out / "comparison.txt").write_text(format_table([cmp]))


def cmd_pipeline(args, cfg):
    if args.config is None and args.preset is None and args.dataset_path is None:
        raise UsageError("pipeline: give --config, --preset or --dataset-path")
    _need_out(args, cfg)
    report = run_pipeline(cfg)
    table = Path(cfg.out) / "report.txt"
    if table.exists():
        print(table.read_text(), end="")
    print(f"status: {report['status']}; report written to {Path(cfg.out) / 'report.json'}")
    if report["status"] != "complete":
        failed = {k: v.get("error", v["status"]) for k, v in report["stages"].items() if v["status"] != "ok"}
        print(f"stages not completed: {failed}", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "detect": cmd_detect,
    "inpaint": cmd_inpaint,
    "vo": cmd_vo,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        if args.command == "pipeline":
            cfg.validate()
        return COMMANDS[args.command](args, cfg) or 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
