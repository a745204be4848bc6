"""Synthetic monocular sequences with exact ground truth.

A pinhole camera looks at a textured background surface ``Z = depth +
relief(X, Y)`` in world coordinates. With zero relief the surface is a
plane and the background motion between two frames is exactly a
homography; a small relief adds the parallax that monocular odometry needs.
Textured rectangles parallel to the background ("sprites") move with
constant 3-D velocity in front of it.

Every render comes with its sprite-free twin, the exact sprite footprints
and the analytic flow between consecutive frames.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset_io import FlowField, Frame, Trajectory, save_trajectory, store_masks, store_sequence, write_flow
from .errors import DataError
from .geometry import Intrinsics, PoseSE3, rot_y
from .seeding import stage_rng

RELIEF_ITERATIONS = 32


@dataclass
class TextureSpec:
    """Smoothed value noise: octave ``k`` has lattice spacing ``cell / 2**k`` texels."""

    cell: float = 32.0
    octaves: int = 3
    persistence: float = 0.5
    low: float = 25.0
    high: float = 230.0


@dataclass
class BackgroundSpec:
    depth: float = 10.0
    texel: float = 1.0 / 60.0
    texture: TextureSpec = field(default_factory=TextureSpec)
    relief: float = 0.0
    relief_wavelength: float = 8.0


@dataclass
class CameraPath:
    """``static``, ``straight`` or ``turn``; or explicit camera-to-world ``poses``.

    ``step`` is the per-frame translation in the current camera frame and
    ``yaw_rate`` the per-frame rotation (radians) about the camera y axis.
    The step length of frame ``i`` is scaled by
    ``1 + speed_amplitude * sin(2 pi i / speed_period)``.
    """

    kind: str = "static"
    step: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    yaw_rate: float = 0.0
    speed_amplitude: float = 0.0
    speed_period: float = 50.0
    poses: list = field(default_factory=list)  # [[qx, qy, qz, qw, tx, ty, tz], ...]


@dataclass
class SpriteSpec:
    """Rectangle parallel to the background, placed by its pixel centre at spawn."""

    width_px: float
    height_px: float
    center_px: list
    depth: float
    velocity: list  # m/s, world frame
    spawn: int = 0
    despawn: int = 10**9  # first frame without the sprite
    texture: TextureSpec = field(default_factory=lambda: TextureSpec(cell=10.0, octaves=2, low=0.0, high=255.0))


@dataclass
class SceneSpec:
    width: int = 320
    height: int = 240
    intrinsics: list = field(default_factory=lambda: [300.0, 300.0, 159.5, 119.5])
    fps: float = 30.0
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    camera_path: CameraPath = field(default_factory=CameraPath)
    sprites: list = field(default_factory=list)
    frame_count: int = 100
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.background, dict):
            bg = dict(self.background)
            bg["texture"] = TextureSpec(**bg.get("texture", {}))
            self.background = BackgroundSpec(**bg)
        if isinstance(self.camera_path, dict):
            self.camera_path = CameraPath(**self.camera_path)
        sprites = []
        for s in self.sprites:
            if isinstance(s, dict):
                s = dict(s)
                s["texture"] = TextureSpec(**s["texture"]) if "texture" in s else SpriteSpec.__dataclass_fields__["texture"].default_factory()
                s = SpriteSpec(**s)
            sprites.append(s)
        self.sprites = sprites

    @property
    def K(self) -> Intrinsics:
        return Intrinsics(*self.intrinsics)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SyntheticSequence:
    frames: list
    clean_frames: list
    gt_masks: list
    gt_flows: list
    gt_trajectory: Trajectory
    spec: SceneSpec


def value_noise(shape, tex: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    """Sum of cubic-spline-interpolated random lattices, scaled to ``[low, high]``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape)
    amp = 1.0
    for k in range(tex.octaves):
        cell = max(tex.cell / 2**k, 1.0)
        lattice = rng.uniform(-1.0, 1.0, (int(h / cell) + 4, int(w / cell) + 4))
        out += amp * ndimage.map_coordinates(lattice, [yy / cell + 1, xx / cell + 1], order=3, mode="nearest")
        amp *= tex.persistence
    lo, hi = out.min(), out.max()
    if hi == lo:
        return np.full(shape, 0.5 * (tex.low + tex.high))
    return tex.low + (out - lo) / (hi - lo) * (tex.high - tex.low)


def camera_poses(spec: SceneSpec) -> list[PoseSE3]:
    path = spec.camera_path
    n = spec.frame_count
    if path.kind == "poses":
        if len(path.poses) != n:
            raise DataError("explicit camera path length differs from frame_count")
        return [PoseSE3(p[:4], p[4:7]) for p in path.poses]
    if path.kind == "static":
        return [PoseSE3.identity() for _ in range(n)]
    if path.kind not in ("straight", "turn"):
        raise DataError(f"unknown camera path kind {path.kind!r}")
    yaw_rate = path.yaw_rate if path.kind == "turn" else 0.0
    step = np.asarray(path.step, dtype=float)
    poses = []
    C = np.zeros(3)
    for i in range(n):
        R = rot_y(yaw_rate * i)
        poses.append(PoseSE3.from_rt(R, C))
        C = C + R @ step * (1.0 + path.speed_amplitude * np.sin(2 * np.pi * i / path.speed_period))
    return poses


def _relief_params(spec: SceneSpec):
    rng = stage_rng(spec.seed, "relief")
    phases = rng.uniform(0, 2 * np.pi, 3)
    theta = rng.uniform(0, np.pi)
    return phases, theta


def _relief(spec: SceneSpec, X, Y, params):
    bg = spec.background
    if bg.relief == 0:
        return np.zeros_like(X)
    (p1, p2, p3), theta = params
    L = bg.relief_wavelength
    k = 2 * np.pi / L
    a = np.sin(k * X + p1) * np.sin(0.8 * k * Y + p2)
    b = np.sin(0.7 * k * (X * np.cos(theta) + Y * np.sin(theta)) + p3)
    return bg.relief * (0.6 * a + 0.4 * b)


def _rays(spec: SceneSpec, pose: PoseSE3):
    K = spec.K
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    d_cam = np.stack([(xx - K.cx) / K.fx, (yy - K.cy) / K.fy, np.ones_like(xx)], axis=-1)
    return d_cam @ pose.R.T


def _hit_background(spec, C, d, relief_params):
    """Ray/surface intersection; bisection on the depth bracket set by the relief."""
    bg = spec.background
    if bg.relief == 0:
        lam = (bg.depth - C[2]) / d[..., 2]
        return C + lam[..., None] * d, lam
    lo = (bg.depth - bg.relief - C[2]) / d[..., 2]
    hi = (bg.depth + bg.relief - C[2]) / d[..., 2]
    for _ in range(RELIEF_ITERATIONS):
        mid = 0.5 * (lo + hi)
        X = C[0] + mid * d[..., 0]
        Y = C[1] + mid * d[..., 1]
        above = C[2] + mid * d[..., 2] - bg.depth - _relief(spec, X, Y, relief_params) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    lam = 0.5 * (lo + hi)
    return C + lam[..., None] * d, lam


def _sprite_state(spec: SceneSpec, s: SpriteSpec, poses, t: int):
    """World centre and half extents of sprite ``s`` at frame ``t``."""
    K = spec.K
    pose0 = poses[min(max(s.spawn, 0), len(poses) - 1)]
    u, v = s.center_px
    d = pose0.R @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    C0 = pose0.t
    lam = (s.depth - C0[2]) / d[2]
    center0 = C0 + lam * d
    dist = s.depth - C0[2]
    half = np.array([0.5 * s.width_px * dist / K.fx, 0.5 * s.height_px * dist / K.fy])
    center = center0 + np.asarray(s.velocity, dtype=float) * (t - s.spawn) / spec.fps
    return center, half


def _project(spec: SceneSpec, pose: PoseSE3, P):
    K = spec.K
    pc = (P - pose.t) @ pose.R
    z = pc[..., 2]
    return np.stack([K.fx * pc[..., 0] / z + K.cx, K.fy * pc[..., 1] / z + K.cy], axis=-1)


def validate(spec: SceneSpec) -> None:
    if spec.frame_count < 2:
        raise DataError("frame_count must be at least 2")
    if spec.width <= 0 or spec.height <= 0:
        raise DataError("image size must be positive")
    if spec.camera_path.speed_period <= 0 or abs(spec.camera_path.speed_amplitude) >= 1:
        raise DataError("speed_period must be positive and |speed_amplitude| < 1")
    bg = spec.background
    if bg.relief < 0 or bg.relief >= bg.depth:
        raise DataError("relief must be nonnegative and smaller than the background depth")
    for s in spec.sprites:
        if not (s.width_px > 0 and s.height_px > 0):
            raise DataError("sprite sizes must be positive")
        if s.despawn <= s.spawn:
            raise DataError("sprite despawns before it spawns")
        if not (0 < s.depth < bg.depth - bg.relief):
            raise DataError("sprite must lie between the camera and the background")
    for pose in camera_poses(spec):
        if pose.R[2, 2] <= 0.1:
            raise DataError("camera must face the background plane")
        if pose.t[2] >= bg.depth - bg.relief:
            raise DataError("camera behind the background plane")
        d = _rays(spec, pose)[[0, 0, -1, -1], [0, -1, 0, -1]]
        if np.any(d[:, 2] <= 0):
            raise DataError("field of view does not face the background plane")
        for s in spec.sprites:
            if pose.t[2] >= s.depth:
                raise DataError("camera behind a sprite plane")


def generate_scene(spec: SceneSpec) -> SyntheticSequence:
    validate(spec)
    poses = camera_poses(spec)
    relief_params = _relief_params(spec)
    bg = spec.background
    n, h, w = spec.frame_count, spec.height, spec.width

    # background texture covering every ray hit (corners at both relief extremes)
    corners = []
    for pose in poses:
        d = _rays(spec, pose)[[0, 0, -1, -1], [0, -1, 0, -1]]
        for z in (bg.depth - bg.relief, bg.depth + bg.relief):
            lam = (z - pose.t[2]) / d[:, 2]
            corners.append(pose.t + lam[:, None] * d)
    corners = np.concatenate(corners)
    margin = 0.5 + 8 * bg.texel
    x0, y0 = corners[:, 0].min() - margin, corners[:, 1].min() - margin
    x1, y1 = corners[:, 0].max() + margin, corners[:, 1].max() + margin
    tex_shape = (int(np.ceil((y1 - y0) / bg.texel)) + 1, int(np.ceil((x1 - x0) / bg.texel)) + 1)
    bg_tex = value_noise(tex_shape, bg.texture, stage_rng(spec.seed, "background"))
    sprite_tex = [
        value_noise((int(2 * s.height_px) + 1, int(2 * s.width_px) + 1), s.texture, stage_rng(spec.seed, "sprite", k))
        for k, s in enumerate(spec.sprites)
    ]

    frames, clean, masks, hits_all = [], [], [], []
    for t, pose in enumerate(poses):
        d = _rays(spec, pose)
        P, _ = _hit_background(spec, pose.t, d, relief_params)
        clean_val = ndimage.map_coordinates(bg_tex, [(P[..., 1] - y0) / bg.texel, (P[..., 0] - x0) / bg.texel], order=1, mode="nearest")
        val = clean_val.copy()
        owner = np.full((h, w), -1)
        hit = P.copy()
        depth_buf = np.full((h, w), np.inf)
        for k, s in enumerate(spec.sprites):
            if not s.spawn <= t < s.despawn:
                continue
            center, half = _sprite_state(spec, s, poses, t)
            lam = (center[2] - pose.t[2]) / d[..., 2]
            Q = pose.t + lam[..., None] * d
            lx = (Q[..., 0] - center[0] + half[0]) / (2 * half[0])
            ly = (Q[..., 1] - center[1] + half[1]) / (2 * half[1])
            inside = (lam > 0) & (lx >= 0) & (lx < 1) & (ly >= 0) & (ly < 1) & (lam < depth_buf)
            if not inside.any():
                continue
            th, tw = sprite_tex[k].shape
            sv = ndimage.map_coordinates(sprite_tex[k], [ly[inside] * (th - 1), lx[inside] * (tw - 1)], order=1, mode="nearest")
            val[inside] = sv
            owner[inside] = k
            hit[inside] = Q[inside]
            depth_buf[inside] = lam[inside]
        if spec.noise_sigma > 0:
            noise = stage_rng(spec.seed, "noise", t).normal(0, spec.noise_sigma, (h, w))
            val = val + noise
            clean_val = clean_val + noise
        frames.append(Frame(_quantize(val), t, t / spec.fps))
        clean.append(Frame(_quantize(clean_val), t, t / spec.fps))
        masks.append(owner >= 0)
        hits_all.append((hit, owner))

    flows = []
    for t in range(n - 1):
        hit, owner = hits_all[t]
        P = hit.copy()
        for k, s in enumerate(spec.sprites):
            sel = owner == k
            if sel.any():
                P[sel] += np.asarray(s.velocity, dtype=float) / spec.fps
        p1 = _project(spec, poses[t + 1], P)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        flows.append(FlowField(p1[..., 0] - xx, p1[..., 1] - yy))

    traj = Trajectory.from_poses([f.timestamp for f in frames], poses)
    return SyntheticSequence(frames, clean, masks, flows, traj, spec)


def _quantize(val: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(val + 0.5), 0, 255).astype(np.uint8)


def _moving_base(seed: int) -> SceneSpec:
    return SceneSpec(
        background=BackgroundSpec(relief=2.0, relief_wavelength=12.0),
        camera_path=CameraPath("turn", step=[0.08, 0.0, 0.0], yaw_rate=np.deg2rad(0.15), speed_amplitude=0.3),
        seed=seed,
    )


PRESETS = ("static_cam", "moving_cam_clean", "moving_cam_dynamic_small", "moving_cam_dynamic_large")


def _crossing(center, down: bool, spawn: int, despawn: int, size=(90, 70)) -> SpriteSpec:
    # follows the camera sideways while sliding vertically at 4.8 px/frame
    vy = 2.4 if down else -2.4
    return SpriteSpec(size[0], size[1], list(center), depth=5.0, velocity=[2.4, vy, 0.0], spawn=spawn, despawn=despawn)


def preset(name: str, seed: int = 0) -> SceneSpec:
    """Fixed 320x240, 100-frame scenes.

    ``static_cam``: still camera, no sprites. The ``moving_cam_*`` presets
    share a camera sliding sideways about 8 cm per frame (speed varying by
    30% over a 50-frame cycle) on a gentle yaw turn over
    a background with 2 m of relief. ``dynamic_small`` adds one 32x24 sprite
    for 4 frames (about 1% of the image); ``dynamic_large`` has three 90x70
    sprites in turn, each sliding from the top to the bottom of the image over 30 frames, so a
    sprite covering about 8% of the image is present in 90 of the 100 frames.
    """
    if name == "static_cam":
        return SceneSpec(seed=seed)
    if name == "moving_cam_clean":
        return _moving_base(seed)
    if name == "moving_cam_dynamic_small":
        spec = _moving_base(seed)
        spec.sprites = [_crossing((200.0, 150.0), False, 48, 52, size=(32, 24))]
        return spec
    if name == "moving_cam_dynamic_large":
        spec = _moving_base(seed)
        spec.sprites = [
            _crossing((160.0, 50.0), True, 5, 35),
            _crossing((175.0, 50.0), True, 35, 65),
            _crossing((160.0, 50.0), True, 65, 95),
        ]
        return spec
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def write_dataset(seq: SyntheticSequence, directory) -> Path:
    """Write ``frames/ clean/ masks/ flows/ groundtruth.txt spec.json``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    store_sequence(seq.frames, root / "frames")
    store_sequence(seq.clean_frames, root / "clean")
    store_masks(seq.gt_masks, root / "masks")
    (root / "flows").mkdir(exist_ok=True)
    for t, fl in enumerate(seq.gt_flows):
        write_flow(fl, root / "flows" / f"{t:06d}.flo")
    save_trajectory(seq.gt_trajectory, root / "groundtruth.txt", "tum")
    (root / "spec.json").write_text(json.dumps(seq.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    (root / "times.txt").write_text("".join(f"{f.timestamp:.9f}\n" for f in seq.frames))
    return root
