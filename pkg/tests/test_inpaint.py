import numpy as np
import pytest

from dynaclean import synthbench as sb
from dynaclean.dataset_io import FlowField, Frame
from dynaclean.errors import DataError
from dynaclean.inpaint import (
    InpaintParams,
    diffuse_fill,
    inpaint_sequence,
    laplace_residual,
    propagate_pixels,
    psnr,
    solve_laplace,
    ssim,
)


def frame(px):
    return Frame(np.asarray(px, dtype=np.uint8))


def texture(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w)).astype(np.uint8)


def test_params_validation():
    with pytest.raises(ValueError):
        InpaintParams(max_hops=0)
    with pytest.raises(ValueError):
        InpaintParams(diffusion_tol=0)


def test_diffuse_empty_holes():
    f = frame(texture(10, 12))
    out = diffuse_fill(f, np.zeros(f.shape, bool))
    assert np.array_equal(out.pixels, f.pixels)
    _, iters = solve_laplace(f.pixels, np.zeros(f.shape, bool), 1e-3)
    assert iters == 0


def test_diffuse_uniform_boundary():
    px = np.full((30, 30), 77, np.uint8)
    holes = np.zeros(px.shape, bool)
    holes[5:25, 8:22] = True
    px[holes] = 0
    out = diffuse_fill(frame(px), holes)
    assert np.all(out.pixels == 77)


def test_diffuse_ramp_strip():
    # 1-px strip between columns valued 0 and 100, rows above/below carry the ramp
    w = 21
    ramp = np.linspace(0, 100, w)
    vals = np.tile(ramp, (3, 1))
    holes = np.zeros(vals.shape, bool)
    holes[1, 1:-1] = True
    vals[holes] = 0
    tol = 1e-3
    filled, _ = solve_laplace(vals, holes, tol * 255)
    assert np.max(np.abs(filled[1] - ramp)) <= tol * 255


def test_diffuse_ramp_isolated_strip():
    # with replicated edges above and below, the strip is a pure 1-D problem
    w = 11
    vals = np.zeros((1, w))
    vals[0, -1] = 100
    holes = np.zeros_like(vals, bool)
    holes[0, 1:-1] = True
    filled, _ = solve_laplace(vals, holes, 1e-6, 100000)
    assert np.allclose(filled[0], np.linspace(0, 100, w), atol=1e-3)


def test_diffuse_border_hole_replicated_edge():
    px = np.full((12, 12), 40, np.uint8)
    holes = np.zeros(px.shape, bool)
    holes[0:4, 0:4] = True
    px[holes] = 200
    assert np.all(diffuse_fill(frame(px), holes).pixels == 40)


def test_diffuse_all_holes():
    with pytest.raises(DataError):
        solve_laplace(np.zeros((4, 4)), np.ones((4, 4), bool), 1e-3)


@pytest.mark.parametrize("seed", range(4))
def test_diffuse_max_principle_and_residual(seed):
    rng = np.random.default_rng(seed)
    px = texture(48, 64, seed)
    holes = np.zeros(px.shape, bool)
    y, x = rng.integers(4, 20), rng.integers(4, 30)
    holes[y : y + 20, x : x + 28] = True
    out = diffuse_fill(frame(px), holes)
    ring = (np.pad(holes, 1)[:-2, 1:-1] | np.pad(holes, 1)[2:, 1:-1] | np.pad(holes, 1)[1:-1, :-2] | np.pad(holes, 1)[1:-1, 2:]) & ~holes
    lo, hi = px[ring].min(), px[ring].max()
    assert out.pixels[holes].min() >= int(lo) - 1 and out.pixels[holes].max() <= int(hi) + 1
    assert np.array_equal(out.pixels[~holes], px[~holes])
    tol = InpaintParams().diffusion_tol * 255
    filled, _ = solve_laplace(px, holes, tol)
    assert laplace_residual(filled, holes).max() <= 4 * tol


def test_psnr_examples():
    a = frame(texture(20, 20) // 2)
    b = frame(a.pixels + 10)
    assert psnr(a, b) == pytest.approx(28.13, abs=0.01)
    assert psnr(a, a) == 99.0
    with pytest.raises(DataError):
        psnr(a, b, np.zeros(a.shape, bool))
    with pytest.raises(DataError):
        psnr(a, frame(np.zeros((5, 5))))
    reg = np.zeros(a.shape, bool)
    reg[:5] = True
    assert psnr(a, b, reg) == pytest.approx(28.13, abs=0.01)


def brute_ssim(a, b, k=8):
    a = a.astype(float)
    b = b.astype(float)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for y in range(a.shape[0] - k + 1):
        for x in range(a.shape[1] - k + 1):
            wa, wb = a[y : y + k, x : x + k], b[y : y + k, x : x + k]
            ma, mb = wa.mean(), wb.mean()
            va, vb = wa.var(), wb.var()
            cov = ((wa - ma) * (wb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_examples():
    a = frame(texture(24, 30, 5))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    inv = frame(255 - a.pixels)
    s = ssim(a, inv)
    assert s < 0.2
    assert s == pytest.approx(brute_ssim(a.pixels, inv.pixels), abs=1e-9)
    c = frame(np.full((8, 8), 100))
    d = frame(np.full((8, 8), 150))
    c1 = (0.01 * 255) ** 2
    assert ssim(c, d) == pytest.approx((2 * 100 * 150 + c1) / (100**2 + 150**2 + c1), abs=1e-12)
    with pytest.raises(DataError):
        ssim(frame(np.zeros((7, 20))), frame(np.zeros((7, 20))))
    with pytest.raises(DataError):
        ssim(c, frame(np.zeros((9, 9))))


def test_propagate_empty_masks_identity():
    frames = [frame(texture(16, 16, s)) for s in range(3)]
    masks = [np.zeros((16, 16), bool)] * 3
    out, holes = propagate_pixels(frames, masks)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(out, frames))
    assert not any(h.any() for h in holes)
    out = inpaint_sequence(frames, masks)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(out, frames))


def test_propagate_input_checks():
    frames = [frame(texture(16, 16, s)) for s in range(3)]
    with pytest.raises(DataError):
        propagate_pixels(frames, [np.zeros((16, 16), bool)] * 2)
    with pytest.raises(DataError):
        propagate_pixels(frames, [np.zeros((16, 15), bool)] * 3)


def test_propagate_static_mask_all_residual():
    frames = [frame(texture(24, 24, s)) for s in range(4)]
    m = np.zeros((24, 24), bool)
    m[8:14, 6:18] = True
    zero = [FlowField.zeros(24, 24)] * 3
    _, holes = propagate_pixels(frames, [m] * 4, flows=(zero, zero))
    assert all(np.array_equal(h, m) for h in holes)


def sprite_scene(n=12):
    # static camera over a textured wall, one sprite sliding 3 px/frame
    fx, depth, fps = 90.0, 5.0, 30.0
    vx = 3.0 * depth * fps / fx
    sprite = sb.SpriteSpec(14, 12, [20.5, 30.5], depth=depth, velocity=[vx, 0.0, 0.0])
    spec = sb.SceneSpec(width=96, height=72, intrinsics=[fx, fx, 47.5, 35.5], frame_count=n, sprites=[sprite])
    return sb.generate_scene(spec)


def gt_backward(seq):
    # the sprite is the only mover, so negating the forward flow is exact off-sprite
    out = []
    for t, fl in enumerate(seq.gt_flows):
        m = seq.gt_masks[t + 1]
        u = np.zeros(fl.shape)
        u[m] = -fl.u[seq.gt_masks[t]].mean()
        out.append(FlowField(u, np.zeros(fl.shape)))
    return out


def test_propagate_sprite_with_true_flows():
    seq = sprite_scene()
    flows = (seq.gt_flows, gt_backward(seq))
    out, holes = propagate_pixels(seq.frames, seq.gt_masks, flows=flows)
    errs = []
    for o, f, c, m, h in zip(out, seq.frames, seq.clean_frames, seq.gt_masks, holes):
        filled = m & ~h
        errs.append(np.abs(o.pixels[filled].astype(float) - c.pixels[filled]))
        assert np.array_equal(o.pixels[~m], f.pixels[~m])
    assert np.concatenate(errs).mean() < 3.0
    assert sum(h.sum() for h in holes) < 0.05 * sum(m.sum() for m in seq.gt_masks)


def test_inpaint_identity_outside_masks_and_no_holes():
    seq = sprite_scene(8)
    out = inpaint_sequence(seq.frames, seq.gt_masks, flows=(seq.gt_flows, gt_backward(seq)))
    for o, f, c, m in zip(out, seq.frames, seq.clean_frames, seq.gt_masks):
        assert np.array_equal(o.pixels[~m], f.pixels[~m])
        assert psnr(o, c, m) > 25


def test_inpaint_single_frame_is_diffusion():
    f = frame(texture(32, 32, 3))
    m = np.zeros(f.shape, bool)
    m[10:20, 12:18] = True
    out = inpaint_sequence([f], [m])
    assert np.array_equal(out[0].pixels, diffuse_fill(f, m).pixels)
