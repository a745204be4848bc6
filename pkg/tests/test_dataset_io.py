import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dynaclean.dataset_io import (
    FlowField,
    Frame,
    Trajectory,
    associate_timestamps,
    load_frame,
    load_mask,
    parse_trajectory,
    read_flow,
    serialize_trajectory,
    store_frame,
    store_mask,
    write_flow,
)
from dynaclean.errors import (
    BadMagicError,
    BadMaxvalError,
    DataError,
    FormatError,
    SizeMismatchError,
    TruncatedDataError,
)


def write_bytes(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return p


def test_load_p5(tmp_path):
    p = write_bytes(tmp_path, "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    f = load_frame(p)
    assert (f.width, f.height) == (2, 2)
    assert f.pixels.reshape(-1).tolist() == [0, 255, 128, 64]


def test_load_p5_with_comment(tmp_path):
    p = write_bytes(tmp_path, "a.pgm", b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9]))
    assert load_frame(p).pixels.tolist() == [[7, 9]]


@pytest.mark.parametrize(
    "rgb, gray",
    [
        ((255, 255, 255), 255),
        # round(0.299 * 255) = round(76.245)
        ((255, 0, 0), 76),
        # round(0.587 * 255) = round(149.685)
        ((0, 255, 0), 150),
        ((0, 0, 255), 29),
    ],
)
def test_load_p6_luma(tmp_path, rgb, gray):
    p = write_bytes(tmp_path, "c.ppm", b"P6\n1 1\n255\n" + bytes(rgb))
    assert load_frame(p).pixels[0, 0] == gray


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_frame(tmp_path / "missing.pgm")
    with pytest.raises(BadMagicError):
        load_frame(write_bytes(tmp_path, "m.pgm", b"P2\n1 1\n255\n0"))
    with pytest.raises(BadMaxvalError):
        load_frame(write_bytes(tmp_path, "x.pgm", b"P5\n1 1\n65535\n\x00\x00"))
    with pytest.raises(TruncatedDataError):
        load_frame(write_bytes(tmp_path, "t.pgm", b"P5\n2 2\n255\n\x00\x01"))
    # each failure mode is its own exception type
    assert len({BadMagicError, BadMaxvalError, TruncatedDataError, FileNotFoundError}) == 4


def test_store_frame_header(tmp_path):
    f = Frame(np.array([[1, 2, 3], [4, 5, 6]], dtype=np.uint8))
    store_frame(f, tmp_path / "o.pgm")
    data = (tmp_path / "o.pgm").read_bytes()
    assert data == b"P5\n3 2\n255\n" + bytes([1, 2, 3, 4, 5, 6])


def test_empty_frame_rejected():
    with pytest.raises(DataError):
        Frame(np.zeros((0, 0), dtype=np.uint8))


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_frame_roundtrip(tmp_path_factory, px):
    p = tmp_path_factory.mktemp("rt") / "f.pgm"
    store_frame(Frame(px), p)
    assert np.array_equal(load_frame(p).pixels, px)


def test_mask_roundtrip(tmp_path):
    m = np.zeros((4, 5), bool)
    m[1:3, 2] = True
    store_mask(m, tmp_path / "m.pgm")
    assert set(np.unique(load_frame(tmp_path / "m.pgm").pixels)) == {0, 255}
    assert np.array_equal(load_mask(tmp_path / "m.pgm"), m)


def test_flow_single_pixel(tmp_path):
    p = tmp_path / "a.flo"
    write_flow(FlowField([[1.5]], [[-2.0]]), p)
    assert p.stat().st_size == 20
    f = read_flow(p)
    assert f.u[0, 0] == 1.5 and f.v[0, 0] == -2.0


def test_flow_zero_roundtrip(tmp_path):
    write_flow(FlowField.zeros(2, 2), tmp_path / "z.flo")
    f = read_flow(tmp_path / "z.flo")
    assert f.shape == (2, 2) and not f.u.any() and not f.v.any()


def test_flow_errors(tmp_path):
    write_flow(FlowField.zeros(2, 2), tmp_path / "z.flo")
    data = bytearray((tmp_path / "z.flo").read_bytes())
    bad = bytearray(data)
    bad[:4] = b"ABCD"
    with pytest.raises(BadMagicError):
        read_flow(write_bytes(tmp_path, "b.flo", bytes(bad)))
    with pytest.raises(SizeMismatchError):
        read_flow(write_bytes(tmp_path, "s.flo", bytes(data[:-4])))


@settings(max_examples=20, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e3, 1e3, width=32)),
)
def test_flow_roundtrip_property(tmp_path_factory, u):
    p = tmp_path_factory.mktemp("fl") / "f.flo"
    write_flow(FlowField(u, -u), p)
    f = read_flow(p)
    assert np.array_equal(f.u, u.astype(np.float64)) and np.array_equal(f.v, -u.astype(np.float64))


def test_parse_tum_identity():
    t = parse_trajectory("# comment\n0 0 0 0 0 0 0 1\n", "tum")
    assert len(t) == 1
    assert t.timestamps[0] == 0
    np.testing.assert_array_equal(t.quats[0], [0, 0, 0, 1])
    np.testing.assert_array_equal(t.positions[0], [0, 0, 0])


def test_parse_tum_normalizes():
    t = parse_trajectory("1 0 0 0 0 0 0 2\n2 0 0 0 1 1 1 1\n", "tum")
    assert np.allclose(np.linalg.norm(t.quats, axis=1), 1.0, atol=1e-9)


def test_parse_kitti():
    t = parse_trajectory("1 0 0 5 0 1 0 0 0 0 1 0\n1 0 0 6 0 1 0 0 0 0 1 0\n", "kitti")
    assert t.timestamps.tolist() == [0.0, 1.0]
    T = t.matrices()[0]
    hand = np.array([[1, 0, 0, 5], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], float)
    np.testing.assert_allclose(T, hand, atol=1e-12)


def test_parse_kitti_rotation_orthonormal():
    c, s = np.cos(0.3), np.sin(0.3)
    line = f"{c} {-s} 0 1 {s} {c} 0 2 0 0 1 3"
    R = parse_trajectory(line, "kitti").matrices()[0, :3, :3]
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6


@pytest.mark.parametrize(
    "text, fmt",
    [
        ("1 0 0 5 0 1 0 0 0 0 1\n", "kitti"),
        ("1 0 0 0 0 1 0 0 0 0 2 0\n", "kitti"),  # not orthonormal
        ("0 0 0 0 0 0 1\n", "tum"),
        ("0 0 0 nan 0 0 0 1\n", "tum"),
        ("0 0 0 inf 0 0 0 1\n", "tum"),
    ],
)
def test_parse_errors(text, fmt):
    with pytest.raises(FormatError):
        parse_trajectory(text, fmt)


def test_serialize_identity_tum():
    t = Trajectory([0.0], [[0, 0, 0, 1]], [[0, 0, 0]])
    assert serialize_trajectory(t, "tum") == "0.000000000 0 0 0 0 0 0 1\n"


def test_serialize_empty():
    assert serialize_trajectory(Trajectory(), "tum") == ""
    assert serialize_trajectory(Trajectory(), "kitti") == ""


def test_serialize_kitti_requires_integer_stamps():
    t = Trajectory([0.5], [[0, 0, 0, 1]], [[0, 0, 0]])
    with pytest.raises(DataError):
        serialize_trajectory(t, "kitti")


def random_trajectory(rng, n, integer_stamps=False):
    stamps = np.arange(n, dtype=float) if integer_stamps else np.cumsum(rng.uniform(0.01, 0.1, n)) + 1e3
    q = rng.normal(size=(n, 4))
    return Trajectory(stamps, q, rng.uniform(-50, 50, (n, 3)))


def _same_rotation(q1, q2, tol):
    # q and -q encode the same rotation
    d = np.minimum(np.abs(q1 - q2).max(axis=1), np.abs(q1 + q2).max(axis=1))
    return np.all(d < tol)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.sampled_from(["tum", "kitti"]))
def test_trajectory_roundtrip_full_precision(seed, n, fmt):
    t = random_trajectory(np.random.default_rng(seed), n, integer_stamps=fmt == "kitti")
    r = parse_trajectory(serialize_trajectory(t, fmt, digits=17), fmt)
    np.testing.assert_allclose(r.timestamps, t.timestamps, atol=1e-9, rtol=0)
    np.testing.assert_allclose(r.positions, t.positions, atol=1e-9, rtol=0)
    assert _same_rotation(r.quats, t.quats, 1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_trajectory_roundtrip_default_digits(seed, n):
    # 9 significant digits bound the relative error by 5e-9
    t = random_trajectory(np.random.default_rng(seed), n)
    r = parse_trajectory(serialize_trajectory(t, "tum"), "tum")
    np.testing.assert_allclose(r.timestamps, t.timestamps, atol=1e-9, rtol=0)
    np.testing.assert_allclose(r.positions, t.positions, rtol=1e-8, atol=1e-12)
    assert _same_rotation(r.quats, t.quats, 2e-8)
    assert np.allclose(np.linalg.norm(r.quats, axis=1), 1, atol=1e-9)


def _stamps(ts):
    ts = np.asarray(ts, float)
    return Trajectory(ts, np.tile([0, 0, 0, 1.0], (len(ts), 1)), np.zeros((len(ts), 3)))


def test_associate_identical():
    a = _stamps([0.0, 0.1, 0.2, 0.3])
    assert associate_timestamps(a, a, 0.02) == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_associate_30hz_vs_100hz():
    a = _stamps([0.0, 1 / 30, 2 / 30])
    b = _stamps(np.arange(0, 0.2, 0.01) + 0.003)
    pairs = associate_timestamps(a, b, 0.02)
    # brute force: best |dt| per frame over the whole 100 Hz grid
    brute = [np.abs(b.timestamps - t).min() for t in a.timestamps]
    assert len(pairs) == 3
    for (i, j), best in zip(pairs, brute):
        dt = abs(a.timestamps[i] - b.timestamps[j])
        assert dt <= 0.004 and dt == pytest.approx(best)


def test_associate_disjoint():
    assert associate_timestamps(_stamps(np.linspace(0, 1, 5)), _stamps(np.linspace(10, 11, 5)), 0.02) == []


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 10), min_size=0, max_size=30),
    st.lists(st.floats(0, 10), min_size=0, max_size=30),
    st.floats(0.001, 1.0),
)
def test_associate_properties(ta, tb, max_diff):
    a, b = _stamps(sorted(ta)), _stamps(sorted(tb))
    pairs = associate_timestamps(a, b, max_diff)
    js = [j for _, j in pairs]
    assert len(js) == len(set(js))
    for i, j in pairs:
        assert abs(a.timestamps[i] - b.timestamps[j]) <= max_diff


def test_associate_requires_positive_tolerance():
    with pytest.raises(ValueError):
        associate_timestamps(_stamps([0]), _stamps([0]), 0)
