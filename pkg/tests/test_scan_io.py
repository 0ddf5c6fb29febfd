import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_cloud, random_cloud
from oracles import two_pass_stats, welford_stats
from retrip.scan_io import PointCloud, ScanFormatError, load_scan, reflectivity_stats, save_scan


def test_text_three_points_two_rings(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("rtrp v1 3 2\n0 0 0 5 0\n1 0 0 6 0\n0 1 0 7 1\n")
    c = load_scan(p, "organized-text")
    assert len(c) == 3
    assert c.ring_count == 2
    assert c.ring.tolist() == [0, 0, 1]
    assert c.r.tolist() == [5.0, 6.0, 7.0]


def test_empty_body_is_empty_cloud(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("rtrp v1 0 0\n")
    assert len(load_scan(p, "organized-text")) == 0
    b = tmp_path / "e.rtrp"
    save_scan(load_scan(p, "organized-text"), b)
    assert len(load_scan(b)) == 0


def test_negative_reflectivity_names_record(tmp_path):
    lines = [f"{i} 0 0 10 0" for i in range(10)]
    lines[7] = "7 0 0 -1 0"
    p = tmp_path / "bad.txt"
    p.write_text("rtrp v1 10 1\n" + "\n".join(lines) + "\n")
    with pytest.raises(ScanFormatError, match="record 7"):
        load_scan(p, "organized-text")


def test_binary_errors_name_offsets(tmp_path):
    c = make_cloud([1.0, 2.0, 3.0])
    p = tmp_path / "c.rtrp"
    save_scan(c, p)
    data = p.read_bytes()
    (tmp_path / "t.rtrp").write_bytes(data[:-5])
    with pytest.raises(ScanFormatError, match="record 2 at byte"):
        load_scan(tmp_path / "t.rtrp")
    (tmp_path / "m.rtrp").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ScanFormatError, match="magic"):
        load_scan(tmp_path / "m.rtrp")
    (tmp_path / "h.rtrp").write_bytes(data[:7])
    with pytest.raises(ScanFormatError, match="header"):
        load_scan(tmp_path / "h.rtrp")
    bad = bytearray(data)
    bad[16:20] = np.float32(np.nan).tobytes()
    (tmp_path / "n.rtrp").write_bytes(bytes(bad))
    with pytest.raises(ScanFormatError, match="non-finite.*record 0"):
        load_scan(tmp_path / "n.rtrp")


def test_text_malformed(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("rtrp v2 1 1\n0 0 0 1 0\n")
    with pytest.raises(ScanFormatError, match="line 1"):
        load_scan(p)
    p.write_text("rtrp v1 2 1\n0 0 0 1 0\n")
    with pytest.raises(ScanFormatError, match="truncated"):
        load_scan(p)
    p.write_text("rtrp v1 1 1\n0 0 zero 1 0\n")
    with pytest.raises(ScanFormatError, match="line 2"):
        load_scan(p)


def test_round_trip_binary_and_text(tmp_path, rng):
    c = random_cloud(rng, 500, 8)
    save_scan(c, tmp_path / "a.rtrp")
    assert load_scan(tmp_path / "a.rtrp") == c
    save_scan(c, tmp_path / "a.txt")
    t = load_scan(tmp_path / "a.txt")
    assert np.allclose(t.xyz, c.xyz, atol=1e-6) and np.allclose(t.r, c.r, atol=1e-6)
    assert np.array_equal(t.ring, c.ring)


def test_round_trip_synthetic_scan(tmp_path, town_scan):
    assert len(town_scan) > 10_000
    save_scan(town_scan, tmp_path / "s.rtrp")
    back = load_scan(tmp_path / "s.rtrp", frame_id=town_scan.frame_id)
    assert back == town_scan
    assert (tmp_path / "s.rtrp").read_bytes()[:4] == b"RTRP"


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_to_read_only_dir(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_scan(make_cloud([1.0]), d / "x.rtrp")
    finally:
        d.chmod(0o700)


def test_save_to_missing_dir_is_io_error(tmp_path):
    with pytest.raises(OSError):
        save_scan(make_cloud([1.0]), tmp_path / "nope" / "x.rtrp")


def test_stats_examples():
    s = reflectivity_stats(make_cloud([0.0, 0.0]))
    assert (s.mean, s.stddev, s.count) == (0.0, 0.0, 2)
    s = reflectivity_stats(make_cloud([10, 10, 10, 10, 100]))
    assert s.mean == pytest.approx(28.0, abs=1e-12)
    assert s.stddev == pytest.approx(36.0, abs=1e-12)


def test_stats_empty_cloud():
    with pytest.raises(ValueError):
        reflectivity_stats(make_cloud([]))


def test_stats_match_streaming_and_two_pass(rng):
    for _ in range(20):
        r = rng.gamma(2.0, 30.0, rng.integers(1, 3000))
        s = reflectivity_stats(make_cloud(r))
        for mean, std in (two_pass_stats(r.tolist()), welford_stats(r.tolist())):
            assert s.mean == pytest.approx(mean, rel=1e-9, abs=1e-12)
            assert s.stddev == pytest.approx(std, rel=1e-9, abs=1e-12)


refl = st.lists(st.floats(0, 255, allow_nan=False), min_size=1, max_size=200)


@settings(max_examples=60, deadline=None)
@given(refl, st.randoms(use_true_random=False))
def test_stats_permutation_invariant(r, rnd):
    perm = list(r)
    rnd.shuffle(perm)
    a, b = reflectivity_stats(make_cloud(r)), reflectivity_stats(make_cloud(perm))
    assert a.mean == pytest.approx(b.mean, rel=1e-12, abs=1e-12)
    assert a.stddev == pytest.approx(b.stddev, rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(refl, st.floats(0.01, 10), st.floats(0, 100))
def test_stats_affine(r, a, b):
    s = reflectivity_stats(make_cloud(r))
    t = reflectivity_stats(make_cloud([a * v + b for v in r]))
    assert t.mean == pytest.approx(a * s.mean + b, rel=1e-9, abs=1e-9)
    assert t.stddev == pytest.approx(a * s.stddev, rel=1e-9, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e4, 1e4, width=32), st.floats(-1e4, 1e4, width=32),
                          st.floats(-1e4, 1e4, width=32), st.floats(0, 255, width=32),
                          st.integers(0, 3)), max_size=50))
def test_binary_round_trip_bit_exact(tmp_path_factory, recs):
    recs.sort(key=lambda t: t[4])
    arr = np.array([t[:4] for t in recs], dtype=np.float64).reshape(-1, 4)
    c = PointCloud(arr[:, :3], arr[:, 3], [t[4] for t in recs], 4)
    p = tmp_path_factory.mktemp("rt") / "c.rtrp"
    save_scan(c, p)
    back = load_scan(p)
    assert back == c
    assert back.xyz.tobytes() == c.xyz.tobytes()


def test_cloud_invariants():
    with pytest.raises(ValueError):
        make_cloud([1.0, -2.0])
    with pytest.raises(ValueError):
        make_cloud([1.0], xyz=[[math.inf, 0, 0]])
    with pytest.raises(ValueError):
        make_cloud([1.0], ring=[3], ring_count=2)
