import numpy as np
import pytest

from retrip.scan_io import PointCloud


def make_cloud(r, ring=None, xyz=None, ring_count=None, frame_id=0):
    r = np.asarray(r, dtype=np.float64)
    n = len(r)
    if ring is None:
        ring = np.zeros(n, dtype=np.int64)
    ring = np.asarray(ring)
    if xyz is None:
        xyz = np.column_stack([np.arange(n, dtype=np.float64), np.zeros(n), np.zeros(n)])
    if ring_count is None:
        ring_count = int(ring.max()) + 1 if n else 0
    return PointCloud(xyz, r, ring, ring_count, frame_id)


def random_cloud(rng, n=200, rings=4, scale=20.0):
    xyz = rng.uniform(-scale, scale, (n, 3)).astype(np.float32).astype(np.float64)
    r = rng.uniform(0, 255, n).astype(np.float32).astype(np.float64)
    # every ring non-empty, points grouped by ring
    ring = np.sort(np.concatenate([np.arange(rings), rng.integers(0, rings, n - rings)]))
    return PointCloud(xyz, r, ring, rings)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def town_scan():
    from retrip import synth

    p = synth.preset("town")
    scene = synth.generate_scene(p.scene)
    traj = synth.make_trajectory(scene, p.spacing)
    return synth.render_scan(scene, traj.poses[40], p.model, p.scene, index=40, frame_id=40)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
