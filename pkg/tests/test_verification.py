import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import make_cloud
from retrip import synth
from retrip.descriptor import build_descriptors
from retrip.instances import Instance, KeyInstanceSet
from retrip.retrieval import DescriptorDB, MatchConfig
from retrip.scan_io import ReflectivityStats, reflectivity_stats
from retrip.verification import (
    PlaneArray, RigidTransform, TransformError, VerifyConfig, assign_layer, estimate_transform, extract_planes,
    plane_coincidence, verify_loop,
)

CFG = VerifyConfig()


def _rigid(seed):
    rng = np.random.default_rng(seed)
    return Rotation.random(random_state=seed).as_matrix(), rng.uniform(-100, 100, 3)


def _rot_angle(a, b):
    # chord form: well conditioned near zero, unlike arccos of the trace
    return float(2 * np.arcsin(min(1.0, np.linalg.norm(a - b) / (2 * np.sqrt(2)))))


def _check_rigid(t: RigidTransform):
    assert np.allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-9)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-9)


def test_defaults():
    assert (CFG.sigma_n, CFG.sigma_d, CFG.sigma_lambda) == (0.2, 0.3, 3)
    assert (CFG.voxel_size, CFG.planarity_ratio, CFG.min_voxel_points, CFG.z_l, CFG.accept_threshold) == \
        (1.0, 0.1, 10, 1.0, 0.3)


# -- planes ---------------------------------------------------------------------

def test_exact_plane_in_one_voxel(rng):
    xy = rng.uniform(0.05, 0.95, (200, 2))
    xyz = np.column_stack([xy + 3.0, np.full(200, 0.0)])
    c = make_cloud(np.full(200, 10.0), xyz=xyz)
    planes = extract_planes(c, reflectivity_stats(c), CFG)
    assert len(planes) == 1
    assert np.allclose(np.abs(planes.normals[0]), [0, 0, 1], atol=1e-12)
    assert planes.centers[0][2] == pytest.approx(0.0, abs=1e-12)
    assert planes.support[0] == 200


def test_gaussian_ball_is_not_a_plane(rng):
    xyz = rng.normal(0, 0.1, (400, 3)) + 5.5
    c = make_cloud(np.full(400, 10.0), xyz=xyz)
    assert len(extract_planes(c, reflectivity_stats(c), CFG)) == 0


def test_normals_are_unit_and_face_sensor(town_scan):
    planes = extract_planes(town_scan, reflectivity_stats(town_scan), CFG)
    assert len(planes) > 50
    assert np.allclose(np.linalg.norm(planes.normals, axis=1), 1.0, atol=1e-9)
    assert np.all(np.einsum("ij,ij->i", planes.normals, -planes.centers) >= 0)
    assert set(planes.layers.tolist()) <= set(range(5))


def test_room_walls_recovered():
    p = synth.preset("room")
    scene = synth.generate_scene(p.scene)
    pose = RigidTransform(np.eye(3), np.array([0.5, -0.3, 1.2]))
    scan = synth.render_scan(scene, pose, p.model, p.scene)
    planes = extract_planes(scan, reflectivity_stats(scan), CFG)
    normals = planes.normals
    walls = [np.array(v, dtype=float) for v in ([1, 0, 0], [0, 1, 0], [-1, 0, 0])][: p.scene.num_walls]
    for w in walls:
        cos = np.abs(normals @ w)
        assert np.degrees(np.arccos(np.clip(cos.max(), -1, 1))) < 2.0
        assert (cos > np.cos(np.radians(2))).sum() >= 1


# -- layers ---------------------------------------------------------------------

def test_layer_examples():
    s = ReflectivityStats(30.0, 10.0, 100)
    assert assign_layer(30.0, s, 1.0) == 0
    assert assign_layer(30.0 + 2.5 * 10.0 * 1.5, s, 1.5) == 2
    assert assign_layer(30.0 + 100 * 10.0, s, 1.0) == 4
    assert assign_layer(0.0, s, 1.0) == 0
    assert assign_layer(50.0, ReflectivityStats(30.0, 0.0, 5), 1.0) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 255), min_size=2, max_size=30), st.floats(0.1, 10), st.floats(0, 100),
       st.floats(0.2, 3))
def test_layer_monotone_and_affine_invariant(vals, a, b, z_l):
    s = ReflectivityStats(float(np.mean(vals)), float(np.std(vals)), len(vals))
    if s.stddev < 1e-3:
        return
    v = np.sort(np.asarray(vals))
    lay = assign_layer(v, s, z_l)
    assert np.all(np.diff(lay) >= 0)
    s2 = ReflectivityStats(a * s.mean + b, a * s.stddev, s.count)
    z = (v - s.mean) / (s.stddev * z_l)
    if np.any(np.abs(z - np.round(z)) < 1e-6):
        return  # an exact layer boundary may round either way
    assert np.array_equal(assign_layer(a * v + b, s2, z_l), lay)


# -- transform estimation ---------------------------------------------------------

def test_identity(rng):
    p = rng.uniform(-10, 10, (12, 3))
    t = estimate_transform(p, p)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12) and np.allclose(t.translation, 0, atol=1e-12)


def test_exact_recovery_1000_trials():
    worst_r = worst_t = 0.0
    for seed in range(1000):
        rot, t = _rigid(seed)
        rng = np.random.default_rng(seed + 10_000)
        q = rng.uniform(-50, 50, (int(rng.integers(3, 40)), 3))
        est = estimate_transform(q, q @ rot.T + t)
        worst_r = max(worst_r, _rot_angle(est.rotation, rot))
        worst_t = max(worst_t, float(np.linalg.norm(est.translation - t)))
    assert worst_r < 1e-9 and worst_t < 1e-9


def test_noisy_recovery_monte_carlo():
    ok = 0
    for seed in range(1000):
        rot, t = _rigid(seed)
        rng = np.random.default_rng(seed + 20_000)
        q = rng.uniform(-20, 20, (50, 3))
        r = q @ rot.T + t + rng.normal(0, 0.01, (50, 3))
        est = estimate_transform(q, r)
        _check_rigid(est)
        ok += np.linalg.norm(est.translation - t) < 0.01
    assert ok >= 950


def test_estimation_errors():
    with pytest.raises(TransformError):
        estimate_transform([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [1, 0, 0]])
    line = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]
    with pytest.raises(TransformError):
        estimate_transform(line, line)


def test_reflection_is_corrected(rng):
    q = rng.uniform(-5, 5, (10, 3))
    mirrored = q * [1, 1, -1]
    _check_rigid(estimate_transform(q, mirrored))


def test_equivariance(rng):
    rot, t = _rigid(3)
    r0, _ = _rigid(4)
    q = rng.uniform(-10, 10, (20, 3))
    r = q @ rot.T + t + rng.normal(0, 0.05, (20, 3))
    a = estimate_transform(q, r)
    b = estimate_transform(q @ r0.T, r)
    assert np.allclose(b.rotation, a.rotation @ r0.T, atol=1e-9)
    assert np.allclose(b.translation, a.translation, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 30), st.floats(0, 5))
def test_output_always_rigid(seed, n, noise):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-10, 10, (n, 3))
    r = rng.uniform(-10, 10, (n, 3)) * noise + q
    try:
        _check_rigid(estimate_transform(q, r))
    except TransformError:
        pass


# -- coincidence ----------------------------------------------------------------

def _planes(n, rng, layers=None):
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PlaneArray(rng.uniform(-20, 20, (n, 3)), normals,
                      layers if layers is not None else rng.integers(0, 5, n), np.full(n, 20))


def test_coincidence_identity_and_layer_shift(rng):
    p = _planes(40, rng, layers=np.zeros(40, dtype=int))
    assert plane_coincidence(p, p, RigidTransform.identity(), CFG) == (1.0, 40)
    shifted = PlaneArray(p.centers, p.normals, p.layers + CFG.sigma_lambda + 1, p.support)
    assert plane_coincidence(shifted, p, RigidTransform.identity(), CFG) == (0.0, 0)
    assert plane_coincidence(PlaneArray.empty(), p, RigidTransform.identity(), CFG) == (0.0, 0)


def test_coincidence_rigid_invariance(rng):
    pq = _planes(30, rng)
    rot, t = _rigid(11)
    rel = RigidTransform(rot, t)
    pr = PlaneArray(rel.apply(pq.centers), rel.rotate(pq.normals), pq.layers, pq.support)
    base = plane_coincidence(pq, pr, rel, CFG)
    assert base[0] == 1.0
    g = RigidTransform(*_rigid(12))
    move = lambda p, T: PlaneArray(T.apply(p.centers), T.rotate(p.normals), p.layers, p.support)  # noqa: E731
    # move both frames by g; the relative transform becomes g rel g^-1
    rel2 = g.compose(rel).compose(g.inverse())
    assert plane_coincidence(move(pq, g), move(pr, g), rel2, CFG) == base


def _scene_scan_pair(offset):
    p = synth.preset("town")
    scene = synth.generate_scene(p.scene)
    traj = synth.make_trajectory(scene, p.spacing)
    a = traj.poses[100]
    b = RigidTransform(a.rotation @ Rotation.from_euler("z", 0.2).as_matrix(), a.translation + offset)
    cfg = p.scene
    sa = synth.render_scan(scene, a, p.model, cfg, index=1)
    sb = synth.render_scan(scene, b, p.model, cfg, index=2)
    return sa, sb, a.inverse().compose(b)


def test_two_views_of_one_scene_coincide():
    sa, sb, rel = _scene_scan_pair(np.array([1.5, -1.0, 0.0]))
    pa = extract_planes(sa, reflectivity_stats(sa), CFG)
    pb = extract_planes(sb, reflectivity_stats(sb), CFG)
    score, _ = plane_coincidence(pb, pa, rel, CFG)
    assert score > 0.8
    wrong = RigidTransform(np.eye(3), np.array([0.0, 7.0, 0.0]))
    assert plane_coincidence(pb, pa, wrong, CFG)[0] < score


# -- verify_loop ------------------------------------------------------------------

def _tri_key_set(frame, points=((0, 0, 5), (9, 0, 5), (0, 12, 5), (7, 7, 6))):
    return KeyInstanceSet(tuple(Instance(tuple(map(float, p)), 1, 20, i) for i, p in enumerate(points)), frame)


def _panel_cloud(panel_r, rng):
    """Flat panels plus a non-planar low-reflectivity blob that dominates the statistics."""
    xy = rng.uniform(0, 6, (3000, 2))
    panels = np.column_stack([xy, np.full(3000, 2.0)])
    blob = rng.normal(0, 0.8, (60000, 3)) + [20, 20, 5]
    xyz = np.vstack([panels, blob])
    r = np.concatenate([np.full(3000, panel_r), rng.normal(10, 2, 60000).clip(0)])
    return make_cloud(r, xyz=xyz)


def _db_with(frame_ks, planes):
    db = DescriptorDB()
    db.insert_frame(build_descriptors(frame_ks), frame_ks, planes)
    return db


def test_verify_same_frame(rng):
    c = _panel_cloud(200.0, rng)
    planes = extract_planes(c, reflectivity_stats(c), CFG)
    db = _db_with(_tri_key_set(0), planes)
    (cand,) = db.retrieve_candidates(build_descriptors(_tri_key_set(0)), MatchConfig(exclusion=None))
    res = verify_loop(db, cand, planes, CFG)
    assert res.accepted and res.coincidence == 1.0
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-9)


def test_verify_rejects_differently_reflective_scene(rng):
    bright = _panel_cloud(200.0, rng)
    dull = _panel_cloud(10.0, rng)
    pq = extract_planes(bright, reflectivity_stats(bright), CFG)
    pr = extract_planes(dull, reflectivity_stats(dull), CFG)
    assert len(pq) > 20 and min(pq.layers) - max(pr.layers) >= CFG.sigma_lambda
    db = _db_with(_tri_key_set(0), pr)
    (cand,) = db.retrieve_candidates(build_descriptors(_tri_key_set(1)), MatchConfig(exclusion=None))
    res = verify_loop(db, cand, pq, CFG)
    assert not res.accepted and res.coincidence == 0.0
    # with layers ignored the same geometry passes
    loose = VerifyConfig(sigma_lambda=10)
    assert verify_loop(db, cand, pq, loose).accepted


def test_verify_needs_three_correspondences(rng):
    planes = _planes(10, rng)
    db = _db_with(_tri_key_set(0), planes)
    (cand,) = db.retrieve_candidates(build_descriptors(_tri_key_set(1)), MatchConfig(exclusion=None))
    cand.query_index = cand.query_index[:0]
    cand.stored = cand.stored[:0]
    cand.votes = 0
    res = verify_loop(db, cand, planes, CFG)
    assert not res.accepted and res.coincidence == 0.0 and res.inlier_pairs == 0
    # a stricter vote floor rejects candidates below it
    (cand,) = db.retrieve_candidates(build_descriptors(_tri_key_set(1)), MatchConfig(exclusion=None))
    assert not verify_loop(db, cand, planes, VerifyConfig(min_votes=cand.votes + 1)).accepted


def test_accept_iff_threshold(rng):
    c = _panel_cloud(200.0, rng)
    planes = extract_planes(c, reflectivity_stats(c), CFG)
    db = _db_with(_tri_key_set(0), planes)
    (cand,) = db.retrieve_candidates(build_descriptors(_tri_key_set(0)), MatchConfig(exclusion=None))
    for thr in (0.0, 0.5, 1.0):
        res = verify_loop(db, cand, planes, VerifyConfig(accept_threshold=thr))
        assert res.accepted == (res.coincidence >= thr)


def test_config_validation():
    for bad in ({"voxel_size": 0}, {"sigma_lambda": -1}, {"sigma_lambda": 1.5}, {"accept_threshold": 1.5},
                {"min_voxel_points": 2}):
        with pytest.raises(ValueError):
            VerifyConfig(**bad)
