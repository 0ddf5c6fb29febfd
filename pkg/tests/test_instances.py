import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import make_cloud
from oracles import union_find_clusters
from retrip.instances import (
    LABEL_ARP, LABEL_RRP, Cluster, ClusterConfig, Instance, build_key_instance_set, euclidean_cluster,
    make_instances, segment_instances,
)
from retrip.keypoints import KeypointConfig, extract_keypoints


def _cloud_xyz(xyz):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return make_cloud(np.zeros(len(xyz)), xyz=xyz)


def test_two_far_blobs(rng):
    a = rng.normal(0, 0.05, (5, 3))
    b = rng.normal(0, 0.05, (5, 3)) + [10, 0, 0]
    c = _cloud_xyz(np.vstack([a, b]))
    cl = euclidean_cluster(c, range(10), ClusterConfig())
    assert [len(x.members) for x in cl] == [5, 5]
    assert cl[0].members.tolist() == [0, 1, 2, 3, 4]


def test_chain_at_exact_radius_is_one_cluster():
    c = _cloud_xyz([[0.5 * i, 0, 0] for i in range(8)])
    cl = euclidean_cluster(c, range(8), ClusterConfig(radius=0.5))
    assert len(cl) == 1 and len(cl[0].members) == 8


def test_size_bounds_and_empty():
    c = _cloud_xyz([[0, 0, 0], [0.1, 0, 0], [5, 0, 0]])
    assert euclidean_cluster(c, [], ClusterConfig()) == []
    cl = euclidean_cluster(c, [0, 1, 2], ClusterConfig(min_cluster_size=2, max_cluster_size=2))
    assert [x.members.tolist() for x in cl] == [[0, 1]]


def test_clusters_match_union_find_oracle(rng):
    for trial in range(100):
        n = int(rng.integers(1, 501))
        pts = rng.uniform(0, rng.uniform(2, 15), (n, 3))
        c = _cloud_xyz(pts)
        cfg = ClusterConfig(radius=float(rng.uniform(0.2, 1.0)), min_cluster_size=int(rng.integers(1, 6)),
                            max_cluster_size=int(rng.integers(6, 200)))
        sel = np.flatnonzero(rng.random(n) < 0.8)
        got = {frozenset(x.members.tolist()) for x in euclidean_cluster(c, sel, cfg)}
        local = union_find_clusters(pts[sel].tolist(), cfg.radius, cfg.min_cluster_size, cfg.max_cluster_size)
        want = {frozenset(int(sel[i]) for i in g) for g in local}
        assert got == want, trial


def test_cluster_order_independent(rng):
    pts = rng.uniform(0, 4, (300, 3))
    perm = rng.permutation(300)
    a = {frozenset(x.members.tolist()) for x in euclidean_cluster(_cloud_xyz(pts), range(300), ClusterConfig())}
    b = {frozenset(perm[x.members].tolist())
         for x in euclidean_cluster(_cloud_xyz(pts[perm]), range(300), ClusterConfig())}
    assert a == b


def test_make_instances_centroids(rng):
    c = _cloud_xyz([[1, 2, 3]] * 3 + [[0, 0, 0], [2, 0, 0]])
    inst = make_instances(c, [Cluster(np.array([0, 1, 2]), LABEL_ARP), Cluster(np.array([3, 4]), LABEL_RRP)])
    assert inst[0].centroid == (1.0, 2.0, 3.0) and inst[0].label == 1 and inst[0].size == 3
    assert inst[1].centroid == (1.0, 0.0, 0.0) and inst[1].label == 0
    pts = rng.normal(0, 30, (400, 3))
    c = _cloud_xyz(pts)
    for _ in range(20):
        m = np.sort(rng.choice(400, int(rng.integers(1, 50)), replace=False))
        (i,) = make_instances(c, [Cluster(m, LABEL_ARP)])
        naive = [sum(pts[j][a] for j in m) / len(m) for a in range(3)]
        assert np.allclose(i.centroid, naive, atol=1e-9)


def _inst(size, x, label=LABEL_ARP, first=0):
    return Instance((float(x), 0.0, 0.0), label, size, first)


def test_key_set_selection_cases():
    ari = [_inst(10 + i, i) for i in range(25)]
    ks = build_key_instance_set(ari, [], 20)
    assert len(ks) == 20 and all(i.label == LABEL_ARP for i in ks)
    assert [i.size for i in ks] == list(range(34, 14, -1))

    ari = [_inst(10 + i, i) for i in range(5)]
    rri = [_inst(100 + i, i, LABEL_RRP) for i in range(30)]
    ks = build_key_instance_set(ari, rri, 20)
    assert ks.labels.tolist() == [1] * 5 + [0] * 15
    assert [i.size for i in ks][5:] == list(range(129, 114, -1))

    ks = build_key_instance_set([], [_inst(5, 1, LABEL_RRP), _inst(6, 2, LABEL_RRP)], 20)
    assert len(ks) == 2


def test_key_set_tie_breaks():
    a = _inst(10, 5.0, first=3)
    b = _inst(10, 2.0, first=9)
    c = _inst(10, 2.0, first=1)
    ks = build_key_instance_set([a, b, c], [], 20)
    assert [i.first_index for i in ks] == [1, 9, 3]


def test_key_set_rejects_mislabelled():
    with pytest.raises(ValueError):
        build_key_instance_set([_inst(5, 1, LABEL_RRP)], [], 20)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(5, 40), max_size=30), st.lists(st.integers(5, 40), max_size=30), st.integers(3, 25))
def test_key_set_properties(ari_sizes, rri_sizes, k):
    ari = [_inst(s, i, LABEL_ARP, i) for i, s in enumerate(ari_sizes)]
    rri = [_inst(s, i, LABEL_RRP, 100 + i) for i, s in enumerate(rri_sizes)]
    ks = build_key_instance_set(ari, rri, k)
    assert len(ks) == min(k, len(ari) + len(rri))
    labels = ks.labels.tolist()
    if LABEL_RRP in labels:
        assert labels.count(LABEL_ARP) == len(ari)
        assert labels == sorted(labels, reverse=True)
    for lab in (LABEL_ARP, LABEL_RRP):
        sizes = [i.size for i in ks if i.label == lab]
        assert sizes == sorted(sizes, reverse=True)


def test_rigid_equivariance(town_scan, rng):
    cfg = ClusterConfig()
    part = extract_keypoints(town_scan, KeypointConfig())
    base = segment_instances(town_scan, part, cfg)
    assert len(base) >= 3
    rot = Rotation.random(random_state=7).as_matrix()
    # rotations about the sensor keep origin distances, so the full order survives
    spun = segment_instances(town_scan.transformed(rot, np.zeros(3)), part, cfg)
    assert [i.first_index for i in spun] == [i.first_index for i in base]
    assert np.allclose(spun.centroids, base.centroids @ rot.T, atol=1e-9)
    # a translation may reorder equal-size instances (distance tie-break), nothing else
    t = rng.uniform(-50, 50, 3)
    moved = segment_instances(town_scan.transformed(rot, t), part, cfg)
    assert moved.labels.tolist() == base.labels.tolist()
    assert moved.sizes.tolist() == base.sizes.tolist()
    before = {i.first_index: i for i in base}
    for i in moved:
        assert np.allclose(i.centroid, before[i.first_index].position @ rot.T + t, atol=1e-9)


def test_config_validation():
    for bad in ({"radius": 0}, {"min_cluster_size": 0}, {"min_cluster_size": 9, "max_cluster_size": 8}, {"k": 2}):
        with pytest.raises(ValueError):
            ClusterConfig(**bad)
