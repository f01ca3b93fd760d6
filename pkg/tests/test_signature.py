import numpy as np
import pytest

from hetfed.ingest import DatasetView, synth_superclusters
from hetfed.numerics import OrthonormalBasis, principal_angles
from hetfed.partition import partition_iid, partition_scniid
from hetfed.clustering import SuperClustering
from hetfed.signature import (
    Measure,
    ProximityMatrix,
    build_signature,
    class_signatures,
    client_proximity,
    compare_datasets,
    eq2_angle,
    eq3_angle,
    proximity,
    proximity_eq2,
    proximity_eq3,
    signature_of_rows,
)


def _view(x, y, name="v", classes=None):
    classes = classes or int(y.max()) + 1
    return DatasetView(name, x, y, np.zeros((0, x.shape[1])), np.zeros(0, dtype=int), classes, (x.shape[1], 1, 1))


def _sig_of_plane(cols, sid, n=6):
    e = np.eye(n)
    return build_signature(e[:, cols] @ np.diag([2.0, 1.0][: len(cols)]), sid, len(cols))


def test_rank_one_data():
    v = np.array([0.0, -0.6, 0.8])
    sig = build_signature(np.tile(v[:, None], (1, 50)), "a", 1)
    assert np.allclose(np.abs(sig.basis.vectors[:, 0]), np.abs(v))
    assert sig.sample_count == 50 and sig.p == 1


def test_recovers_planted_subspace():
    rng = np.random.default_rng(0)
    true = OrthonormalBasis.from_span(rng.standard_normal((20, 2)))
    samples = true.vectors @ rng.standard_normal((2, 300)) + 1e-6 * rng.standard_normal((20, 300))
    sig = build_signature(samples, 0, 2)
    assert principal_angles(sig.basis, true).max() <= 0.01


def test_full_rank_request_spans_samples():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal((8, 3))
    u = build_signature(samples, 0, 3).basis.vectors
    assert np.allclose(u @ (u.T @ samples), samples, atol=1e-10)


def test_build_signature_errors():
    with pytest.raises(ValueError, match="fewer than p"):
        build_signature(np.ones((4, 1)), "x", 2)
    with pytest.raises(ValueError):
        build_signature(np.ones(4), "x", 1)


def test_orthogonal_planes():
    a, b = _sig_of_plane([0, 1], "a"), _sig_of_plane([2, 3], "b")
    assert proximity_eq2([a, b]).entries[0, 1] == pytest.approx(90.0)
    assert proximity_eq3([a, b]).entries[0, 1] == pytest.approx(180.0)


def test_identical_signatures_zero():
    a = _sig_of_plane([0, 1], "a")
    b = _sig_of_plane([0, 1], "b")
    assert proximity_eq2([a, b]).entries[0, 1] == pytest.approx(0.0, abs=1e-6)
    assert proximity_eq3([a, b]).entries[0, 1] == pytest.approx(0.0, abs=1e-6)


def test_eq3_uses_corresponding_order():
    # same plane, vectors listed in swapped order: eq2 sees 0, eq3 sees 2 x 90
    e = np.eye(5)
    a = build_signature(e[:, [0, 1]] @ np.diag([2.0, 1.0]), "a", 2)
    b = build_signature(e[:, [1, 0]] @ np.diag([2.0, 1.0]), "b", 2)
    assert eq2_angle(a, b) == pytest.approx(0.0, abs=1e-6)
    assert eq3_angle(a, b) == pytest.approx(180.0)


def test_eq3_equals_eq2_for_p1():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = build_signature(rng.standard_normal((7, 5)), "a", 1)
        b = build_signature(rng.standard_normal((7, 5)), "b", 1)
        assert eq3_angle(a, b) == eq2_angle(a, b)


def test_dimension_mismatch():
    a = build_signature(np.eye(4)[:, :2], "a", 2)
    b = build_signature(np.eye(5)[:, :2], "b", 2)
    with pytest.raises(ValueError):
        proximity_eq2([a, b])


def test_p_mismatch():
    a = build_signature(np.eye(4)[:, :2], "a", 2)
    b = build_signature(np.eye(4)[:, :2], "b", 1)
    with pytest.raises(ValueError):
        proximity_eq3([a, b])


def test_scaling_invariance():
    rng = np.random.default_rng(3)
    x = rng.random((40, 12))
    s1 = signature_of_rows(x, 0, 2)
    s2 = signature_of_rows(3.7 * x, 0, 2)
    assert np.allclose(s1.basis.vectors, s2.basis.vectors)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    sigs = [build_signature(rng.standard_normal((9, 6)), i, 2) for i in range(5)]
    order = [3, 0, 4, 1, 2]
    for fn in (proximity_eq2, proximity_eq3):
        base = fn(sigs)
        perm = fn([sigs[i] for i in order])
        assert np.array_equal(perm.entries, base.permuted(order).entries)
        assert perm.subjects == tuple(order)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    sigs = [build_signature(rng.standard_normal((9, 6)), i, 2) for i in range(4)]
    prox = proximity_eq2(sigs)
    text = prox.to_csv(tmp_path / "p.csv")
    assert text.splitlines()[0] == "0,1,2,3"
    back = ProximityMatrix.from_csv(tmp_path / "p.csv")
    assert back.subjects == prox.subjects
    assert np.allclose(back.entries, prox.entries, atol=5e-7)
    back.check_symmetric()


def test_csv_rejects_malformed():
    with pytest.raises(ValueError):
        ProximityMatrix.from_csv("a,b\n0,1\n")
    with pytest.raises(ValueError):
        ProximityMatrix.from_csv("a,b\n0,x\n1,0\n")


def test_compare_datasets_self_and_planted():
    rng = np.random.default_rng(6)
    d = 30
    theta = np.radians(35.0)
    e1, e2, e3 = np.eye(d)[:, 0], np.eye(d)[:, 1], np.eye(d)[:, 2]
    # planted lines at 35 degrees; second direction shared noise-free
    a_dir = np.stack([e1, e3], axis=1)
    b_dir = np.stack([np.cos(theta) * e1 + np.sin(theta) * e2, e3 + 0], axis=1)
    b_dir[:, 1] = np.eye(d)[:, 4]
    za = rng.standard_normal((500, 2)) * [3.0, 1.0]
    zb = rng.standard_normal((500, 2)) * [3.0, 1.0]
    a = _view(za @ a_dir.T, np.zeros(500, dtype=int), "a", 1)
    b = _view(zb @ b_dir.T, np.zeros(500, dtype=int), "b", 1)
    eq2, eq3 = compare_datasets(a, a, 2)
    assert eq2 == pytest.approx(0.0, abs=1e-5) and eq3 == pytest.approx(0.0, abs=1e-5)
    eq2, _ = compare_datasets(a, b, 2)
    assert abs(eq2 - 35.0) < 1.0


def test_class_signatures_on_planted_clusters():
    ds = synth_superclusters(2, 2, 100, 30, 0.0, 90.0, 0.0, seed=1)
    prox = proximity_eq2(class_signatures(ds, 2))
    assert prox.entries[0, 1] == pytest.approx(0.0, abs=1e-5)
    assert prox.entries[0, 2] == pytest.approx(90.0, abs=1e-5)


def test_client_proximity_blocks():
    ds = synth_superclusters(2, 2, 200, 30, 10.0, 90.0, 1e-3, seed=2)
    sc = SuperClustering.from_clusters([[0, 1], [2, 3]])
    part = partition_scniid(ds, sc, 6, 2, seed=0)
    prox = client_proximity(part, ds, 2)
    sc_of = np.array(part.supercluster_of_client)
    same = sc_of[:, None] == sc_of[None, :]
    off = ~np.eye(6, dtype=bool)
    assert prox.entries[same & off].max() < 15.0
    assert prox.entries[~same].min() > 85.0


def test_client_proximity_iid_single_subspace():
    rng = np.random.default_rng(7)
    basis = OrthonormalBasis.from_span(rng.standard_normal((25, 2))).vectors
    x = (rng.standard_normal((1000, 2)) * [3.0, 1.5]) @ basis.T + 1e-3 * rng.standard_normal((1000, 25))
    ds = _view(x, rng.integers(0, 4, 1000), classes=4)
    prox = client_proximity(partition_iid(ds, 10, 0), ds, 2)
    assert prox.off_diagonal().max() <= 2.0


def test_client_proximity_names_small_client():
    ds = synth_superclusters(1, 2, 3, 10, 0.0, 0.0, 0.0, seed=0, class_dim=1)
    part = partition_iid(ds, 6, 0)
    with pytest.raises(ValueError, match="client 0"):
        client_proximity(part, ds, 2)


def test_single_client_matrix():
    ds = synth_superclusters(1, 2, 10, 10, 0.0, 0.0, 0.01, seed=0, class_dim=1)
    prox = client_proximity(partition_iid(ds, 1, 0), ds, 2)
    assert prox.entries.shape == (1, 1) and prox.entries[0, 0] == 0.0


def test_proximity_dispatch():
    sigs = [_sig_of_plane([0, 1], 0), _sig_of_plane([1, 2], 1)]
    assert proximity(sigs, "EQ3").measure is Measure.EQ3
    with pytest.raises(ValueError):
        proximity(sigs, Measure.EMD)
