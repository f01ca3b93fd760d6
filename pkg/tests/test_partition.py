import json

import numpy as np
import pytest

from hetfed.clustering import SuperClustering
from hetfed.ingest import DatasetView, synth_superclusters
from hetfed.partition import (
    MIX4_LAYOUT,
    Method,
    Partition,
    PartitionSpec,
    allocate_clients,
    label_only_view,
    labels_for_percent,
    make_partition,
    partition_cdir,
    partition_cniid,
    partition_iid,
    partition_mix,
    partition_scdir,
    partition_scniid,
)

CIFAR_SC = SuperClustering.from_clusters([[0, 1, 8, 9], [2, 3, 4, 5, 6, 7]])


def balanced(n_per_class, classes=10):
    return label_only_view(np.repeat(np.arange(classes), n_per_class), classes)


def test_iid_equal_sizes():
    part = partition_iid(balanced(10), 10, seed=0)
    assert list(part.client_sizes()) == [10] * 10
    part.validate(balanced(10).train_labels)
    assert part.unassigned == 0


def test_iid_remainder_goes_to_first_client():
    view = label_only_view(np.zeros(101, dtype=int), 1)
    sizes = partition_iid(view, 10).client_sizes()
    assert sizes[0] == 11 and all(s == 10 for s in sizes[1:])


def test_iid_histograms_follow_global_distribution():
    labels = np.repeat(np.arange(5), [100, 200, 300, 150, 250])
    view = label_only_view(labels, 5)
    n, clients = len(labels), 10
    p = np.bincount(labels) / n
    m = n // clients
    hists = np.stack([partition_iid(view, clients, seed=s).label_histograms for s in range(200)])
    sd = np.sqrt(m * p * (1 - p))
    inside = np.abs(hists - m * p) <= 3 * sd
    # a 3-sigma band covers about 99.7% of multinomial draws
    assert inside.mean() >= 0.99
    assert np.all(np.abs(hists.mean(axis=0) - m * p) <= 4 * sd / np.sqrt(200))


def test_iid_errors():
    with pytest.raises(ValueError):
        partition_iid(balanced(1), 11)


def test_cniid_two_labels_each():
    view = balanced(500)
    for seed in range(5):
        part = partition_cniid(view, 100, 2, seed)
        assert all(np.count_nonzero(h) == 2 for h in part.label_histograms)
        assert np.all(part.label_histograms.sum(axis=0) == 500)
        part.validate(view.train_labels)


def test_cniid_single_client_owns_all():
    view = balanced(7, 4)
    part = partition_cniid(view, 1, 4)
    assert part.client_sizes()[0] == 28


def test_cniid_equal_split_among_owners():
    view = balanced(90, 3)
    part = partition_cniid(view, 6, 1, seed=3)
    for c in range(3):
        col = part.label_histograms[:, c]
        owned = col[col > 0]
        assert owned.max() - owned.min() <= 1


def test_cniid_infeasible():
    with pytest.raises(ValueError):
        partition_cniid(balanced(5), 4, 2)
    with pytest.raises(ValueError):
        partition_cniid(balanced(5), 4, 11)


def test_cdir_conserves_totals():
    view = balanced(100)
    part = partition_cdir(view, 20, 0.5, seed=1)
    assert np.array_equal(part.label_histograms.sum(axis=0), view.class_counts())
    part.validate(view.train_labels)


def test_cdir_large_alpha_is_uniform():
    view = balanced(1000, 5)
    for seed in range(50):
        h = partition_cdir(view, 10, 1e6, seed).label_histograms
        share = h / h.sum(axis=0, keepdims=True)
        assert np.all(np.abs(share - 0.1) <= 0.01)


def test_cdir_small_alpha_is_skewed():
    view = balanced(1000, 10)
    maxima = []
    for seed in range(50):
        h = partition_cdir(view, 10, 0.1, seed).label_histograms
        maxima.append((h.max(axis=0) / h.sum(axis=0)).mean())
    assert np.mean(maxima) >= 0.5


def test_allocate_clients_cifar_split():
    assert list(allocate_clients([20000, 30000], 100)) == [40, 60]


def test_allocate_clients_min_one():
    counts = allocate_clients([10000, 1], 5)
    assert list(counts) == [4, 1]
    with pytest.raises(ValueError):
        allocate_clients([1, 1, 1], 2)


def test_scniid_cifar_allocation_and_containment():
    view = balanced(5000)
    for seed in range(20):
        part = partition_scniid(view, CIFAR_SC, 100, 2, seed=seed)
        owner = np.array(part.supercluster_of_client)
        assert np.bincount(owner).tolist() == [40, 60]
        part.validate(view.train_labels)
        groups = [set(g) for g in CIFAR_SC.clusters]
        for cid in range(100):
            assert part.client_labels(cid) <= groups[owner[cid]]


def test_scniid_cross_cluster_pairs_share_no_labels():
    view = balanced(400)
    part = partition_scniid(view, CIFAR_SC, 30, 2, seed=7)
    owner = np.array(part.supercluster_of_client)
    present = part.label_histograms > 0
    for i in range(30):
        for j in range(30):
            if owner[i] != owner[j]:
                assert not np.any(present[i] & present[j])


def test_scniid_two_labels_and_shard_sizes():
    view = balanced(500)
    part = partition_scniid(view, CIFAR_SC, 100, 2, seed=1)
    assert all(1 <= np.count_nonzero(h) <= 2 for h in part.label_histograms)
    assert len(part.shard_sizes) == 2
    assert part.unassigned == 0


def test_scniid_too_many_labels():
    sc = SuperClustering.from_clusters([[0], [1, 2]])
    with pytest.raises(ValueError, match="super cluster 0"):
        partition_scniid(balanced(10, 3), sc, 4, 2)


def test_scniid_coverage_required():
    sc = SuperClustering.from_clusters([[0, 1]])
    with pytest.raises(ValueError, match="cover"):
        partition_scniid(balanced(10, 3), sc, 4, 1)


def test_scdir_one_cluster_matches_cdir():
    view = balanced(50)
    sc = SuperClustering.from_clusters([list(range(10))])
    a = partition_scdir(view, sc, 12, 0.3, seed=5)
    b = partition_cdir(view, 12, 0.3, seed=5)
    # client order differs by the allocation permutation; compare as multisets
    assert sorted(map(tuple, a.label_histograms.tolist())) == sorted(map(tuple, b.label_histograms.tolist()))


def test_scdir_containment():
    view = balanced(300)
    for seed in range(10):
        part = partition_scdir(view, CIFAR_SC, 50, 0.5, seed)
        part.validate(view.train_labels)
        assert np.array_equal(part.label_histograms.sum(axis=0), view.class_counts())


def _fake(name, n_per_class, dim=4, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    return DatasetView(name, rng.random((len(y), dim)).astype(np.float32), y,
                       np.zeros((0, dim)), np.zeros(0, dtype=int), classes, (dim, 1, 1))


def test_mix4_layout_histograms():
    views = [_fake(n, c * 50 + 7, seed=i) for i, (n, c, _, _) in enumerate(MIX4_LAYOUT)]
    part = partition_mix(views, MIX4_LAYOUT, seed=0)
    assert part.num_clients == 97
    assert part.num_classes == 40
    owner = np.array(part.supercluster_of_client)
    for cid, h in enumerate(part.label_histograms):
        k = owner[cid]
        expect = np.zeros(40, dtype=int)
        expect[10 * k:10 * k + 10] = 50
        assert np.array_equal(h, expect)
    labels = np.concatenate([v.train_labels + 10 * i for i, v in enumerate(views)])
    part.validate(labels)


def test_mix_rejects_short_dataset():
    views = [_fake("a", 10), _fake("b", 10)]
    with pytest.raises(ValueError, match="class 0"):
        partition_mix(views, [(2, 60, 6), (1, 50, 5)])
    with pytest.raises(ValueError):
        partition_mix(views, [(1, 40, 5), (1, 50, 5)])


def test_determinism_and_seed_sensitivity():
    view = balanced(60)
    a = partition_cdir(view, 10, 0.5, seed=9)
    b = partition_cdir(view, 10, 0.5, seed=9)
    c = partition_cdir(view, 10, 0.5, seed=10)
    assert a.to_json() == b.to_json()
    assert a.to_json() != c.to_json()


def test_manifest_round_trip(tmp_path):
    view = balanced(40)
    part = partition_scniid(view, CIFAR_SC, 10, 2, seed=2)
    part.to_json(tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert {"spec", "clients", "supercluster_of_client"} <= set(data)
    assert set(data["clients"][0]) == {"id", "indices", "label_histogram"}
    back = Partition.from_json(tmp_path / "m.json")
    assert back.to_json() == part.to_json()
    back.validate(view.train_labels)


def test_validate_catches_tampering():
    view = balanced(20)
    part = partition_iid(view, 4, 0)
    idx = list(part.client_indices)
    idx[1] = np.concatenate([idx[1], idx[0][:1]])
    bad = Partition(part.spec, tuple(idx), part.label_histograms, part.num_samples)
    with pytest.raises(ValueError):
        bad.validate(view.train_labels)


def test_make_partition_dispatch():
    view = balanced(50)
    for spec in [
        PartitionSpec(Method.IID, 5, 1),
        PartitionSpec(Method.C_NIID, 10, 1, labels_per_client=2),
        PartitionSpec(Method.C_DIR, 5, 1, alpha=1.0),
        PartitionSpec(Method.SC_NIID, 10, 1, labels_per_client=2, superclustering=CIFAR_SC),
        PartitionSpec(Method.SC_DIR, 10, 1, alpha=1.0, superclustering=CIFAR_SC),
    ]:
        part = make_partition(spec, view)
        assert part.spec.method is spec.method
        part.validate(view.train_labels)


def test_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(Method.SC_NIID, 10, labels_per_client=2)
    with pytest.raises(ValueError):
        PartitionSpec(Method.C_DIR, 10)
    with pytest.raises(ValueError):
        PartitionSpec(Method.IID, 10, seed=-1)


def test_labels_for_percent():
    assert labels_for_percent(20, 10) == 2
    assert labels_for_percent(30, 10) == 3
    assert labels_for_percent(1, 10) == 1


def test_partition_on_synthetic_features():
    ds = synth_superclusters(2, 3, 50, 40, 10.0, 80.0, 0.05, seed=0)
    sc = SuperClustering.from_clusters([[0, 1, 2], [3, 4, 5]])
    part = partition_scniid(ds, sc, 10, 2, seed=0)
    part.validate(ds.train_labels)
