"""Client data partitioners: IID, label skew, Dirichlet, their super-cluster variants and MIX.

Every partitioner is a pure function of its arguments and a 64-bit seed.
Random streams are derived with ``numpy.random.SeedSequence`` from
``(seed, stream tag, ...)`` so independent pieces never share state.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .clustering import SuperClustering
from .ingest import DatasetView

_STREAM_TAGS = {"iid": 1, "cniid": 2, "dir": 3, "alloc": 4, "scniid": 5, "mix": 6, "cka": 7}


class Method(str, Enum):
    IID = "IID"
    C_NIID = "C_NIID"
    C_DIR = "C_DIR"
    SC_NIID = "SC_NIID"
    SC_DIR = "SC_DIR"
    MIX = "MIX"


@dataclass(frozen=True)
class PartitionSpec:
    method: Method
    num_clients: int
    seed: int = 0
    labels_per_client: Optional[int] = None
    alpha: Optional[float] = None
    shards_per_client: int = 2
    superclustering: Optional[SuperClustering] = None
    # (dataset name, client count, samples per client, samples per class)
    mix_layout: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.method in (Method.SC_NIID, Method.SC_DIR) and self.superclustering is None:
            raise ValueError(f"{self.method.value} requires a superclustering")
        if self.method in (Method.C_DIR, Method.SC_DIR):
            if self.alpha is None or not self.alpha > 0:
                raise ValueError("Dirichlet methods need alpha > 0")
        if self.method in (Method.C_NIID, Method.SC_NIID) and not self.labels_per_client:
            raise ValueError(f"{self.method.value} requires labels_per_client >= 1")
        if self.shards_per_client < 1:
            raise ValueError("shards_per_client must be >= 1")

    def to_dict(self) -> dict:
        out = {
            "method": self.method.value,
            "num_clients": self.num_clients,
            "seed": self.seed,
            "labels_per_client": self.labels_per_client,
            "alpha": self.alpha,
            "shards_per_client": self.shards_per_client,
        }
        if self.superclustering is not None:
            out["superclusters"] = self.superclustering.clusters
        if self.mix_layout is not None:
            out["mix_layout"] = [list(r) for r in self.mix_layout]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        sc = d.get("superclusters")
        layout = d.get("mix_layout")
        return cls(
            method=Method(d["method"]),
            num_clients=int(d["num_clients"]),
            seed=int(d.get("seed", 0)),
            labels_per_client=d.get("labels_per_client"),
            alpha=d.get("alpha"),
            shards_per_client=int(d.get("shards_per_client", 2)),
            superclustering=SuperClustering.from_clusters(sc) if sc is not None else None,
            mix_layout=tuple(tuple(r) for r in layout) if layout is not None else None,
        )


@dataclass(frozen=True)
class Partition:
    spec: PartitionSpec
    client_indices: tuple
    label_histograms: np.ndarray
    num_samples: int
    supercluster_of_client: Optional[tuple] = None
    # nominal shard size per super cluster (SC_NIID only)
    shard_sizes: Optional[tuple] = None
    unassigned: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    @property
    def num_classes(self) -> int:
        return self.label_histograms.shape[1]

    def client_sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.client_indices])

    def client_labels(self, cid: int) -> set:
        return set(np.flatnonzero(self.label_histograms[cid]).tolist())

    def validate(self, labels: np.ndarray) -> None:
        """Raise ``ValueError`` if any partition invariant fails for ``labels``."""
        labels = np.asarray(labels)
        seen = np.zeros(self.num_samples, dtype=bool)
        for cid, idx in enumerate(self.client_indices):
            if idx.size and (idx.min() < 0 or idx.max() >= self.num_samples):
                raise ValueError(f"client {cid}: index out of range")
            if np.any(seen[idx]) or len(np.unique(idx)) != len(idx):
                raise ValueError(f"client {cid}: overlapping sample indices")
            seen[idx] = True
            hist = np.bincount(labels[idx], minlength=self.num_classes)
            if not np.array_equal(hist, self.label_histograms[cid]):
                raise ValueError(f"client {cid}: label histogram inconsistent with indices")
        if self.num_samples - int(seen.sum()) != self.unassigned:
            raise ValueError("unassigned sample count mismatch")
        sc = self.spec.superclustering
        if self.spec.method in (Method.SC_NIID, Method.SC_DIR):
            groups = [set(c) for c in sc.clusters]
            for cid in range(self.num_clients):
                own = self.client_labels(cid)
                k = self.supercluster_of_client[cid]
                if not own <= groups[k]:
                    raise ValueError(f"client {cid}: labels {sorted(own)} leave super cluster {k}")

    def to_dict(self) -> dict:
        out = {
            "spec": self.spec.to_dict(),
            "num_samples": self.num_samples,
            "num_classes": self.num_classes,
            "unassigned": self.unassigned,
            "clients": [
                {
                    "id": cid,
                    "indices": idx.tolist(),
                    "label_histogram": self.label_histograms[cid].tolist(),
                }
                for cid, idx in enumerate(self.client_indices)
            ],
        }
        if self.supercluster_of_client is not None:
            out["supercluster_of_client"] = list(self.supercluster_of_client)
        if self.shard_sizes is not None:
            out["shard_size"] = list(self.shard_sizes)
        return out

    def to_json(self, path: str | os.PathLike | None = None) -> str:
        text = json.dumps(self.to_dict(), separators=(",", ":")) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        clients = sorted(d["clients"], key=lambda c: c["id"])
        sc_of = d.get("supercluster_of_client")
        shards = d.get("shard_size")
        return cls(
            spec=PartitionSpec.from_dict(d["spec"]),
            client_indices=tuple(np.asarray(c["indices"], dtype=np.int64) for c in clients),
            label_histograms=np.asarray([c["label_histogram"] for c in clients], dtype=np.int64),
            num_samples=int(d["num_samples"]),
            supercluster_of_client=tuple(sc_of) if sc_of is not None else None,
            shard_sizes=tuple(shards) if shards is not None else None,
            unassigned=int(d.get("unassigned", 0)),
        )

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "Partition":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ------------------------------------------------------------------ helpers ---

def stream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_TAGS[tag], *map(int, keys)]))


def labels_for_percent(percent: float, total_labels: int) -> int:
    """Label count for a label-skew percentage, rounded, at least one."""
    return max(1, int(round(percent / 100.0 * total_labels)))


def label_only_view(labels: Sequence[int], num_classes: int, name: str = "labels") -> DatasetView:
    """A feature-less view, enough for every partitioner."""
    y = np.asarray(labels, dtype=np.int64)
    empty = np.zeros((len(y), 0), dtype=np.float32)
    return DatasetView(name, empty, y, np.zeros((0, 0), dtype=np.float32),
                       np.zeros(0, dtype=np.int64), num_classes, (0, 1, 1))


def _finish(spec, buckets, labels, num_classes, **kw) -> Partition:
    idx = tuple(np.sort(np.asarray(b, dtype=np.int64)) for b in buckets)
    hist = np.array(
        [np.bincount(labels[i], minlength=num_classes) for i in idx], dtype=np.int64
    ).reshape(len(idx), num_classes)
    assigned = int(sum(len(i) for i in idx))
    return Partition(spec, idx, hist, len(labels), unassigned=len(labels) - assigned, **kw)


def _dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet via normalized Gamma(alpha, 1) draws."""
    g = rng.standard_gamma(alpha, size=k)
    total = g.sum()
    if not np.isfinite(total) or total <= 0:
        out = np.zeros(k)
        out[rng.integers(k)] = 1.0
        return out
    return g / total


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    rest = total - int(counts.sum())
    if rest > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rest]] += 1
    return counts


def _dirichlet_allocate(labels, classes, clients, alpha, rng, buckets) -> None:
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = _dirichlet(rng, alpha, len(clients))
        counts = _largest_remainder(props, len(idx))
        for cid, chunk in zip(clients, np.split(idx, np.cumsum(counts)[:-1])):
            buckets[cid].extend(chunk.tolist())


def _check_super_clusters(view: DatasetView, sc: SuperClustering) -> list[list[int]]:
    groups = [[int(c) for c in g] for g in sc.clusters]
    covered = {c for g in groups for c in g}
    present = set(np.unique(view.train_labels).tolist())
    missing = present - covered
    if missing:
        raise ValueError(f"superclustering does not cover labels {sorted(missing)}")
    return groups


def allocate_clients(cluster_sizes: Sequence[int], num_clients: int) -> np.ndarray:
    """Clients per cluster proportional to sample counts (largest remainder).

    Every non-empty cluster receives at least one client.
    """
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    nonempty = sizes > 0
    if num_clients < int(nonempty.sum()):
        raise ValueError(
            f"{num_clients} clients cannot cover {int(nonempty.sum())} non-empty super clusters"
        )
    counts = _largest_remainder(sizes / sizes.sum(), num_clients)
    while np.any(nonempty & (counts == 0)):
        need = int(np.flatnonzero(nonempty & (counts == 0))[0])
        donor = int(np.argmax(np.where(counts > 1, counts, -1)))
        counts[donor] -= 1
        counts[need] += 1
    return counts


def _cluster_clients(view, groups, num_clients, seed):
    sizes = [int(np.isin(view.train_labels, g).sum()) for g in groups]
    counts = allocate_clients(sizes, num_clients)
    perm = stream(seed, "alloc").permutation(num_clients)
    members, start = [], 0
    for n in counts:
        members.append(sorted(perm[start:start + n].tolist()))
        start += n
    owner = np.empty(num_clients, dtype=np.int64)
    for k, cl in enumerate(members):
        owner[cl] = k
    return members, tuple(owner.tolist())


# ------------------------------------------------------------- partitioners ---

def partition_iid(dataset: DatasetView, num_clients: int, seed: int = 0) -> Partition:
    """Shuffled equal split; the first ``n % num_clients`` clients get one extra sample."""
    n = dataset.num_train
    if n == 0:
        raise ValueError("dataset is empty")
    if num_clients > n:
        raise ValueError(f"{num_clients} clients exceed {n} samples")
    spec = PartitionSpec(Method.IID, num_clients, seed)
    perm = stream(seed, "iid").permutation(n)
    return _finish(spec, np.array_split(perm, num_clients), dataset.train_labels, dataset.num_classes)


def partition_cniid(dataset: DatasetView, num_clients: int, labels_per_client: int, seed: int = 0,
                    max_attempts: int = 10_000) -> Partition:
    """Each client draws ``labels_per_client`` labels; label samples split equally among owners."""
    C = dataset.num_classes
    labels = dataset.train_labels
    if labels_per_client > C:
        raise ValueError(f"labels_per_client {labels_per_client} exceeds {C} classes")
    if num_clients * labels_per_client < C:
        raise ValueError(
            f"{num_clients} clients x {labels_per_client} labels cannot cover {C} classes"
        )
    spec = PartitionSpec(Method.C_NIID, num_clients, seed, labels_per_client=labels_per_client)
    rng = stream(seed, "cniid")
    for _ in range(max_attempts):
        picks = [rng.choice(C, labels_per_client, replace=False) for _ in range(num_clients)]
        if len(set(np.concatenate(picks).tolist())) == C:
            break
    else:
        raise ValueError("could not draw a label assignment covering every class")
    buckets = [[] for _ in range(num_clients)]
    for c in range(C):
        owners = [cid for cid, pk in enumerate(picks) if c in pk]
        idx = rng.permutation(np.flatnonzero(labels == c))
        for cid, chunk in zip(owners, np.array_split(idx, len(owners))):
            buckets[cid].extend(chunk.tolist())
    return _finish(spec, buckets, labels, C)


def partition_cdir(dataset: DatasetView, num_clients: int, alpha: float, seed: int = 0) -> Partition:
    """Per class, proportions over clients drawn from a symmetric Dirichlet(alpha)."""
    spec = PartitionSpec(Method.C_DIR, num_clients, seed, alpha=alpha)
    buckets = [[] for _ in range(num_clients)]
    _dirichlet_allocate(dataset.train_labels, range(dataset.num_classes), list(range(num_clients)),
                        alpha, stream(seed, "dir", 0), buckets)
    return _finish(spec, buckets, dataset.train_labels, dataset.num_classes)


def partition_scniid(dataset: DatasetView, superclustering: SuperClustering, num_clients: int,
                     labels_per_client: int, shards_per_client: int = 2, seed: int = 0,
                     max_attempts: int = 10_000) -> Partition:
    """Clients confined to one super cluster, each holding shards of its picked labels.

    Clients are spread over super clusters in proportion to cluster sample
    counts.  Inside a cluster every client picks ``labels_per_client`` labels
    (redrawn until the cluster's labels are covered, when that is feasible)
    and owns ``shards_per_client`` shards, assigned round-robin over its
    picks.  A label's samples are cut into as many shards as there are slots
    referencing it; leftovers go to the last shard.
    """
    spec = PartitionSpec(Method.SC_NIID, num_clients, seed, labels_per_client=labels_per_client,
                         shards_per_client=shards_per_client, superclustering=superclustering)
    labels = dataset.train_labels
    groups = _check_super_clusters(dataset, superclustering)
    for k, g in enumerate(groups):
        if len(g) < labels_per_client:
            raise ValueError(
                f"super cluster {k} has {len(g)} labels, fewer than labels_per_client={labels_per_client}"
            )
    members, owner = _cluster_clients(dataset, groups, num_clients, seed)
    buckets = [[] for _ in range(num_clients)]
    shard_sizes = []
    for k, (group, clients) in enumerate(zip(groups, members)):
        rng = stream(seed, "scniid", k)
        group = np.asarray(sorted(group))
        coverable = len(clients) * min(labels_per_client, shards_per_client) >= len(group)
        for _ in range(max_attempts):
            picks = [rng.choice(group, labels_per_client, replace=False) for _ in clients]
            slots = [(cid, pk[s % labels_per_client]) for cid, pk in zip(clients, picks)
                     for s in range(shards_per_client)]
            if not coverable or {lab for _, lab in slots} >= set(group.tolist()):
                break
        eligible = sum(int((labels == lab).sum()) for lab in {l for _, l in slots})
        shard_sizes.append(eligible // max(1, len(slots)))
        for lab in group:
            holders = [cid for cid, l in slots if l == lab]
            if not holders:
                continue
            idx = rng.permutation(np.flatnonzero(labels == lab))
            size = len(idx) // len(holders)
            for t, cid in enumerate(holders):
                stop = len(idx) if t == len(holders) - 1 else (t + 1) * size
                buckets[cid].extend(idx[t * size:stop].tolist())
    return _finish(spec, buckets, labels, dataset.num_classes,
                   supercluster_of_client=owner, shard_sizes=tuple(shard_sizes))


def partition_scdir(dataset: DatasetView, superclustering: SuperClustering, num_clients: int,
                    alpha: float, seed: int = 0) -> Partition:
    """Dirichlet allocation restricted to each super cluster's samples and clients."""
    spec = PartitionSpec(Method.SC_DIR, num_clients, seed, alpha=alpha, superclustering=superclustering)
    groups = _check_super_clusters(dataset, superclustering)
    members, owner = _cluster_clients(dataset, groups, num_clients, seed)
    buckets = [[] for _ in range(num_clients)]
    for k, (group, clients) in enumerate(zip(groups, members)):
        _dirichlet_allocate(dataset.train_labels, sorted(group), clients, alpha,
                            stream(seed, "dir", k), buckets)
    return _finish(spec, buckets, dataset.train_labels, dataset.num_classes,
                   supercluster_of_client=owner)


MIX4_LAYOUT = (
    ("CIFAR-10", 31, 500, 50),
    ("SVHN", 25, 500, 50),
    ("FMNIST", 27, 500, 50),
    ("USPS", 14, 500, 50),
)


def partition_mix(datasets: Sequence[DatasetView], layout: Sequence[tuple], seed: int = 0) -> Partition:
    """Each client samples ``samples_per_class`` per class from exactly one dataset.

    ``layout`` rows are ``(client_count, samples_per_client, samples_per_class)``
    or with a leading dataset name.  Indices and labels refer to the
    concatenation of the datasets in order (see ``ingest.concat_views``).
    """
    if len(datasets) != len(layout):
        raise ValueError("layout needs one row per dataset")
    rows = [tuple(r[-3:]) for r in layout]
    names = [str(r[0]) if len(r) == 4 else d.name for r, d in zip(layout, datasets)]
    total_clients = sum(int(r[0]) for r in rows)
    spec = PartitionSpec(Method.MIX, total_clients, seed,
                         mix_layout=tuple((n, *map(int, r)) for n, r in zip(names, rows)))
    label_off = np.cumsum([0] + [d.num_classes for d in datasets[:-1]])
    index_off = np.cumsum([0] + [d.num_train for d in datasets[:-1]])
    all_labels = np.concatenate([d.train_labels + o for d, o in zip(datasets, label_off)])
    num_classes = int(sum(d.num_classes for d in datasets))
    buckets, owner = [], []
    for pos, (d, (n_clients, per_client, per_class)) in enumerate(zip(datasets, rows)):
        if per_client != per_class * d.num_classes:
            raise ValueError(
                f"{d.name}: samples_per_client {per_client} != {per_class} x {d.num_classes} classes"
            )
        rng = stream(seed, "mix", pos)
        local = [[] for _ in range(n_clients)]
        for c in range(d.num_classes):
            idx = np.flatnonzero(d.train_labels == c)
            need = n_clients * per_class
            if len(idx) < need:
                raise ValueError(f"{d.name}: class {c} has {len(idx)} samples, need {need}")
            chosen = rng.choice(idx, need, replace=False) + index_off[pos]
            for j in range(n_clients):
                local[j].extend(chosen[j * per_class:(j + 1) * per_class].tolist())
        buckets.extend(local)
        owner.extend([pos] * n_clients)
    return _finish(spec, buckets, all_labels, num_classes, supercluster_of_client=tuple(owner))


def make_partition(spec: PartitionSpec, dataset: DatasetView | Sequence[DatasetView]) -> Partition:
    """Dispatch on ``spec.method``."""
    m = spec.method
    if m is Method.MIX:
        return partition_mix(dataset, spec.mix_layout, spec.seed)
    if m is Method.IID:
        return partition_iid(dataset, spec.num_clients, spec.seed)
    if m is Method.C_NIID:
        return partition_cniid(dataset, spec.num_clients, spec.labels_per_client, spec.seed)
    if m is Method.C_DIR:
        return partition_cdir(dataset, spec.num_clients, spec.alpha, spec.seed)
    if m is Method.SC_NIID:
        return partition_scniid(dataset, spec.superclustering, spec.num_clients,
                                spec.labels_per_client, spec.shards_per_client, spec.seed)
    return partition_scdir(dataset, spec.superclustering, spec.num_clients, spec.alpha, spec.seed)
