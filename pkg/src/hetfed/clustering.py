"""Threshold-stopped agglomerative clustering over a precomputed proximity matrix."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable

import numpy as np

from .signature import ProximityMatrix


class Linkage(str, Enum):
    AVERAGE = "AVERAGE"
    COMPLETE = "COMPLETE"
    SINGLE = "SINGLE"


@dataclass(frozen=True)
class Merge:
    a: tuple
    b: tuple
    distance: float


@dataclass(frozen=True)
class SuperClustering:
    subjects: tuple
    assignments: dict
    threshold: float
    linkage: Linkage
    merge_history: tuple = field(default=())

    @property
    def num_clusters(self) -> int:
        return len(set(self.assignments.values()))

    @property
    def clusters(self) -> list[list]:
        """Member lists ordered by cluster index, members in subject order."""
        out = [[] for _ in range(self.num_clusters)]
        for s in self.subjects:
            out[self.assignments[s]].append(s)
        return out

    def cluster_of(self, subject: Hashable) -> int:
        return self.assignments[subject]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "linkage": self.linkage.value,
            "clusters": self.clusters,
            "merge_history": [
                {"a": list(m.a), "b": list(m.b), "distance": m.distance}
                for m in self.merge_history
            ],
        }

    def to_json(self, path: str | os.PathLike | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "SuperClustering":
        clusters = [list(c) for c in data["clusters"]]
        subjects = tuple(sorted((s for c in clusters for s in c), key=_subject_key))
        assignments = {s: i for i, c in enumerate(clusters) for s in c}
        if len(assignments) != len(subjects):
            raise ValueError("a subject appears in more than one cluster")
        history = tuple(
            Merge(tuple(m["a"]), tuple(m["b"]), float(m["distance"]))
            for m in data.get("merge_history", [])
        )
        return cls(
            subjects=subjects,
            assignments=assignments,
            threshold=float(data.get("threshold", float("nan"))),
            linkage=Linkage(data.get("linkage", "AVERAGE")),
            merge_history=history,
        )

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "SuperClustering":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def from_clusters(cls, clusters, threshold: float = float("nan"), linkage: Linkage | str = Linkage.AVERAGE) -> "SuperClustering":
        return cls.from_dict({"clusters": clusters, "threshold": threshold, "linkage": Linkage(linkage).value})


def _subject_key(s):
    return (0, s, "") if isinstance(s, (int, np.integer)) else (1, 0, str(s))


def _validate(prox: ProximityMatrix) -> np.ndarray:
    d = prox.entries
    if not np.allclose(d, d.T, rtol=0, atol=1e-9):
        raise ValueError("proximity matrix must be symmetric")
    if np.any(np.abs(np.diag(d)) > 1e-9):
        raise ValueError("proximity matrix must have a zero diagonal")
    if not np.all(np.isfinite(d)):
        raise ValueError("proximity matrix has non-finite entries")
    return (d + d.T) / 2.0


def _linkage_distance(d: np.ndarray, a: list[int], b: list[int], linkage: Linkage) -> float:
    block = d[np.ix_(a, b)]
    if linkage is Linkage.SINGLE:
        return float(block.min())
    if linkage is Linkage.COMPLETE:
        return float(block.max())
    return float(block.mean())


def _agglomerate(d: np.ndarray, threshold: float, linkage: Linkage):
    """Merge closest pairs while their linkage distance is <= threshold.

    Clusters are kept ordered by their smallest member; ties on distance go to
    the lexicographically smallest (i, j) position pair.
    """
    clusters = [[i] for i in range(d.shape[0])]
    history = []
    while len(clusters) > 1:
        best, best_pair = None, None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                dist = _linkage_distance(d, clusters[i], clusters[j], linkage)
                if best is None or dist < best:
                    best, best_pair = dist, (i, j)
        if best > threshold:
            break
        i, j = best_pair
        history.append((tuple(clusters[i]), tuple(clusters[j]), best))
        clusters[i] = sorted(clusters[i] + clusters[j])
        del clusters[j]
    return clusters, history


def agglomerative_cluster(
    proximity: ProximityMatrix,
    threshold: float,
    linkage: Linkage | str = Linkage.AVERAGE,
) -> SuperClustering:
    if threshold < 0 or np.isnan(threshold):
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    linkage = Linkage(linkage)
    d = _validate(proximity)
    clusters, history = _agglomerate(d, threshold, linkage)
    subj = proximity.subjects
    assignments = {subj[m]: ci for ci, members in enumerate(clusters) for m in members}
    merges = tuple(
        Merge(tuple(subj[x] for x in a), tuple(subj[x] for x in b), dist)
        for a, b, dist in history
    )
    return SuperClustering(subj, assignments, float(threshold), linkage, merges)


def merge_distances(proximity: ProximityMatrix, linkage: Linkage | str = Linkage.AVERAGE) -> np.ndarray:
    """Merge heights of the full agglomeration (n - 1 values)."""
    d = _validate(proximity)
    _, history = _agglomerate(d, np.inf, Linkage(linkage))
    return np.array([h[2] for h in history])


def suggest_threshold(proximity: ProximityMatrix, linkage: Linkage | str = Linkage.AVERAGE) -> float:
    """Midpoint of the largest gap between consecutive merge heights.

    If all merge heights coincide the common height is returned, which puts
    every subject in one cluster.
    """
    if len(proximity) < 3:
        raise ValueError("suggest_threshold needs at least 3 subjects")
    heights = np.sort(merge_distances(proximity, linkage))
    gaps = np.diff(heights)
    if gaps.size == 0 or gaps.max() <= 1e-12 * max(1.0, abs(heights[-1])):
        return float(heights[-1])
    k = int(np.argmax(gaps))
    return float((heights[k] + heights[k + 1]) / 2.0)
