"""Alternative heterogeneity measures: earth mover's distance, linear CKA, and summaries."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .ingest import DatasetView
from .partition import Partition, stream
from .signature import (
    DEFAULT_P,
    Measure,
    ProximityMatrix,
    client_signatures,
    proximity_eq2,
    proximity_eq3,
    signature_of_rows,
)


@dataclass(frozen=True)
class LabelDistribution:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("label distribution must be a non-empty vector")
        if np.any(p < 0):
            raise ValueError("label distribution has negative mass")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"label distribution sums to {p.sum()}, not 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def support_size(self) -> int:
        return self.probabilities.size

    @classmethod
    def from_counts(cls, counts) -> "LabelDistribution":
        c = np.asarray(counts, dtype=np.float64)
        total = c.sum()
        if total <= 0:
            raise ValueError("cannot normalize an empty histogram")
        return cls(c / total)


class GroundKind(str, Enum):
    DISCRETE = "DISCRETE"
    ANGLE = "ANGLE"


@dataclass(frozen=True)
class GroundMetric:
    kind: GroundKind
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GroundKind(self.kind))
        if self.matrix is not None:
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("ground metric must be a square matrix")
            if np.any(m < 0):
                raise ValueError("ground costs must be non-negative")
            if not np.allclose(m, m.T, rtol=0, atol=1e-12):
                raise ValueError("ground metric must be symmetric")
            if np.any(np.abs(np.diag(m)) > 1e-12):
                raise ValueError("ground metric must have a zero diagonal")
            object.__setattr__(self, "matrix", m)

    @classmethod
    def discrete(cls, n: int) -> "GroundMetric":
        return cls(GroundKind.DISCRETE, 1.0 - np.eye(n))

    @classmethod
    def from_angles(cls, prox: ProximityMatrix) -> "GroundMetric":
        """Class-level smallest-angle matrix scaled to [0, 1] by 90 degrees."""
        return cls(GroundKind.ANGLE, prox.entries / 90.0)

    def costs(self, n: int) -> np.ndarray:
        if self.matrix is None:
            if self.kind is not GroundKind.DISCRETE:
                raise ValueError("ANGLE ground metric needs a cost matrix")
            return 1.0 - np.eye(n)
        if self.matrix.shape[0] != n:
            raise ValueError(f"ground metric is {self.matrix.shape[0]}x{self.matrix.shape[0]}, need {n}")
        return self.matrix


def total_variation(p: LabelDistribution, q: LabelDistribution) -> float:
    return 0.5 * float(np.abs(p.probabilities - q.probabilities).sum())


def transport_plan(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Optimal transport plan between histograms ``p`` and ``q`` (dual simplex)."""
    rows, cols = np.flatnonzero(p > 0), np.flatnonzero(q > 0)
    plan = np.zeros((len(p), len(q)))
    if len(rows) == 0 or len(cols) == 0:
        return plan
    c = cost[np.ix_(rows, cols)]
    m, n = c.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([p[rows], q[cols]])
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transportation solver failed: {res.message}")
    plan[np.ix_(rows, cols)] = np.clip(res.x.reshape(m, n), 0.0, None)
    return plan


def emd(p: LabelDistribution, q: LabelDistribution, ground: Optional[GroundMetric] = None) -> float:
    """Exact earth mover's distance between two label distributions."""
    if p.support_size != q.support_size:
        raise ValueError(f"support sizes differ: {p.support_size} vs {q.support_size}")
    ground = ground or GroundMetric.discrete(p.support_size)
    cost = ground.costs(p.support_size)
    plan = transport_plan(p.probabilities, q.probabilities, cost)
    return float(max(0.0, np.sum(plan * cost)))


def _center(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("CKA inputs must be 2-D (samples x features)")
    return a - a.mean(axis=0, keepdims=True)


def _normalized_gram(x: np.ndarray) -> np.ndarray:
    """Centered linear kernel scaled to unit Frobenius norm."""
    g = x @ x.T
    norm = np.linalg.norm(g)
    if norm <= 1e-300:
        raise ValueError("degenerate input: zero variance")
    return g / norm


def linear_cka(x, y) -> float:
    """Linear CKA after column-centering; 1 means identical up to rotation and scale."""
    xc, yc = _center(x), _center(y)
    if xc.shape[0] != yc.shape[0]:
        raise ValueError(f"row counts differ: {xc.shape[0]} vs {yc.shape[0]}")
    if xc.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    if not np.any(xc) or not np.any(yc):
        raise ValueError("degenerate input: zero variance")
    n = xc.shape[0]
    if n <= max(xc.shape[1], yc.shape[1]):
        kx, ky = _normalized_gram(xc), _normalized_gram(yc)
        value = float(np.sum(kx * ky))
    else:
        cross = np.linalg.norm(yc.T @ xc) ** 2
        value = float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))
    return float(min(1.0, max(0.0, value)))


class ClientMeasure(str, Enum):
    EMD = "EMD"
    EQ2 = "EQ2"
    EQ3 = "EQ3"
    CKA = "CKA"


def _pair_mean(matrix: np.ndarray) -> float:
    iu = np.triu_indices(matrix.shape[0], k=1)
    return float(matrix[iu].mean())


def client_emd_matrix(partition: Partition, ground: Optional[GroundMetric] = None) -> ProximityMatrix:
    dists = [LabelDistribution.from_counts(h) for h in partition.label_histograms]
    k = len(dists)
    out = np.zeros((k, k))
    discrete = ground is None or (ground.kind is GroundKind.DISCRETE and ground.matrix is None)
    for i in range(k):
        for j in range(i + 1, k):
            # discrete ground: closed form, equal to the transport optimum
            d = total_variation(dists[i], dists[j]) if discrete else emd(dists[i], dists[j], ground)
            out[i, j] = out[j, i] = d
    return ProximityMatrix(tuple(range(k)), out, Measure.EMD)


def client_cka_matrix(partition: Partition, dataset: DatasetView) -> np.ndarray:
    """Pairwise CKA similarity between clients' raw data.

    Every client is subsampled to the smallest client size (stream keyed by
    the partition seed and the client's first index), then its rows are
    ordered by label so that paired rows tend to share a class.
    """
    sizes = partition.client_sizes()
    m = int(sizes.min())
    if m < 2:
        raise ValueError("every client needs at least two samples for CKA")
    grams = []
    for idx in partition.client_indices:
        rng = stream(partition.spec.seed, "cka", int(idx.min()))
        pick = np.sort(rng.choice(idx, m, replace=False))
        pick = pick[np.argsort(dataset.train_labels[pick], kind="stable")]
        grams.append(_normalized_gram(_center(dataset.train_features[pick])).ravel())
    g = np.stack(grams)
    return np.clip(g @ g.T, 0.0, 1.0)


def avg_pairwise_client_distance(
    partition: Partition,
    dataset: DatasetView,
    measure: ClientMeasure | str,
    p: int = DEFAULT_P,
    ground: Optional[GroundMetric] = None,
) -> float:
    """Mean over unordered client pairs.

    Angle measures are normalized to [0, 1] (by 90 degrees, and 90 * p for
    the summed form); CKA is reported as a similarity.
    """
    measure = ClientMeasure(measure)
    if partition.num_clients < 2:
        raise ValueError("need at least two clients")
    if measure is ClientMeasure.EMD:
        return _pair_mean(client_emd_matrix(partition, ground).entries)
    if measure is ClientMeasure.CKA:
        return _pair_mean(client_cka_matrix(partition, dataset))
    sigs = client_signatures(partition, dataset, p)
    if measure is ClientMeasure.EQ2:
        return _pair_mean(proximity_eq2(sigs).entries) / 90.0
    return _pair_mean(proximity_eq3(sigs).entries) / (90.0 * p)


def layerwise_similarity(
    models: Sequence,
    probe,
    measure: str = "CKA",
    p: int = DEFAULT_P,
) -> list[ProximityMatrix]:
    """One model-by-model matrix per layer, from activations on a shared probe.

    ``CKA`` yields ``CKA-DISTANCE`` matrices holding ``1 - CKA``; ``EQ2``
    yields smallest principal angles between activation subspaces.
    """
    measure = measure.upper()
    if measure not in ("CKA", "EQ2"):
        raise ValueError(f"unsupported layer measure {measure!r}")
    if not models:
        raise ValueError("no models given")
    arch = models[0].architecture
    for m in models:
        if m.architecture != arch:
            raise ValueError("models do not share an architecture")
    x = np.asarray(probe, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("probe is empty")
    acts = [arch.activations(m.values, x) for m in models]
    out = []
    k = len(models)
    for layer in range(arch.num_layers):
        feats = [a[layer] for a in acts]
        if measure == "CKA":
            ent = np.zeros((k, k))
            for i in range(k):
                for j in range(i + 1, k):
                    ent[i, j] = ent[j, i] = 1.0 - linear_cka(feats[i], feats[j])
            out.append(ProximityMatrix(tuple(range(k)), ent, Measure.CKA_DISTANCE))
        else:
            rank = min(p, feats[0].shape[1], feats[0].shape[0])
            sigs = [signature_of_rows(f, i, rank) for i, f in enumerate(feats)]
            out.append(proximity_eq2(sigs))
    return out


def mean_similarity(prox: ProximityMatrix) -> float:
    """Mean off-diagonal CKA similarity of a ``CKA-DISTANCE`` matrix."""
    if prox.measure is not Measure.CKA_DISTANCE:
        raise ValueError("mean_similarity expects a CKA-DISTANCE matrix")
    return 1.0 - float(prox.off_diagonal().mean())


def summary_table_csv(table: Mapping[str, Mapping[str, float]], methods: Sequence[str],
                      path: str | os.PathLike | None = None) -> str:
    """Rows are measures, columns are partition methods."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["measure", *methods])
    for measure, row in table.items():
        w.writerow([measure, *[f"{row[m]:.6f}" if m in row else "" for m in methods]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
