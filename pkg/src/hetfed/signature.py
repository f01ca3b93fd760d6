"""Subspace signatures of classes, datasets and clients, and their proximity matrices."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from enum import Enum
from typing import Hashable, Sequence

import numpy as np

from .ingest import DatasetView
from .numerics import OrthonormalBasis, principal_angles, truncated_svd

DEFAULT_P = 2


class Measure(str, Enum):
    EQ2 = "EQ2"
    EQ3 = "EQ3"
    EMD = "EMD"
    CKA_DISTANCE = "CKA-DISTANCE"


@dataclass(frozen=True)
class Signature:
    subject_id: Hashable
    basis: OrthonormalBasis
    sample_count: int

    @property
    def p(self) -> int:
        return self.basis.rank

    @property
    def ambient_dim(self) -> int:
        return self.basis.ambient_dim


@dataclass(frozen=True)
class ProximityMatrix:
    subjects: tuple
    entries: np.ndarray
    measure: Measure

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        n = len(self.subjects)
        if e.shape != (n, n):
            raise ValueError(f"entries shape {e.shape} does not match {n} subjects")
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "measure", Measure(self.measure))

    def __len__(self) -> int:
        return len(self.subjects)

    def check_symmetric(self, atol: float = 1e-9) -> None:
        e = self.entries
        if not np.allclose(e, e.T, atol=atol, rtol=0):
            raise ValueError("proximity matrix is not symmetric")
        if np.max(np.abs(np.diag(e)), initial=0.0) > atol:
            raise ValueError("proximity matrix has a non-zero diagonal")

    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(len(self), k=1)
        return self.entries[iu]

    def permuted(self, order: Sequence[int]) -> "ProximityMatrix":
        order = list(order)
        return ProximityMatrix(
            tuple(self.subjects[i] for i in order),
            self.entries[np.ix_(order, order)],
            self.measure,
        )

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        """First row: subject ids; then the matrix with 6 decimals (degrees for angles)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([str(s) for s in self.subjects])
        for row in self.entries:
            writer.writerow([f"{v:.6f}" for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source: str | os.PathLike, measure: Measure | str = Measure.EQ2) -> "ProximityMatrix":
        """Parse CSV text, or a path to a CSV file, written by :meth:`to_csv`."""
        if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source):
            with open(source, newline="") as fh:
                text = fh.read()
        else:
            text = source
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows:
            raise ValueError("empty proximity CSV")
        subjects = [_parse_id(s) for s in rows[0]]
        body = rows[1:]
        if len(body) != len(subjects) or any(len(r) != len(subjects) for r in body):
            raise ValueError(
                f"proximity CSV must have {len(subjects)} rows of {len(subjects)} values"
            )
        try:
            entries = np.array([[float(v) for v in r] for r in body])
        except ValueError as exc:
            raise ValueError(f"non-numeric proximity entry: {exc}") from None
        return cls(tuple(subjects), entries, measure)


def _parse_id(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def build_signature(samples, subject_id: Hashable, p: int = DEFAULT_P) -> Signature:
    """Signature from a matrix holding one flattened sample per column."""
    m = np.asarray(samples, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"samples must be a 2-D matrix, got shape {m.shape}")
    n = m.shape[1]
    if n < p:
        raise ValueError(f"subject {subject_id!r}: {n} samples is fewer than p={p}")
    if p > m.shape[0]:
        raise ValueError(f"subject {subject_id!r}: p={p} exceeds sample dimension {m.shape[0]}")
    svd = truncated_svd(m, p, compute_right=False)
    return Signature(subject_id, svd.left_basis, n)


def signature_of_rows(features, subject_id: Hashable, p: int = DEFAULT_P) -> Signature:
    """Signature of a (samples x dimension) feature block."""
    return build_signature(np.asarray(features).T, subject_id, p)


def class_signatures(view: DatasetView, p: int = DEFAULT_P, classes: Sequence[int] | None = None) -> list[Signature]:
    classes = range(view.num_classes) if classes is None else classes
    return [signature_of_rows(view.train_features[view.class_indices(c)], c, p) for c in classes]


def _check_compatible(sigs: Sequence[Signature]) -> None:
    if not sigs:
        raise ValueError("no signatures given")
    dim, p = sigs[0].ambient_dim, sigs[0].p
    for s in sigs:
        if s.ambient_dim != dim:
            raise ValueError(
                f"signature {s.subject_id!r} has ambient dim {s.ambient_dim}, expected {dim}"
            )
        if s.p != p:
            raise ValueError(f"signature {s.subject_id!r} has p={s.p}, expected {p}")


def _ordered_angle_sum(u: np.ndarray, w: np.ndarray) -> float:
    # the angle between two lines is their single principal angle
    return float(sum(principal_angles(u[:, [i]], w[:, [i]])[0] for i in range(u.shape[1])))


# Both measures average the two argument orders so that f(a, b) == f(b, a)
# holds bit for bit; the products involved differ only in rounding.

def eq2_angle(a: Signature, b: Signature) -> float:
    ab = principal_angles(a.basis, b.basis)[0]
    ba = principal_angles(b.basis, a.basis)[0]
    return float(0.5 * (ab + ba))


def eq3_angle(a: Signature, b: Signature) -> float:
    """Sum of angles between same-rank singular vectors of two signatures."""
    u, w = a.basis.vectors, b.basis.vectors
    return 0.5 * (_ordered_angle_sum(u, w) + _ordered_angle_sum(w, u))


def _grid(sigs: Sequence[Signature], fn, measure: Measure) -> ProximityMatrix:
    _check_compatible(sigs)
    n = len(sigs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = fn(sigs[i], sigs[j])
    return ProximityMatrix(tuple(s.subject_id for s in sigs), out, measure)


def proximity_eq2(sigs: Sequence[Signature]) -> ProximityMatrix:
    """Smallest principal angle between every pair of signatures (degrees)."""
    return _grid(sigs, eq2_angle, Measure.EQ2)


def proximity_eq3(sigs: Sequence[Signature]) -> ProximityMatrix:
    """Summed angles between corresponding basis vectors (degrees, at most 90 * p)."""
    return _grid(sigs, eq3_angle, Measure.EQ3)


def proximity(sigs: Sequence[Signature], measure: Measure | str) -> ProximityMatrix:
    measure = Measure(measure)
    if measure is Measure.EQ2:
        return proximity_eq2(sigs)
    if measure is Measure.EQ3:
        return proximity_eq3(sigs)
    raise ValueError(f"signature proximity supports EQ2/EQ3, not {measure.value}")


def dataset_signature(view: DatasetView, p: int = DEFAULT_P) -> Signature:
    """All training samples pooled, labels ignored."""
    return signature_of_rows(view.train_features, view.name, p)


def compare_datasets(a: DatasetView, b: DatasetView, p: int = DEFAULT_P) -> tuple[float, float]:
    """(smallest principal angle, summed ordered angle) between two pooled datasets."""
    if a.dim != b.dim:
        raise ValueError(
            f"datasets {a.name} and {b.name} differ in dimension ({a.dim} vs {b.dim})"
        )
    sa, sb = dataset_signature(a, p), dataset_signature(b, p)
    return eq2_angle(sa, sb), eq3_angle(sa, sb)


def client_signatures(partition, view: DatasetView, p: int = DEFAULT_P) -> list[Signature]:
    sigs = []
    for cid, idx in enumerate(partition.client_indices):
        if len(idx) < p:
            raise ValueError(f"client {cid} owns {len(idx)} samples, fewer than p={p}")
        sigs.append(signature_of_rows(view.train_features[idx], cid, p))
    return sigs


def client_proximity(partition, view: DatasetView, p: int = DEFAULT_P, measure: Measure | str = Measure.EQ2) -> ProximityMatrix:
    return proximity(client_signatures(partition, view, p), measure)
