"""Dense linear algebra helpers: truncated SVD and principal angles.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Orthonormal
bases are stored column-wise (ambient dimension x rank).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg

ORTHONORMAL_TOL = 1e-8
RANK_RATIO_TOL = 1e-10


@dataclass(frozen=True)
class OrthonormalBasis:
    """Columns of ``vectors`` form an orthonormal set in R^ambient_dim."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"basis must be 2-D, got shape {v.shape}")
        if v.shape[1] > v.shape[0]:
            raise ValueError(f"rank {v.shape[1]} exceeds ambient dimension {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("basis contains non-finite entries")
        gram = v.T @ v
        err = np.max(np.abs(gram - np.eye(v.shape[1]))) if v.shape[1] else 0.0
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"columns are not orthonormal (max deviation {err:.2e})")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def ambient_dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_span(cls, columns: np.ndarray) -> "OrthonormalBasis":
        """Orthonormalize arbitrary full-column-rank ``columns`` (QR)."""
        q, r = np.linalg.qr(np.asarray(columns, dtype=np.float64))
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        return cls(q * signs)


@dataclass(frozen=True)
class SvdResult:
    left_basis: OrthonormalBasis
    singular_values: np.ndarray
    right_basis: Optional[OrthonormalBasis]
    # number of singular values with sigma_i / sigma_1 >= RANK_RATIO_TOL
    rank_estimate: int

    @property
    def rank_deficient(self) -> bool:
        return self.rank_estimate < len(self.singular_values)

    def reconstruct(self) -> np.ndarray:
        if self.right_basis is None:
            raise ValueError("right singular vectors were not computed")
        u = self.left_basis.vectors
        return (u * self.singular_values) @ self.right_basis.vectors.T


def _as_matrix(m) -> np.ndarray:
    a = np.ascontiguousarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def _complete_columns(q: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by unit vectors orthogonal to the rest.

    Candidates are the standard basis vectors in index order, so the result is
    deterministic.
    """
    q = q.copy()
    n = q.shape[0]
    for j in np.flatnonzero(~good):
        others = q[:, [k for k in range(q.shape[1]) if k != j and (good[k] or k < j)]]
        for e in range(n):
            cand = np.zeros(n)
            cand[e] = 1.0
            for _ in range(2):
                cand -= others @ (others.T @ cand)
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                q[:, j] = cand / norm
                good = good.copy()
                good[j] = True
                break
    return q


def _derive_side(m: np.ndarray, known: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Other singular side from ``m @ known / sigma``, re-orthonormalized."""
    good = sigma > RANK_RATIO_TOL * max(sigma[0], np.finfo(float).tiny)
    safe = np.where(good, sigma, 1.0)
    other = (m @ known) / safe
    other[:, ~good] = 0.0
    if not good.all():
        other = _complete_columns(other, good)
    # polish: small loss of orthogonality from dividing by small sigmas
    q, r = np.linalg.qr(other)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _refine(m: np.ndarray, vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Singular values as ``||m @ vec||`` rather than sqrt of Gram eigenvalues.

    Squaring in the Gram matrix floors small singular values near
    ``sqrt(eps) * sigma_1``; the norm resolves them down to ``eps * sigma_1``.
    """
    sigma = np.linalg.norm(m @ vecs, axis=0)
    order = np.argsort(-sigma, kind="stable")
    return vecs[:, order], sigma[order]


def truncated_svd(m, p: int, compute_right: bool = True) -> SvdResult:
    """Top-``p`` singular triplets of ``m``.

    The smaller Gram matrix (``m @ m.T`` or ``m.T @ m``) is eigendecomposed
    and the other side is recovered by projection.  Each left singular
    vector is sign-fixed so that its largest-magnitude entry (first one on
    ties) is non-negative.
    """
    a = _as_matrix(m)
    rows, cols = a.shape
    if not 1 <= p <= min(rows, cols):
        raise ValueError(f"p={p} out of range for a {rows}x{cols} matrix")

    if rows <= cols:
        gram = a @ a.T
        evals, evecs = scipy.linalg.eigh(gram, subset_by_index=[rows - p, rows - 1])
        order = np.argsort(evals, kind="stable")[::-1]
        u, sigma = _refine(a.T, evecs[:, order])
        v = _derive_side(a.T, u, sigma) if compute_right else None
    else:
        gram = a.T @ a
        evals, evecs = scipy.linalg.eigh(gram, subset_by_index=[cols - p, cols - 1])
        order = np.argsort(evals, kind="stable")[::-1]
        v, sigma = _refine(a, evecs[:, order])
        u = _derive_side(a, v, sigma)

    pivots = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[pivots, np.arange(p)] < 0, -1.0, 1.0)
    u = u * flip
    if v is not None:
        v = v * flip

    if sigma[0] > 0:
        rank_est = int(np.sum(sigma / sigma[0] >= RANK_RATIO_TOL))
    else:
        rank_est = 0
    return SvdResult(
        left_basis=OrthonormalBasis(u),
        singular_values=sigma,
        right_basis=OrthonormalBasis(v) if v is not None else None,
        rank_estimate=rank_est,
    )


BasisLike = Union[OrthonormalBasis, np.ndarray]


def _vectors(b: BasisLike) -> np.ndarray:
    if isinstance(b, OrthonormalBasis):
        return b.vectors
    return OrthonormalBasis(b).vectors


def principal_angles(u: BasisLike, w: BasisLike) -> np.ndarray:
    """Principal angles in degrees, ascending, between span(u) and span(w).

    Returns ``min(rank(u), rank(w))`` angles.  Cosines come from the
    singular values of ``u.T @ w`` and sines from those of the residual
    ``w - u @ (u.T @ w)``; each angle uses whichever is better conditioned
    (arcsin below 45 degrees, arccos above), since arccos alone cannot
    resolve angles much below 1e-6 degrees.
    """
    uv, wv = _vectors(u), _vectors(w)
    if uv.shape[0] != wv.shape[0]:
        raise ValueError(f"ambient dimensions differ: {uv.shape[0]} vs {wv.shape[0]}")
    if wv.shape[1] > uv.shape[1]:
        uv, wv = wv, uv
    cross = uv.T @ wv
    cos = np.clip(np.linalg.svd(cross, compute_uv=False), 0.0, 1.0)
    sin = np.clip(np.sort(np.linalg.svd(wv - uv @ cross, compute_uv=False)), 0.0, 1.0)
    angles = np.where(cos ** 2 >= 0.5, np.arcsin(sin), np.arccos(cos))
    return np.sort(np.degrees(angles))


def smallest_principal_angle(u: BasisLike, w: BasisLike) -> float:
    return float(principal_angles(u, w)[0])
