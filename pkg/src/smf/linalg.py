"""Dense real-matrix primitives used by the solvers.

Matrices are plain 2-D ``float64`` numpy arrays. Columns are samples
throughout the package, and arrays produced here are Fortran-ordered
(column-major) when a fresh buffer is allocated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import svds

# exact LAPACK SVD below this size; Krylov (ARPACK) above when k is small
EXACT_SVD_MAX_DIM = 64
RANK_DEFICIENCY_RTOL = 1e-10


class LinalgError(ValueError):
    """Raised for invalid shapes, ranks or non-finite matrix input."""


@dataclass(frozen=True)
class Svd:
    """Top-k singular triplets: ``m ~= u @ diag(s) @ vt``."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def k(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} contains non-finite entries")
    return m


def frobenius_norm(m) -> float:
    return float(np.sqrt(np.sum(np.square(as_matrix(m)))))


def operator_norm(m) -> float:
    """Largest singular value."""
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    return float(truncated_svd(a, 1).s[0])


def _randomized_svd(m: np.ndarray, k: int, oversample: int = 8, power_iters: int = 2,
                    seed: int = 0) -> Svd:
    rng = np.random.default_rng(seed)
    rows, cols = m.shape
    width = min(k + oversample, rows, cols)
    q, _ = np.linalg.qr(m @ rng.standard_normal((cols, width)))
    for _ in range(power_iters):
        z, _ = np.linalg.qr(m.T @ q)
        q, _ = np.linalg.qr(m @ z)
    ub, s, vt = np.linalg.svd(q.T @ m, full_matrices=False)
    return Svd(q @ ub[:, :k], s[:k], vt[:k])


def _krylov_svd(m: np.ndarray, k: int) -> Svd:
    # fixed start vector keeps ARPACK deterministic
    v0 = np.ones(min(m.shape)) / np.sqrt(min(m.shape))
    u, s, vt = svds(m, k=k, v0=v0, tol=0, return_singular_vectors=True)
    order = np.argsort(s)[::-1]
    return Svd(u[:, order], s[order], vt[order])


def truncated_svd(m, k: int, method: str = "auto", seed: int = 0) -> Svd:
    """Top-``k`` singular triplets of ``m``.

    ``method`` is one of ``"auto"``, ``"exact"``, ``"krylov"`` or
    ``"randomized"``. ``auto`` uses the LAPACK thin SVD for small matrices or
    when ``k`` is a sizable fraction of the smaller dimension, and a
    deterministic Lanczos (ARPACK) solve otherwise. When singular values tie
    at the cutoff, the triplets are kept in the order the routine produced
    them, which is one of several equally good rank-``k`` approximations.
    """
    a = check_finite(as_matrix(m))
    dmin = min(a.shape)
    if not 1 <= k <= dmin:
        raise LinalgError(f"k={k} out of range [1, {dmin}] for shape {a.shape}")
    if method == "auto":
        method = "exact" if (dmin <= EXACT_SVD_MAX_DIM or 4 * k >= dmin) else "krylov"
    if method == "krylov" and k >= dmin:
        method = "exact"
    if method == "exact":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        out = Svd(u[:, :k], s[:k], vt[:k])
    elif method == "krylov":
        out = _krylov_svd(a, k)
    elif method == "randomized":
        out = _randomized_svd(a, k, seed=seed)
    else:
        raise LinalgError(f"unknown SVD method {method!r}")
    return Svd(out.u, np.maximum(out.s, 0.0), out.vt)


def rank_projection(m, r: int, method: str = "auto") -> np.ndarray:
    """Best rank-``r`` approximation of ``m`` in Frobenius norm."""
    a = as_matrix(m)
    if r < 1:
        raise LinalgError(f"rank must be >= 1, got {r}")
    if r >= min(a.shape):
        return check_finite(a).copy()
    return truncated_svd(a, r, method=method).reconstruct()


def numerical_rank_ratio(m, r: int) -> float:
    """sigma_{r+1} / sigma_1, or 0 when ``m`` has at most ``r`` singular values."""
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    if s.size <= r or s[0] == 0.0:
        return 0.0
    return float(s[r] / s[0])


def least_squares(a, b) -> np.ndarray:
    """Minimize ``||a @ x - b||_F`` through a QR factorization of ``a``.

    Raises :class:`LinalgError` if ``a`` is numerically rank deficient
    (smallest singular value below ``1e-10 * sigma_max``).
    """
    a = check_finite(as_matrix(a, "a"), "a")
    b_arr = np.asarray(b, dtype=np.float64)
    vector = b_arr.ndim == 1
    b2 = check_finite(as_matrix(b_arr, "b"), "b")
    if a.shape[0] != b2.shape[0]:
        raise LinalgError(f"row mismatch: a {a.shape} vs b {b2.shape}")
    if a.shape[0] < a.shape[1]:
        raise LinalgError(f"a is rank deficient: {a.shape[1]} columns exceed {a.shape[0]} rows")
    s = np.linalg.svd(a, compute_uv=False)
    if s.size and (s[0] == 0.0 or s[-1] < RANK_DEFICIENCY_RTOL * s[0]):
        raise LinalgError(
            f"a is rank deficient: sigma_min/sigma_max = {s[-1] / s[0] if s[0] else 0.0:.3e}")
    q, r = np.linalg.qr(a)
    x = np.linalg.solve(r, q.T @ b2)
    return x[:, 0] if vector else x


def orthonormal_basis(m) -> np.ndarray:
    """Orthonormal basis for the column space of ``m``."""
    a = as_matrix(m)
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    tol = max(a.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    return u[:, s > tol]


def project_onto_factor_subspace(y, u_bar, v_bar) -> np.ndarray:
    """Orthogonal projection onto ``{M : col(M) in col(u_bar), row(M) in col(v_bar)}``.

    Both bases must have orthonormal columns.
    """
    u_bar = as_matrix(u_bar)
    v_bar = as_matrix(v_bar)
    return u_bar @ (u_bar.T @ as_matrix(y) @ v_bar) @ v_bar.T


def read_csv_matrix(path) -> np.ndarray:
    """Read a headerless CSV of decimal literals; ragged rows are rejected."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise LinalgError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise LinalgError(
                    f"{path}:{lineno}: ragged row ({len(rows[-1])} values, expected {len(rows[0])})")
    if not rows:
        return np.zeros((0, 0))
    return check_finite(np.array(rows, dtype=np.float64), str(path))


def write_csv_matrix(path, m) -> None:
    a = as_matrix(m)
    with Path(path).open("w", newline="") as fh:
        for row in a:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
