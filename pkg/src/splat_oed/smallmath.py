"""Small dense symmetric linear algebra: Jacobi eigenvalues and Cholesky.

Every routine accepts a single ``(n, n)`` matrix or a stack ``(B, n, n)`` and
is vectorized across the stack. Arithmetic for one matrix never mixes with
another matrix of the stack, so a block gives bit-identical results whether
it is processed alone or in a batch; the selection code relies on this.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DIM = 64
MAX_SWEEPS = 100


class NotSPDError(np.linalg.LinAlgError):
    """Cholesky met a non-positive pivot (missing regularization upstream)."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix stored as its packed upper triangle (row-major)."""

    dim: int
    packed: np.ndarray

    def __post_init__(self):
        if not 0 < self.dim <= MAX_DIM:
            raise ValueError(f"dimension must be in 1..{MAX_DIM}")
        packed = np.array(self.packed, dtype=np.float64).reshape(-1)
        if len(packed) != self.dim * (self.dim + 1) // 2:
            raise ValueError("packed length does not match dimension")
        packed.setflags(write=False)
        object.__setattr__(self, "packed", packed)

    @classmethod
    def from_dense(cls, m) -> "SymMatrix":
        m = np.asarray(m, dtype=np.float64)
        n = m.shape[0]
        if m.shape != (n, n):
            raise ValueError("matrix must be square")
        iu = np.triu_indices(n)
        return cls(n, 0.5 * (m + m.T)[iu])

    def dense(self) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        iu = np.triu_indices(self.dim)
        m[iu] = self.packed
        m.T[iu] = self.packed
        return m


def _as_stack(m):
    if isinstance(m, SymMatrix):
        m = m.dense()
    a = np.array(m, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError("expected a square matrix or a stack of square matrices")
    return a, single


def _off_norm2(a):
    n = a.shape[1]
    acc = np.zeros(len(a))
    for p in range(n):
        for q in range(p + 1, n):
            acc += 2.0 * a[:, p, q] * a[:, p, q]
    return acc


def _frob2(a):
    n = a.shape[1]
    acc = np.zeros(len(a))
    for p in range(n):
        for q in range(n):
            acc += a[:, p, q] * a[:, p, q]
    return acc


def eigvals_sym(m, tol: float = 1e-12) -> np.ndarray:
    """Ascending eigenvalues by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm is below ``tol * ||m||_F``.
    """
    a, single = _as_stack(m)
    a = 0.5 * (a + np.transpose(a, (0, 2, 1)))
    n = a.shape[1]
    thresh2 = (tol * tol) * _frob2(a)
    active = np.flatnonzero(_off_norm2(a) > thresh2)
    sweeps = 0
    while len(active):
        if sweeps >= MAX_SWEEPS:
            raise ConvergenceError(f"Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps")
        b = a[active]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = b[:, p, q]
                nz = apq != 0.0
                safe = np.where(nz, apq, 1.0)
                tau = (b[:, q, q] - b[:, p, p]) / (2.0 * safe)
                sgn = np.where(tau >= 0.0, 1.0, -1.0)
                t = np.where(nz, sgn / (np.abs(tau) + np.sqrt(1.0 + tau * tau)), 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp = b[:, :, p].copy()
                cq = b[:, :, q]
                b[:, :, p] = c[:, None] * cp - s[:, None] * cq
                b[:, :, q] = s[:, None] * cp + c[:, None] * cq
                rp = b[:, p, :].copy()
                rq = b[:, q, :]
                b[:, p, :] = c[:, None] * rp - s[:, None] * rq
                b[:, q, :] = s[:, None] * rp + c[:, None] * rq
        a[active] = b
        sweeps += 1
        still = _off_norm2(b) > thresh2[active]
        active = active[still]
    w = np.sort(np.diagonal(a, axis1=1, axis2=2), axis=1)
    return w[0] if single else w


def cholesky(m) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotSPDError` on a non-positive pivot."""
    a, single = _as_stack(m)
    bsz, n, _ = a.shape
    L = np.zeros_like(a)
    for j in range(n):
        acc = a[:, j:, j].copy()
        for k in range(j):
            acc -= L[:, j:, k] * L[:, j, k, None]
        d = acc[:, 0]
        if np.any(~(d > 0.0)):
            bad = int(np.flatnonzero(~(d > 0.0))[0])
            raise NotSPDError(f"matrix {bad} is not positive definite (pivot {j} = {d[bad]:.3g})")
        root = np.sqrt(d)
        L[:, j, j] = root
        L[:, j + 1:, j] = acc[:, 1:] / root[:, None]
    return L[0] if single else L


def _lower_inverse(L):
    bsz, n, _ = L.shape
    X = np.zeros_like(L)
    for i in range(n):
        X[:, i, i] = 1.0 / L[:, i, i]
        for j in range(i):
            acc = np.zeros(bsz)
            for k in range(j, i):
                acc += L[:, i, k] * X[:, k, j]
            X[:, i, j] = -acc / L[:, i, i]
    return X


def logdet_spd(m) -> np.ndarray:
    L = cholesky(m)
    Ls = L[None] if L.ndim == 2 else L
    n = Ls.shape[1]
    acc = np.zeros(len(Ls))
    for k in range(n):
        acc += np.log(Ls[:, k, k])
    acc *= 2.0
    return acc[0] if L.ndim == 2 else acc


def trace_inverse_spd(m) -> np.ndarray:
    """``trace(m^-1)`` as the squared Frobenius norm of ``L^-1``."""
    L = cholesky(m)
    Ls = L[None] if L.ndim == 2 else L
    X = _lower_inverse(Ls)
    acc = _frob2(X)
    return acc[0] if L.ndim == 2 else acc


def chol_logdet_inv(m):
    """``(log det m, m^-1)`` for SPD ``m`` via Cholesky and triangular solves.

    Returns a ``SymMatrix`` inverse when given a ``SymMatrix``.
    """
    was_sym = isinstance(m, SymMatrix)
    a, single = _as_stack(m)
    L = cholesky(a)
    n = a.shape[1]
    logdet = np.zeros(len(a))
    for k in range(n):
        logdet += np.log(L[:, k, k])
    logdet *= 2.0
    X = _lower_inverse(L)
    inv = np.einsum("bki,bkj->bij", X, X)
    inv = 0.5 * (inv + np.transpose(inv, (0, 2, 1)))
    if single:
        inv0 = SymMatrix.from_dense(inv[0]) if was_sym else inv[0]
        return float(logdet[0]), inv0
    return logdet, inv
