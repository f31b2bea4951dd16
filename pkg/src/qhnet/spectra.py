"""Dense symmetric linear algebra and evaluation metrics.

Solves the generalized symmetric eigenproblem H C = S C diag(eps) by
Cholesky reduction to an ordinary symmetric problem and a cyclic Jacobi
iteration, then derives the quality metrics (entrywise Hamiltonian MAE,
occupied orbital-energy MAE, wavefunction cosine similarity) and the
scalar training loss.

Everything here is plain float64 numpy; functions are pure and safe to
call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolation,
    NotPositiveDefiniteError,
    NumericalError,
    UnsupportedSystemError,
)

JACOBI_TOL = 1e-12  # off-diagonal Frobenius threshold, relative to ||A||_F
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class Pencil:
    """Symmetric matrix pair (H, S) with S positive definite."""

    h: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class Spectrum:
    """Ascending eigenvalues and S-orthonormal coefficient columns."""

    eps: np.ndarray
    c: np.ndarray


def cholesky(s: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = S, positive diagonal.

    Raises NotPositiveDefiniteError when a pivot is not positive.
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ContractViolation(f"cholesky expects a square matrix, got {s.shape}")
    l = np.zeros_like(s)
    for j in range(n):
        d = s[j, j] - l[j, :j] @ l[j, :j]
        if d <= 0.0 or not np.isfinite(d):
            raise NotPositiveDefiniteError(f"non-positive pivot {d:.3e} at index {j}")
        l[j, j] = np.sqrt(d)
        if j + 1 < n:
            l[j + 1 :, j] = (s[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return l


def _solve_lower(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution: x with L x = b (b may have trailing columns)."""
    n = l.shape[0]
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(n):
        if i:
            x[i] -= l[i, :i] @ x[:i]
        x[i] /= l[i, i]
    return x


def _solve_lower_t(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution: x with L^T x = b."""
    n = l.shape[0]
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] -= l[i + 1 :, i] @ x[i + 1 :]
        x[i] /= l[i, i]
    return x


def symmetric_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns ascending eigenvalues and an orthogonal matrix Q with
    A Q = Q diag(lam).  Iterates full sweeps until the off-diagonal
    Frobenius norm drops below JACOBI_TOL * ||A||_F; raises
    NumericalError if that takes more than JACOBI_MAX_SWEEPS sweeps.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractViolation(f"symmetric_eig expects a square matrix, got {a.shape}")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    w = np.array(a, copy=True)
    q = np.eye(n)
    norm = np.sqrt(np.sum(a * a))
    if norm == 0.0:
        return np.zeros(n), q
    tol = JACOBI_TOL * norm
    mask = ~np.eye(n, dtype=bool)
    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(np.sum(w[mask] ** 2))
        if off < tol:
            lam = np.diag(w).copy()
            order = np.argsort(lam, kind="stable")
            return lam[order], q[:, order]
        for p in range(n - 1):
            for r in range(p + 1, n):
                apq = w[p, r]
                if apq == 0.0:
                    continue
                # classical Jacobi rotation angle, numerically stable form
                diff = w[r, r] - w[p, p]
                if abs(apq) < 1e-153 * abs(diff):
                    # rotation angle below fp64 resolution, entry is negligible
                    continue
                theta = diff / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                wp = w[p, :].copy()
                wr = w[r, :].copy()
                w[p, :] = c * wp - s * wr
                w[r, :] = s * wp + c * wr
                wp = w[:, p].copy()
                wr = w[:, r].copy()
                w[:, p] = c * wp - s * wr
                w[:, r] = s * wp + c * wr
                qp = q[:, p].copy()
                q[:, p] = c * qp - s * q[:, r]
                q[:, r] = s * qp + c * q[:, r]
    raise NumericalError(
        f"Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
    )


def generalized_eig(pencil: Pencil) -> Spectrum:
    """Solve H C = S C diag(eps) with C^T S C = I, eigenvalues ascending.

    Reduces via S = L L^T to the ordinary problem L^-1 H L^-T and maps the
    eigenvectors back with C = L^-T Q.
    """
    h = np.asarray(pencil.h, dtype=np.float64)
    s = np.asarray(pencil.s, dtype=np.float64)
    if h.shape != s.shape or h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractViolation(f"pencil shape mismatch: {h.shape} vs {s.shape}")
    l = cholesky(s)
    # A = L^-1 H L^-T, computed by two triangular solves
    tmp = _solve_lower(l, h)
    a = _solve_lower(l, tmp.T).T
    a = 0.5 * (a + a.T)
    eps, q = symmetric_eig(a)
    c = _solve_lower_t(l, q)
    return Spectrum(eps=eps, c=c)


def n_occupied(atoms: list[int]) -> int:
    """Number of doubly occupied orbitals of a closed-shell molecule."""
    electrons = int(sum(atoms))
    if electrons % 2 != 0:
        raise UnsupportedSystemError(
            f"odd electron count {electrons}: only closed-shell systems supported"
        )
    return electrons // 2


def loss(h_pred: np.ndarray, h_label: np.ndarray) -> float:
    """Scalar training loss: entrywise RMSE plus entrywise MAE."""
    d = np.asarray(h_pred, dtype=np.float64) - np.asarray(h_label, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractViolation(f"loss expects square matrices, got {d.shape}")
    return float(np.sqrt(np.mean(d * d)) + np.mean(np.abs(d)))


def metrics(
    h_pred: np.ndarray,
    h_label: np.ndarray,
    atoms: list[int],
    overlap: np.ndarray | None = None,
    occupied_only: bool = True,
) -> dict[str, float]:
    """Quality metrics of a predicted Hamiltonian against a label.

    mae_H is over all matrix entries; mae_eps over the n_occ lowest orbital
    energies (all orbitals with occupied_only=False); cos_psi is the mean
    absolute cosine between predicted and reference occupied coefficient
    columns.  Both spectra use the same overlap (identity when omitted) and
    symmetrized Hamiltonians.
    """
    h_pred = np.asarray(h_pred, dtype=np.float64)
    h_label = np.asarray(h_label, dtype=np.float64)
    if h_pred.shape != h_label.shape:
        raise ContractViolation(f"shape mismatch: {h_pred.shape} vs {h_label.shape}")
    n = h_pred.shape[0]
    s = np.eye(n) if overlap is None else np.asarray(overlap, dtype=np.float64)
    n_occ = n_occupied(atoms)
    if n_occ > n:
        raise ContractViolation(f"n_occ={n_occ} exceeds orbital count {n}")

    mae_h = float(np.mean(np.abs(h_pred - h_label)))
    sp = generalized_eig(Pencil(0.5 * (h_pred + h_pred.T), s))
    st = generalized_eig(Pencil(0.5 * (h_label + h_label.T), s))
    k = n_occ if occupied_only else n
    mae_eps = float(np.mean(np.abs(sp.eps[:k] - st.eps[:k])))
    cp = sp.c[:, :n_occ]
    ct = st.c[:, :n_occ]
    cos = np.abs(np.sum(cp * ct, axis=0)) / (
        np.linalg.norm(cp, axis=0) * np.linalg.norm(ct, axis=0)
    )
    return {"mae_H": mae_h, "mae_eps": mae_eps, "cos_psi": float(np.mean(cos))}
