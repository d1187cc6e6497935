"""Continuous algebraic Riccati equation via the matrix sign function.

Solves  A^T P + P A - P B R^{-1} B^T P + Q = 0  for the stabilising P.
The sign of the Hamiltonian  [[A, -G], [-Q, -A^T]]  with  G = B R^{-1} B^T
is computed by the scaled Newton iteration  Z <- (c Z + (c Z)^{-1}) / 2
with determinant scaling  c = |det Z|^{-1/2n}. The stable invariant
subspace spanned by [I; P] is the null space of sign(H) + I, from which P
follows by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CareError(RuntimeError):
    """No stabilising solution could be computed."""


@dataclass
class CareSolution:
    P: np.ndarray
    residual: float
    iterations: int


def care_residual(A, B, Q, R, P) -> float:
    """Relative Frobenius residual  ||A^T P + P A - P G P + Q|| / max(1, ||P||)."""
    G = B @ np.linalg.solve(R, B.T)
    res = A.T @ P + P @ A - P @ G @ P + Q
    return float(np.linalg.norm(res) / max(1.0, np.linalg.norm(P)))


def _validate(A, B, Q, R):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}")
    if not np.allclose(R, R.T) or np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("R must be symmetric positive definite")
    if not np.allclose(Q, Q.T):
        raise ValueError("Q must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12 * max(1.0, np.abs(Q).max()):
        raise ValueError("Q must be positive semidefinite")
    return A, B, 0.5 * (Q + Q.T), 0.5 * (R + R.T)


def matrix_sign(H: np.ndarray, tol: float = 1e-12, maxiter: int = 100) -> tuple[np.ndarray, int]:
    n2 = H.shape[0]
    Z = H.copy()
    scale = True
    for k in range(1, maxiter + 1):
        sign, logdet = np.linalg.slogdet(Z)
        if sign == 0 or not np.isfinite(logdet):
            raise CareError("Hamiltonian iterate became singular (eigenvalue on the imaginary axis)")
        c = np.exp(-logdet / n2) if scale else 1.0
        try:
            Zinv = np.linalg.inv(c * Z)
        except np.linalg.LinAlgError as exc:
            raise CareError("Hamiltonian iterate became singular") from exc
        Znew = 0.5 * (c * Z + Zinv)
        change = np.linalg.norm(Znew - Z, 1) / np.linalg.norm(Znew, 1)
        Z = Znew
        if change < 1e-2:
            # near convergence scaling only slows down the quadratic phase
            scale = False
        if change <= tol:
            return Z, k
    raise CareError(f"sign iteration did not converge in {maxiter} iterations")


def solve_care(A, B, Q, R, tol: float = 1e-12, maxiter: int = 100) -> CareSolution:
    A, B, Q, R = _validate(A, B, Q, R)
    n = A.shape[0]
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])

    eig = np.linalg.eigvals(H)
    # relative test: with a cheap input ||H|| can be huge while the slow modes stay O(1)
    if np.any(np.abs(eig.real) <= np.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(eig))):
        raise CareError("Hamiltonian has eigenvalues on the imaginary axis; (A, B) not stabilisable or (Q, A) not detectable")

    W, iters = matrix_sign(H, tol, maxiter)
    I = np.eye(n)
    lhs = np.vstack([W[:n, n:], W[n:, n:] + I])
    rhs = -np.vstack([W[:n, :n] + I, W[n:, :n]])
    P = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    P = 0.5 * (P + P.T)
    # the stable subspace has no graph form when an unstable mode is unreachable
    if not np.all(np.isfinite(P)) or np.any(np.linalg.eigvals(A - G @ P).real >= 0):
        raise CareError("no stabilising solution; (A, B) not stabilisable")
    return CareSolution(P, care_residual(A, B, Q, R, P), iters)


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """State-feedback gain  K = R^{-1} B^T P  with a closed-loop stability check."""
    A, B, Q, R = _validate(A, B, Q, R)
    if not np.any(B):
        if np.all(np.linalg.eigvals(A).real < 0):
            return np.zeros((B.shape[1], A.shape[0]))
        raise CareError("B = 0 and A is not stable")
    sol = solve_care(A, B, Q, R)
    K = np.linalg.solve(R, B.T @ sol.P)
    if np.any(np.linalg.eigvals(A - B @ K).real >= 0):
        raise CareError("closed loop is not stable; check stabilisability")
    return K
