"""Dense Lyapunov and Riccati solvers for small continuous-time systems.

Everything here works on plain ``float64`` numpy arrays and is meant for the
problem sizes that show up in LQR templates (n <= ~8). The Lyapunov solver
is a direct solve of the symmetric-reduced Kronecker system; the Riccati
solver takes the stable invariant subspace of the Hamiltonian matrix and
polishes the result with Newton (Kleinman) steps.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import CareError, DimensionError, InputError, LyapunovError

__all__ = [
    "CareSolution",
    "as_matrix",
    "spectral_abscissa",
    "solve_lyapunov",
    "solve_care",
    "care_directional_derivative",
    "care_sensitivities",
]

LYAP_RTOL = 1e-9
CARE_RTOL = 1e-8


def as_matrix(a, name="matrix", shape=None):
    """Return ``a`` as a finite 2-D float array, checking ``shape`` if given."""
    m = np.array(a, dtype=float, copy=True)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {tuple(shape)}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} has non-finite entries")
    return m


def _square(a, name):
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    return m


def spectral_abscissa(A):
    """Largest real part over the eigenvalues of a square matrix."""
    A = _square(A, "A")
    return float(np.max(np.linalg.eigvals(A).real))


@dataclass(frozen=True)
class CareSolution:
    """Stabilizing solution of ``A'P + PA - PBR^{-1}B'P + Q = 0``.

    Attributes
    ----------
    P : (n, n) ndarray
        Symmetric positive semidefinite Riccati solution.
    K : (m, n) ndarray
        State-feedback gain ``R^{-1} B' P``.
    residual_norm : float
        Frobenius norm of the Riccati residual at ``P``.
    """

    P: np.ndarray
    K: np.ndarray
    residual_norm: float


# -- Lyapunov -----------------------------------------------------------------

def _sym_index(n):
    rows, cols = np.triu_indices(n)
    return rows, cols


def _lyapunov_operator(A):
    """Matrix of ``X -> A'X + XA`` restricted to symmetric X.

    Unknowns and equations are the upper-triangular entries, ordered as
    ``np.triu_indices``.
    """
    n = A.shape[0]
    rows, cols = _sym_index(n)
    k = rows.size
    # Duplication map: upper-triangular coordinates -> full symmetric matrix.
    E = np.zeros((k, n, n))
    E[np.arange(k), rows, cols] = 1.0
    E[np.arange(k), cols, rows] = 1.0
    L = A.T @ E + E @ A
    return L[:, rows, cols].T


def _lyapunov_factor(A):
    abscissa = spectral_abscissa(A)
    if not abscissa < 0.0:
        raise LyapunovError(
            f"Lyapunov operator requires a stable matrix; spectral abscissa is "
            f"{abscissa:.6g}",
            abscissa=abscissa,
        )
    return sla.lu_factor(_lyapunov_operator(A))


def _lyapunov_solve_factored(A, lu, C):
    """Solve ``A'X + XA + C = 0`` for a stack of symmetric ``C`` (k, n, n)."""
    n = A.shape[0]
    rows, cols = _sym_index(n)
    rhs = -C[:, rows, cols].T
    sol = sla.lu_solve(lu, rhs)
    X = np.zeros_like(C)
    X[:, rows, cols] = sol.T
    X[:, cols, rows] = sol.T
    # One step of iterative refinement.
    R = A.T @ X + X @ A + C
    R = 0.5 * (R + np.swapaxes(R, 1, 2))
    corr = sla.lu_solve(lu, -R[:, rows, cols].T)
    X[:, rows, cols] += corr.T
    X[:, cols, rows] = X[:, rows, cols]
    return X


def solve_lyapunov(A, C):
    """Solve the continuous Lyapunov equation ``A'X + XA + C = 0``.

    Parameters
    ----------
    A : (n, n) array_like
        Hurwitz matrix (all eigenvalues in the open left half plane).
    C : (n, n) array_like
        Symmetric right-hand side.

    Returns
    -------
    X : (n, n) ndarray
        Symmetric solution.

    Raises
    ------
    LyapunovError
        If ``A`` is not Hurwitz; the message names the spectral abscissa.
    DimensionError
        If the shapes disagree.
    """
    A = _square(A, "A")
    C = as_matrix(C, "C", shape=A.shape)
    if not np.allclose(C, C.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(C).max())):
        raise InputError("C must be symmetric")
    C = 0.5 * (C + C.T)
    lu = _lyapunov_factor(A)
    return _lyapunov_solve_factored(A, lu, C[None])[0]


# -- Riccati ------------------------------------------------------------------

def care_residual(A, B, Q, R, P):
    """Riccati residual ``A'P + PA - PBR^{-1}B'P + Q``."""
    return A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q


def _check_care_inputs(A, B, Q, R):
    A = _square(A, "A")
    n = A.shape[0]
    B = as_matrix(B, "B")
    if B.shape[0] != n:
        raise DimensionError(f"B must have {n} rows, got shape {B.shape}")
    m = B.shape[1]
    Q = as_matrix(Q, "Q", shape=(n, n))
    R = as_matrix(R, "R", shape=(m, m))
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise InputError("Q must be symmetric")
    if not np.allclose(R, R.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(R).max())):
        raise InputError("R must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise InputError("R must be positive definite") from None
    if np.linalg.cond(R) > 1e14:
        raise InputError("R is numerically singular")
    return A, B, 0.5 * (Q + Q.T), 0.5 * (R + R.T)


def solve_care(A, B, Q, R, newton_steps=4, rtol=CARE_RTOL, term_scaled=False):
    """Stabilizing solution of the continuous algebraic Riccati equation.

    Solves ``A'P + PA - PBR^{-1}B'P + Q = 0`` from the ordered real Schur
    form of the Hamiltonian ``[[A, -BR^{-1}B'], [-Q, -A']]`` and then applies
    up to ``newton_steps`` Kleinman iterations while the residual is above
    tolerance.

    Parameters
    ----------
    A : (n, n) array_like
    B : (n, m) array_like
    Q : (n, n) array_like
        Symmetric positive semidefinite state cost.
    R : (m, m) array_like
        Symmetric positive definite control cost.
    rtol : float
        Residual tolerance, relative to ``max(1, ||Q||_F)``.
    term_scaled : bool
        If true, the tolerance is relative to the largest Frobenius norm
        among ``Q``, ``A'P`` and ``PBR^{-1}B'P`` instead. Badly conditioned
        problems (large ``P``) cannot reach an absolute bound in double
        precision.

    Returns
    -------
    CareSolution

    Raises
    ------
    InputError
        If ``R`` is singular or a cost matrix is not symmetric.
    CareError
        If no stabilizing solution is found; ``diagnostics`` holds what was
        measured (abscissa, residual, ...).
    """
    A, B, Q, R = _check_care_inputs(A, B, Q, R)
    n = A.shape[0]
    G = B @ np.linalg.solve(R, B.T)
    H = np.block([[A, -G], [-Q, -A.T]])
    tol = rtol * max(1.0, np.linalg.norm(Q))

    try:
        T, Z, sdim = sla.schur(H, output="real", sort="lhp")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise CareError(f"Hamiltonian Schur decomposition failed: {exc}") from exc
    if sdim != n:
        raise CareError(
            f"Hamiltonian has {sdim} stable eigenvalues, expected {n}; "
            "(A, B) is likely not stabilizable",
            stable_eigenvalues=sdim,
        )
    U1, U2 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(U1) > 1e12:
        raise CareError("stable subspace is not a graph over the state space",
                        cond_U1=float(np.linalg.cond(U1)))
    P = np.linalg.solve(U1.T, U2.T).T
    P = 0.5 * (P + P.T)

    res = np.linalg.norm(care_residual(A, B, Q, R, P))
    for _ in range(newton_steps):
        if res <= 0.01 * tol:
            break
        K = np.linalg.solve(R, B.T @ P)
        Acl = A - B @ K
        try:
            P_new = solve_lyapunov(Acl, Q + K.T @ R @ K)
        except LyapunovError:
            break
        P_new = 0.5 * (P_new + P_new.T)
        res_new = np.linalg.norm(care_residual(A, B, Q, R, P_new))
        if not res_new < res:
            break
        P, res = P_new, res_new

    K = np.linalg.solve(R, B.T @ P)
    if term_scaled:
        terms = max(np.linalg.norm(A.T @ P), np.linalg.norm(P @ B @ K))
        tol = max(tol, rtol * terms)
    abscissa = spectral_abscissa(A - B @ K)
    min_eig = float(np.min(np.linalg.eigvalsh(P)))
    diag = dict(abscissa=abscissa, residual=res, min_eig=min_eig)
    if not abscissa < 0.0:
        raise CareError(f"closed loop is not stable (abscissa {abscissa:.3g})", **diag)
    if min_eig < -1e-9 * max(1.0, np.abs(P).max()):
        raise CareError(f"Riccati solution is not PSD (min eig {min_eig:.3g})", **diag)
    if not res <= tol:
        raise CareError(f"Riccati residual {res:.3g} exceeds tolerance {tol:.3g}", **diag)
    return CareSolution(P=P, K=K, residual_norm=float(res))


# -- Riccati differential -------------------------------------------------------

def _zeros_or(a, shape, name):
    if a is None:
        return np.zeros(shape)
    return as_matrix(a, name, shape=shape)


def care_sensitivities(sol, A, B, R, dAs, dBs, dQs=None, dRs=None):
    """Directional derivatives of ``P`` and ``K`` along several perturbations.

    Batched form of :func:`care_directional_derivative`: ``dAs`` is (k, n, n),
    ``dBs`` is (k, n, m) and the optional ``dQs``/``dRs`` are stacks of the
    same length. The Lyapunov operator is factored once and reused.

    Returns
    -------
    dP : (k, n, n) ndarray
    dK : (k, m, n) ndarray
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    R = np.asarray(R, dtype=float)
    n, m = B.shape
    dAs = np.asarray(dAs, dtype=float).reshape(-1, n, n)
    k = dAs.shape[0]
    dBs = np.asarray(dBs, dtype=float).reshape(k, n, m)
    P, K = sol.P, sol.K
    Acl = A - B @ K
    dZ = P @ (dAs - dBs @ K)
    C = dZ + np.swapaxes(dZ, 1, 2)
    if dQs is not None:
        C = C + np.asarray(dQs, dtype=float).reshape(k, n, n)
    dRs = None if dRs is None else np.asarray(dRs, dtype=float).reshape(k, m, m)
    if dRs is not None:
        C = C + K.T @ dRs @ K
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    lu = _lyapunov_factor(Acl)
    dP = _lyapunov_solve_factored(Acl, lu, C)
    rhs = np.swapaxes(dBs, 1, 2) @ P + B.T @ dP
    if dRs is not None:
        rhs = rhs - dRs @ K
    dK = np.linalg.solve(R, rhs)
    return dP, dK


def care_directional_derivative(sol, A, B, Q, R, dA=None, dB=None, dQ=None, dR=None):
    """Differential of the Riccati solution along ``(dA, dB, dQ, dR)``.

    ``dP`` solves ``dP Acl + Acl' dP + dZ + dZ' + dQ + K' dR K = 0`` with
    ``Acl = A - BK`` and ``dZ = P (dA - dB K)``; the gain differential is
    ``dK = R^{-1} (dB' P + B' dP - dR K)``. Omitted perturbations are zero.

    Returns
    -------
    dP : (n, n) ndarray
    dK : (m, n) ndarray
    """
    A, B, Q, R = _check_care_inputs(A, B, Q, R)
    n, m = B.shape
    if sol.P.shape != (n, n) or sol.K.shape != (m, n):
        raise DimensionError("solution does not match the system dimensions")
    dA = _zeros_or(dA, (n, n), "dA")
    dB = _zeros_or(dB, (n, m), "dB")
    dQ = _zeros_or(dQ, (n, n), "dQ")
    dR = _zeros_or(dR, (m, m), "dR")
    dP, dK = care_sensitivities(sol, A, B, R, dA[None], dB[None], dQ[None], dR[None])
    return dP[0], dK[0]
