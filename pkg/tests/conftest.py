import numpy as np
import pytest
from scipy import linalg as sla


def controllability_margin(A, B):
    """Smallest singular value of the controllability matrix over its largest."""
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    s = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    return s[-1] / s[0]


def random_stabilizable(rng, n, m, margin=1e-3, p_max=1e4):
    """Random well-conditioned (A, B, Q, R) with (A, B) controllable.

    Draws whose controllability matrix is nearly rank deficient, or whose
    Riccati solution (as computed by SciPy) exceeds ``p_max`` in Frobenius
    norm, are rejected: on those the rounding floor of the residual is
    above any fixed absolute bound.
    """
    while True:
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        if controllability_margin(A, B) < margin:
            continue
        L = rng.normal(size=(n, n))
        Q = L.T @ L + 1e-2 * np.eye(n)
        G = rng.normal(size=(m, m))
        R = G @ G.T + 0.5 * np.eye(m)
        if np.linalg.norm(sla.solve_continuous_are(A, B, Q, R)) <= p_max:
            return A, B, Q, R


def kron_lyapunov(A, C):
    """Oracle: solve A'X + XA + C = 0 through the full n^2 Kronecker system."""
    n = A.shape[0]
    I = np.eye(n)
    M = np.kron(I, A.T) + np.kron(A.T, I)
    x = np.linalg.solve(M, -C.reshape(-1, order="F"))
    return x.reshape(n, n, order="F")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
