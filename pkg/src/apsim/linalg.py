"""Dense matrix kernels: Lyapunov, Riccati and constrained Sylvester solvers,
the chi-square quantile, and small factorization helpers.

All solvers are written for the small dense systems that appear in the
case studies (state dimension up to about ten).  Each solver verifies its
own residual before returning and raises :class:`SolverError` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "SolverError", "UnstableError", "Tolerances", "TOLERANCE_PROFILES",
    "spectral_radius", "psd_factor", "solve_discrete_lyapunov", "solve_dare",
    "solve_sylvester_ls", "chi_square_inv", "markov_parameters",
]


class SolverError(RuntimeError):
    """A numerical kernel failed to meet its residual contract."""


class UnstableError(SolverError):
    """A matrix required to be Schur stable is not."""


@dataclass(frozen=True)
class Tolerances:
    """Default numerical tolerances, grouped so that a whole profile can be
    swapped from the command line."""

    lyapunov_rel: float = 1e-10
    stability_margin: float = 1e-9
    dare_residual: float = 1e-8
    dare_max_iter: int = 10_000
    sylvester: float = 1e-8
    chi2: float = 1e-10
    probability: float = 1e-12
    lifting: float = 1e-9
    reconstruction: float = 1e-9
    psd: float = 1e-9


TOLERANCE_PROFILES = {
    "default": Tolerances(),
    "strict": Tolerances(lyapunov_rel=1e-12, dare_residual=1e-10, sylvester=1e-10,
                         lifting=1e-11, reconstruction=1e-11, psd=1e-11),
    "loose": Tolerances(lyapunov_rel=1e-8, dare_residual=1e-6, sylvester=1e-6,
                        lifting=1e-7, reconstruction=1e-7, psd=1e-7),
}

DEFAULT_TOL = TOLERANCE_PROFILES["default"]


def spectral_radius(A) -> float:
    """Largest eigenvalue modulus of a square matrix (0 for empty)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def psd_factor(S, rtol: float = 1e-12) -> np.ndarray:
    """Factor ``S = F Fᵀ`` for symmetric positive semi-definite ``S``.

    Uses Cholesky when ``S`` is numerically definite and falls back to a
    rank-revealing eigendecomposition otherwise; in the singular case ``F``
    has ``rank(S)`` columns.

    Raises
    ------
    ValueError
        If ``S`` has a clearly negative eigenvalue.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    S = 0.5 * (S + S.T)
    if S.size == 0:
        return np.zeros((S.shape[0], 0))
    try:
        L = np.linalg.cholesky(S)
        if np.min(np.abs(np.diag(L))) > rtol * max(1.0, np.sqrt(np.max(np.abs(np.diag(S))))):
            return L
    except np.linalg.LinAlgError:
        pass
    lam, V = np.linalg.eigh(S)
    scale = max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    if lam[0] < -1e-9 * scale:
        raise ValueError("matrix is not positive semi-definite")
    keep = lam > rtol * scale
    return V[:, keep] * np.sqrt(lam[keep])


def solve_discrete_lyapunov(A, Q, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Solve ``A X Aᵀ − X + Q = 0`` by the doubling iteration.

    Starting from ``X = Q`` the recursion ``X ← X + A X Aᵀ``, ``A ← A²``
    sums the series ``Σ A^k Q (Aᵀ)^k`` in ``O(log)`` steps.

    Raises
    ------
    UnstableError
        If the spectral radius of ``A`` is at least ``1 − 1e-9``.
    SolverError
        If the final residual exceeds the relative tolerance.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if spectral_radius(A) >= 1.0 - tol.stability_margin:
        raise UnstableError("unstable A: spectral radius >= 1")
    X = solve_discrete_lyapunov_raw(A, Q)
    X = 0.5 * (X + X.T)
    qn = np.linalg.norm(Q)
    res = np.linalg.norm(A @ X @ A.T - X + Q)
    if res > tol.lyapunov_rel * max(qn, 1e-300) and res > 1e-14:
        # one refinement sweep on the residual equation
        D = solve_discrete_lyapunov_raw(A, A @ X @ A.T - X + Q)
        X = 0.5 * ((X + D) + (X + D).T)
        res = np.linalg.norm(A @ X @ A.T - X + Q)
        if res > tol.lyapunov_rel * max(qn, 1e-300) and res > 1e-14:
            raise SolverError(f"Lyapunov residual {res:.3e} above tolerance")
    return X


def solve_discrete_lyapunov_raw(A, Q) -> np.ndarray:
    """Doubling iteration without checks; used for residual correction."""
    X = 0.5 * (Q + Q.T)
    Ak = A.copy()
    for _ in range(200):
        X = X + Ak @ X @ Ak.T
        Ak = Ak @ Ak
        if np.max(np.abs(Ak), initial=0.0) < 1e-18:
            break
    return X


def _dare_residual(A, B, Qc, Rc, X) -> float:
    G = Rc + B.T @ X @ B
    res = A.T @ X @ A - X - A.T @ X @ B @ np.linalg.solve(G, B.T @ X @ A) + Qc
    return float(np.linalg.norm(res) / max(1.0, np.linalg.norm(X)))


def solve_dare(A, B, Qc, Rc, tol: Tolerances = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing solution of the discrete algebraic Riccati equation

    ``X = AᵀXA − AᵀXB (Rc + BᵀXB)⁻¹ BᵀXA + Qc``

    and the associated gain ``F = −(Rc + BᵀXB)⁻¹ BᵀXA`` so that ``A + BF``
    is Schur stable.

    The structure-preserving doubling algorithm is tried first; if it does
    not converge, the plain Riccati fixed-point iteration is run for up to
    ``tol.dare_max_iter`` steps.

    Returns
    -------
    X : ndarray
        Symmetric stabilizing solution.
    F : ndarray
        State-feedback gain in the ``u = F x`` convention.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    Rc = np.atleast_2d(np.asarray(Rc, dtype=float))
    n = A.shape[0]
    X = None
    try:
        Ak = A.copy()
        Gk = B @ np.linalg.solve(Rc, B.T)
        Hk = Qc.copy()
        In = np.eye(n)
        for _ in range(100):
            W = In + Gk @ Hk
            Winv_A = np.linalg.solve(W, Ak)
            Winv_G = np.linalg.solve(W, Gk)
            A_new = Ak @ Winv_A
            G_new = Gk + Ak @ Winv_G @ Ak.T
            H_new = Hk + Ak.T @ Hk @ Winv_A
            done = np.linalg.norm(H_new - Hk) <= 1e-15 * max(1.0, np.linalg.norm(H_new))
            Ak, Gk, Hk = A_new, 0.5 * (G_new + G_new.T), 0.5 * (H_new + H_new.T)
            if done:
                break
        if np.all(np.isfinite(Hk)) and _dare_residual(A, B, Qc, Rc, Hk) <= tol.dare_residual:
            X = Hk
    except np.linalg.LinAlgError:
        X = None
    if X is None:
        X = Qc.copy()
        for _ in range(tol.dare_max_iter):
            G = Rc + B.T @ X @ B
            X_new = A.T @ X @ A - A.T @ X @ B @ np.linalg.solve(G, B.T @ X @ A) + Qc
            X_new = 0.5 * (X_new + X_new.T)
            if np.linalg.norm(X_new - X) <= 1e-14 * max(1.0, np.linalg.norm(X_new)):
                X = X_new
                break
            X = X_new
        else:
            raise SolverError("DARE iteration did not converge in the step budget")
    res = _dare_residual(A, B, Qc, Rc, X)
    if res > tol.dare_residual:
        raise SolverError(f"DARE residual {res:.3e} above tolerance")
    F = -np.linalg.solve(Rc + B.T @ X @ B, B.T @ X @ A)
    if spectral_radius(A + B @ F) >= 1.0:
        raise SolverError("DARE solution is not stabilizing")
    return X, F


def solve_sylvester_ls(A, B, A_i, C, C_i, B_w, B_wi, B_s, tol: Tolerances = DEFAULT_TOL):
    """Constrained least-squares solution of the interface equations.

    Finds ``(P, Q, R)`` with

    * ``P A_i − A P − B Q = 0`` and ``C P = C_i`` (hard constraints), and
    * among those, minimal ``‖B_w − P B_wi‖_F² + ‖B R − P B_s‖_F²``.

    The unknowns are stacked as ``z = [vec P; vec Q; vec R]`` (column-major
    ``vec``), the constraints become ``E z = f`` and the objective
    ``‖G z − g‖²``; the problem is solved on the null space of ``E``.

    Returns
    -------
    P, Q, R : ndarray
        Shapes ``(n, n_s)``, ``(m, n_s)`` and ``(m, m_s)``.

    Raises
    ------
    SolverError
        If the hard constraints have no solution; the message reports the
        constraint rank.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    A_i = np.atleast_2d(np.asarray(A_i, dtype=float))
    ns = A_i.shape[0]
    C = np.asarray(C, dtype=float).reshape(-1, n)
    C_i = np.asarray(C_i, dtype=float).reshape(C.shape[0], ns)
    B_w = np.asarray(B_w, dtype=float).reshape(n, -1)
    B_wi = np.asarray(B_wi, dtype=float).reshape(ns, -1)
    B_s = np.asarray(B_s, dtype=float).reshape(ns, -1)
    if ns > n:
        raise ValueError("reduced order exceeds full order")
    if B_w.shape[1] != B_wi.shape[1]:
        raise ValueError("noise dimensions of the two models differ")
    m, ms, d = B.shape[1], B_s.shape[1], C.shape[0]
    nP, nQ, nR = n * ns, m * ns, m * ms
    I_n, I_ns = np.eye(n), np.eye(ns)
    # vec(P A_i) = (A_iᵀ ⊗ I_n) vec P ; vec(A P) = (I ⊗ A) vec P ; vec(B Q) = (I ⊗ B) vec Q
    E1 = np.hstack([np.kron(A_i.T, I_n) - np.kron(I_ns, A), -np.kron(I_ns, B), np.zeros((nP, nR))])
    E2 = np.hstack([np.kron(I_ns, C), np.zeros((d * ns, nQ + nR))])
    E = np.vstack([E1, E2])
    f = np.concatenate([np.zeros(nP), C_i.reshape(-1, order="F")])
    k = B_w.shape[1]
    G1 = np.hstack([np.kron(B_wi.T, I_n), np.zeros((n * k, nQ + nR))])
    g1 = B_w.reshape(-1, order="F")
    G2 = np.hstack([-np.kron(B_s.T, I_n), np.zeros((n * ms, nQ)), np.kron(np.eye(ms), B)])
    g2 = np.zeros(n * ms)
    G = np.vstack([G1, G2])
    g = np.concatenate([g1, g2])

    U, s, Vt = np.linalg.svd(E)
    rank = int(np.sum(s > 1e-10 * max(1.0, s[0] if s.size else 1.0)))
    z0 = Vt[:rank].T @ ((U[:, :rank].T @ f) / s[:rank])
    cres = np.linalg.norm(E @ z0 - f)
    if cres > tol.sylvester * max(1.0, np.linalg.norm(f)):
        raise SolverError(f"interface constraints infeasible: rank(E)={rank} of {E.shape[1]} "
                          f"unknowns, residual {cres:.3e}")
    N = Vt[rank:].T
    if N.shape[1]:
        y, *_ = np.linalg.lstsq(G @ N, g - G @ z0, rcond=None)
        z = z0 + N @ y
    else:
        z = z0
    P = z[:nP].reshape((n, ns), order="F")
    Q = z[nP:nP + nQ].reshape((m, ns), order="F")
    R = z[nP + nQ:].reshape((m, ms), order="F")
    return P, Q, R


def chi_square_inv(k: int, p: float, tol: Tolerances = DEFAULT_TOL) -> float:
    """Quantile of the chi-square law with ``k`` degrees of freedom.

    Returns ``x`` such that the regularized lower incomplete gamma function
    ``P(k/2, x/2)`` equals ``p``.
    """
    if int(k) != k or k < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    if not (0.0 <= p < 1.0):
        raise ValueError("probability must lie in [0, 1)")
    if p == 0.0:
        return 0.0
    x = 2.0 * float(special.gammaincinv(0.5 * k, p))
    # one Newton polish on the CDF equation
    for _ in range(3):
        err = special.gammainc(0.5 * k, 0.5 * x) - p
        if abs(err) <= tol.chi2 * 1e-2:
            break
        dens = np.exp((0.5 * k - 1) * np.log(0.5 * x) - 0.5 * x - special.gammaln(0.5 * k)) * 0.5
        if dens <= 0:
            break
        x -= err / dens
    return float(x)


def markov_parameters(A, B, C, count: int) -> np.ndarray:
    """Stack ``C A^j B`` for ``j = 0..count-1`` into shape ``(count, d, m)``."""
    A = np.atleast_2d(A)
    out = []
    Ak_B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    for _ in range(count):
        out.append(C @ Ak_B)
        Ak_B = A @ Ak_B
    return np.array(out)
