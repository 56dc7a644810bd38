"""Balanced truncation of Gaussian linear gMDPs.

The controllability Gramian is formed for the joint input matrix
``[B B_w]`` so that the noise channels shape the reduced basis; the
observability Gramian uses ``C``.  Balancing uses the square-root method,
which only needs factors of the Gramians and therefore also handles
uncontrollable or unobservable directions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import (DEFAULT_TOL, Tolerances, UnstableError, psd_factor, solve_dare,
                     solve_discrete_lyapunov, spectral_radius)
from .models import GaussianLtiGmdp

__all__ = ["ReducedModel", "balanced_truncation", "prefeedback_gain", "gramians",
           "frequency_response"]


@dataclass(frozen=True, eq=False)
class ReducedModel:
    """Reduced-order model and the data that produced it.

    Attributes
    ----------
    model : GaussianLtiGmdp
        Reduced realization ``(A_i, B_i, B_wi, C_i)``.
    hankel_values : ndarray
        Hankel singular values of the full (possibly pre-fed-back) model,
        descending.
    source : str
        ``"plain"`` or ``"prefeedback"``.
    F : ndarray or None
        Pre-feedback gain when ``source == "prefeedback"``.
    T, Ti : ndarray
        Reduction maps: ``x_r = Ti x`` and ``x ≈ T x_r``.
    feedthrough : ndarray or None
        Direct term dropped by the DC-matching variant.
    """

    model: GaussianLtiGmdp
    hankel_values: np.ndarray
    source: str
    F: Optional[np.ndarray]
    T: np.ndarray
    Ti: np.ndarray
    feedthrough: Optional[np.ndarray] = None


def gramians(A, Bj, C, tol: Tolerances = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Controllability and observability Gramians of a stable system."""
    Wc = solve_discrete_lyapunov(A, Bj @ Bj.T, tol)
    Wo = solve_discrete_lyapunov(A.T, C.T @ C, tol)
    return Wc, Wo


def prefeedback_gain(model: GaussianLtiGmdp, input_weight: float = 0.02,
                     tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """LQR gain ``F`` with ``Qc = CᵀC`` and ``Rc = input_weight · I``.

    Returned in the ``u = F x`` convention, so ``A + B F`` is stable.
    """
    A, B, C = model.A, model.B, model.C
    if not np.any(A):
        return np.zeros((model.m, model.n))
    _, F = solve_dare(A, B, C.T @ C, input_weight * np.eye(model.m), tol)
    return F


def _fix_signs(T: np.ndarray, Ti: np.ndarray, atol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    T, Ti = T.copy(), Ti.copy()
    for j in range(T.shape[1]):
        col = T[:, j]
        nz = np.flatnonzero(np.abs(col) > atol * max(1.0, np.abs(col).max()))
        if nz.size and col[nz[0]] < 0:
            T[:, j] *= -1
            Ti[j, :] *= -1
    return T, Ti


def balanced_truncation(model: GaussianLtiGmdp, order: int, prefeedback: Optional[np.ndarray] = None,
                        method: str = "truncate", noise: str = "joint",
                        tol: Tolerances = DEFAULT_TOL) -> ReducedModel:
    """Reduce ``model`` to ``order`` states by balanced truncation.

    Parameters
    ----------
    model : GaussianLtiGmdp
    order : int
        Number of retained states, ``1 <= order <= n``.
    prefeedback : ndarray, optional
        Gain ``F``; the system ``A + B F`` is reduced instead of ``A``.
    method : {"truncate", "matchdc"}
        Plain truncation of the balanced realization, or the singular
        perturbation variant that preserves the static gain (its direct
        term is returned in ``feedthrough`` and not used by the model).
    noise : {"joint", "project"}
        ``"joint"`` balances for ``[B B_w]``; ``"project"`` balances for
        ``B`` alone and projects ``B_w`` afterwards.

    Raises
    ------
    UnstableError
        If the (pre-fed-back) state matrix is not Schur stable.
    """
    n = model.n
    if not 1 <= order <= n:
        raise ValueError(f"order must lie in [1, {n}]")
    A = model.A if prefeedback is None else model.A + model.B @ np.atleast_2d(prefeedback)
    if spectral_radius(A) >= 1.0 - tol.stability_margin:
        raise UnstableError("state matrix is unstable; supply a prefeedback gain "
                            "(see prefeedback_gain) before reducing")
    B, Bw, C = model.B, model.Bw, model.C
    Bj = np.hstack([B, Bw]) if noise == "joint" else B
    if noise not in ("joint", "project"):
        raise ValueError("noise must be 'joint' or 'project'")
    Wc, Wo = gramians(A, Bj, C, tol)
    Lc = psd_factor(Wc)
    Lo = psd_factor(Wo)
    U, s, Vt = np.linalg.svd(Lo.T @ Lc, full_matrices=False)
    hsv = np.zeros(n)
    hsv[:s.size] = s
    full_rank = s.size == n and s[-1] > 1e-13 * s[0]
    r = order if not (method == "matchdc" and order < n) else n
    if method == "matchdc" and order < n and not full_rank:
        raise ValueError("DC matching needs a minimal realization (all Hankel values > 0)")
    if r > s.size or s[r - 1] <= 1e-14 * s[0]:
        raise ValueError("requested order exceeds the number of nonzero Hankel values")
    sr = s[:r] ** -0.5
    T = Lc @ Vt[:r].T * sr
    Ti = (sr[:, None]) * (U[:, :r].T @ Lo.T)
    T, Ti = _fix_signs(T, Ti)
    Ab, Bb, Bwb, Cb = Ti @ A @ T, Ti @ B, Ti @ Bw, C @ T
    D = None
    if method == "matchdc" and order < n:
        k = order
        A11, A12, A21, A22 = Ab[:k, :k], Ab[:k, k:], Ab[k:, :k], Ab[k:, k:]
        Binp = np.hstack([Bb, Bwb])
        X = np.linalg.solve(np.eye(n - k) - A22, np.hstack([A21, Binp[k:]]))
        Ar = A11 + A12 @ X[:, :k]
        Br_all = Binp[:k] + A12 @ X[:, k:]
        Cr = Cb[:, :k] + Cb[:, k:] @ X[:, :k]
        D = Cb[:, k:] @ X[:, k:]
        Bb, Bwb = Br_all[:, :model.m], Br_all[:, model.m:]
        Ab, Cb = Ar, Cr
        T, Ti = T[:, :k], Ti[:k]
    elif method != "truncate" and method != "matchdc":
        raise ValueError("method must be 'truncate' or 'matchdc'")
    reduced = GaussianLtiGmdp(Ab, Bb, Bwb, Cb, x0=Ti @ model.x0, input_bound=model.input_bound)
    return ReducedModel(reduced, hsv, "plain" if prefeedback is None else "prefeedback",
                        None if prefeedback is None else np.atleast_2d(prefeedback), T, Ti, D)


def frequency_response(A, Bj, C, omegas) -> np.ndarray:
    """``C (e^{jω} I − A)⁻¹ B_j`` for each frequency, shape (len, d, m)."""
    n = A.shape[0]
    out = []
    for w in np.atleast_1d(omegas):
        out.append(C @ np.linalg.solve(np.exp(1j * w) * np.eye(n) - A, Bj))
    return np.array(out)
