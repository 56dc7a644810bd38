"""ε,δ-simulation relations between an abstract and a concrete model.

For a linear pair with interface ``u = R u_s + Q x_s + K(x − P x_s)`` and
``P A_s = A P + B Q`` the error ``e = x − P x_s`` evolves as

    e' = (A + BK) e + (B_w − P B_ws) w + (B R − P B_s) u_s

when both models are driven by the same noise ``w``.  A relation
``{eᵀ M e <= ε²}`` is then an ε,δ-simulation if it is invariant for all
``wᵀw <= c_w`` and ``u_sᵀu_s <= c1``, where ``c_w`` is the ``1 − δ``
quantile of ``wᵀw``.  Two certificates of that invariance are provided:
a closed-form triangle-inequality bound and a multiplier (S-procedure)
search that is never worse.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .coupling import gaussian_ball_exceedance, isotropic_ball_bound
from .linalg import (DEFAULT_TOL, Tolerances, UnstableError, chi_square_inv, solve_dare,
                     solve_discrete_lyapunov, solve_sylvester_ls, spectral_radius)
from .models import GaussianLtiGmdp, model_to_dict
from .reduction import ReducedModel
from .rng import generator

__all__ = [
    "LtiPair", "LtiInterface", "CancellingInterface", "IdentityInterface", "ComposedInterface",
    "QuadraticRelation", "BallRelation", "FiniteRelation", "ComposedRelation",
    "SimRelCertificate", "TradeoffCurve", "CertifyResult", "NotContractiveError",
    "synthesize_interface", "default_relation_matrix", "m_norm_gains",
    "tradeoff_normbound", "tradeoff_sprocedure", "certify_by_sampling",
    "analytic_shared_noise_relation", "compose_transitive", "gamma_horizon",
    "case1_exact_cancel_tradeoff", "reference_deltas",
]


class NotContractiveError(ValueError):
    """The error dynamics are not contractive in the chosen M-norm."""


def reference_deltas() -> np.ndarray:
    """The ten logarithmically spaced δ values ``10^{-j/3}``, ``j = 0..9``."""
    return 10.0 ** (-np.arange(10) / 3.0)


# ------------------------------------------------------------- interfaces

@dataclass(frozen=True, eq=False)
class LtiInterface:
    """``u = R u_s + Q x_s + K (x − P x_s)``."""

    R: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        for name in ("R", "Q", "K", "P"):
            a = np.atleast_2d(np.array(getattr(self, name), dtype=float))
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        m = self.K.shape[0]
        if self.R.shape[0] != m or self.Q.shape[0] != m or self.Q.shape[1] != self.P.shape[1] \
                or self.K.shape[1] != self.P.shape[0]:
            raise ValueError("interface gains have inconsistent dimensions")

    def apply(self, u_s, x_s, x) -> np.ndarray:
        """Concrete input; accepts single points or batches (leading axes)."""
        u_s, x_s, x = (np.asarray(v, float) for v in (u_s, x_s, x))
        return u_s @ self.R.T + x_s @ self.Q.T + (x - x_s @ self.P.T) @ self.K.T

    __call__ = apply


@dataclass(frozen=True, eq=False)
class CancellingInterface:
    """``u = ũ + B̃⁻¹ (Ã x̃ − Ā x)`` with ``Ā = S A``.

    Cancels the deterministic mismatch between the abstract prediction
    ``Ã x̃ + B̃ ũ`` and the projected concrete prediction ``S(Ax + Bu)``
    whenever ``S B = B̃``.
    """

    B_abs_inv: np.ndarray
    A_abs: np.ndarray
    A_bar: np.ndarray

    @classmethod
    def for_pair(cls, concrete: GaussianLtiGmdp, abstract: GaussianLtiGmdp, S) -> "CancellingInterface":
        S = np.atleast_2d(np.asarray(S, float))
        return cls(np.linalg.inv(abstract.B), abstract.A, S @ concrete.A)

    def apply(self, u_s, x_s, x) -> np.ndarray:
        u_s, x_s, x = (np.asarray(v, float) for v in (u_s, x_s, x))
        return u_s + (x_s @ self.A_abs.T - x @ self.A_bar.T) @ self.B_abs_inv.T

    __call__ = apply


class IdentityInterface:
    """``u_concrete = u_abstract``."""

    def apply(self, u_s, x_s, x):
        return np.asarray(u_s, float) if not isinstance(u_s, (int, np.integer)) else u_s

    __call__ = apply


@dataclass(frozen=True, eq=False)
class ComposedInterface:
    """Composition of two interfaces through the middle model's state.

    ``apply(u1, x1, x2, x3) = second(first(u1, x1, x2), x2, x3)``.
    """

    first: Any
    second: Any

    def apply(self, u1, x1, x2, x3):
        return self.second(self.first(u1, x1, x2), x2, x3)

    __call__ = apply


# -------------------------------------------------------------- relations

@dataclass(frozen=True, eq=False)
class QuadraticRelation:
    """``{(x_s, x) : (x − P x_s)ᵀ M (x − P x_s) <= ε²}``.

    Membership arguments are ordered ``(abstract, concrete)``.
    """

    M: np.ndarray
    P: np.ndarray
    epsilon: float

    def __post_init__(self):
        M = np.atleast_2d(np.array(self.M, dtype=float))
        if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
            raise ValueError("relation matrix M must be symmetric")
        M = 0.5 * (M + M.T)
        if np.linalg.eigvalsh(M)[0] <= 0:
            raise ValueError("relation matrix M must be positive definite")
        P = np.atleast_2d(np.array(self.P, dtype=float))
        for a in (M, P):
            a.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    def output_dominance_gap(self, C) -> float:
        """Smallest eigenvalue of ``M − CᵀC``; must be ``>= 0`` so that
        related states have outputs within ε."""
        C = np.atleast_2d(np.asarray(C, float))
        return float(np.linalg.eigvalsh(self.M - C.T @ C)[0])

    def form(self, x_s, x) -> np.ndarray:
        e = np.asarray(x, float) - np.asarray(x_s, float) @ self.P.T
        return np.einsum("...i,ij,...j->...", e, self.M, e)

    def contains(self, x_s, x) -> np.ndarray:
        return self.form(x_s, x) <= self.epsilon ** 2

    def reset(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Abstract state minimizing the form for concrete ``x``.

        Returns ``(x_s, form_value)``; the pair is related iff
        ``form_value <= ε²``.
        """
        PtM = self.P.T @ self.M
        G = PtM @ self.P
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError("PᵀMP is singular")
        x_s = np.linalg.solve(G, PtM @ np.asarray(x, float).T).T
        return x_s, self.form(x_s, x)


@dataclass(frozen=True, eq=False)
class BallRelation:
    """``{(x_s, x) : ‖S x − x_s‖ <= radius}``; ``S = I`` by default."""

    radius: float
    S: Optional[np.ndarray] = None

    def _proj(self, x):
        x = np.asarray(x, float)
        return x if self.S is None else x @ np.asarray(self.S, float).T

    def form(self, x_s, x) -> np.ndarray:
        d = self._proj(x) - np.asarray(x_s, float)
        return np.einsum("...i,...i->...", d, d)

    def contains(self, x_s, x) -> np.ndarray:
        return self.form(x_s, x) <= self.radius ** 2

    def reset(self, x):
        x_s = self._proj(x)
        return x_s, self.form(x_s, x)


@dataclass(frozen=True, eq=False)
class FiniteRelation:
    """Boolean mask ``mask[x1, x2]`` on finite state spaces."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    def contains(self, x1, x2) -> bool:
        return bool(self.mask[int(x1), int(x2)])

    def compose(self, other: "FiniteRelation") -> "FiniteRelation":
        return FiniteRelation((self.mask.astype(int) @ other.mask.astype(int)) > 0)


@dataclass(frozen=True, eq=False)
class ComposedRelation:
    """Relational product of two continuous relations.

    Membership needs a witness state of the middle model.
    """

    first: Any
    second: Any

    def contains(self, x1, x3, via) -> bool:
        return bool(self.first.contains(x1, via)) and bool(self.second.contains(via, x3))


# ----------------------------------------------------------- certificates

@dataclass(frozen=True, eq=False)
class SimRelCertificate:
    """An ε,δ-simulation certificate.

    ``abstract`` and ``concrete`` optionally reference the models the
    certificate is about; composition checks them.
    """

    relation: Any
    interface: Any
    delta: float
    epsilon: float
    noise_dof: Optional[int] = None
    c1: Optional[float] = None
    provenance: str = "analytic"
    abstract: Any = None
    concrete: Any = None

    def __post_init__(self):
        if not (0.0 <= self.delta <= 1.0):
            raise ValueError("delta must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def to_dict(self) -> dict:
        """JSON form ``{M, P, R, Q, K, epsilon, delta, c1, dof, provenance}``
        (quadratic relation with linear interface only)."""
        if not isinstance(self.relation, QuadraticRelation) or not isinstance(self.interface, LtiInterface):
            raise TypeError("only quadratic relations with linear interfaces serialize")
        return {"M": self.relation.M.tolist(), "P": self.interface.P.tolist(),
                "R": self.interface.R.tolist(), "Q": self.interface.Q.tolist(),
                "K": self.interface.K.tolist(), "epsilon": self.epsilon, "delta": self.delta,
                "c1": self.c1, "dof": self.noise_dof, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict, abstract=None, concrete=None) -> "SimRelCertificate":
        interface = LtiInterface(d["R"], d["Q"], d["K"], d["P"])
        relation = QuadraticRelation(d["M"], d["P"], d["epsilon"])
        return cls(relation, interface, float(d["delta"]), float(d["epsilon"]), d.get("dof"),
                   d.get("c1"), d.get("provenance", "normbound"), abstract, concrete)


@dataclass(frozen=True)
class TradeoffCurve:
    """Pairs ``(δ, ε)`` sorted by ascending δ."""

    deltas: np.ndarray
    epsilons: np.ndarray
    method: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = np.asarray(self.deltas, float).reshape(-1)
        e = np.asarray(self.epsilons, float).reshape(-1)
        if d.shape != e.shape:
            raise ValueError("deltas and epsilons differ in length")
        order = np.lexsort((-e, d))
        object.__setattr__(self, "deltas", d[order])
        object.__setattr__(self, "epsilons", e[order])

    def is_monotone(self, rtol: float = 1e-9) -> bool:
        """ε non-increasing in δ."""
        e = self.epsilons
        return bool(np.all(e[1:] <= e[:-1] * (1 + rtol) + 1e-15))

    def epsilon_at(self, delta: float) -> float:
        i = int(np.argmin(np.abs(self.deltas - delta)))
        if not math.isclose(self.deltas[i], delta, rel_tol=1e-9, abs_tol=1e-15):
            raise KeyError(f"delta {delta} not on the curve")
        return float(self.epsilons[i])

    def delta_at(self, epsilon: float) -> float:
        i = int(np.argmin(np.abs(self.epsilons - epsilon)))
        if not math.isclose(self.epsilons[i], epsilon, rel_tol=1e-9, abs_tol=1e-15):
            raise KeyError(f"epsilon {epsilon} not on the curve")
        return float(self.deltas[i])

    def to_csv(self, provenance: Optional[dict] = None) -> str:
        buf = io.StringIO()
        for k in sorted(provenance or {}):
            buf.write(f"#{k}={provenance[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta", "epsilon"])
        for d, e in zip(self.deltas, self.epsilons):
            w.writerow([repr(float(d)), repr(float(e))])
        return buf.getvalue()


# ------------------------------------------------------------- LTI pairs

@dataclass(frozen=True, eq=False)
class LtiPair:
    """Abstract model ``(A_s, B_s, B_ws, C_s)`` and concrete ``(A, B, B_w, C)``."""

    concrete: GaussianLtiGmdp
    abstract: GaussianLtiGmdp

    def error_matrices(self, interface: LtiInterface) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(A + BK, B_w − P B_ws, B R − P B_s)``."""
        c, a = self.concrete, self.abstract
        Acl = c.A + c.B @ interface.K
        Ew = c.Bw - interface.P @ a.Bw
        Eu = c.B @ interface.R - interface.P @ a.B
        return Acl, Ew, Eu

    def sylvester_residual(self, interface: LtiInterface) -> tuple[float, float]:
        """``(‖P A_s − A P − B Q‖_∞, ‖C P − C_s‖_∞)`` (max-abs entries)."""
        c, a, I = self.concrete, self.abstract, interface
        r1 = I.P @ a.A - c.A @ I.P - c.B @ I.Q
        r2 = c.C @ I.P - a.C
        return float(np.abs(r1).max()), float(np.abs(r2).max())


def synthesize_interface(concrete: GaussianLtiGmdp, reduced, k_gain=None, lam: float = 1e-6,
                         r_u: float = 0.02, tol: Tolerances = DEFAULT_TOL) -> LtiInterface:
    """Interface gains for a concrete model and its abstraction.

    ``P, Q, R`` solve the constrained Sylvester problem; ``K`` is the
    supplied gain or the LQR gain with ``Qc = CᵀC + λI`` and
    ``Rc = r_u I``.

    Raises
    ------
    SolverError
        If the Sylvester constraints are infeasible.
    UnstableError
        If ``A + BK`` is not stable.
    """
    a = reduced.model if isinstance(reduced, ReducedModel) else reduced
    c = concrete
    P, Q, R = solve_sylvester_ls(c.A, c.B, a.A, c.C, a.C, c.Bw, a.Bw, a.B, tol)
    if k_gain is None:
        _, K = solve_dare(c.A, c.B, c.C.T @ c.C + lam * np.eye(c.n), r_u * np.eye(c.m), tol)
    else:
        K = np.atleast_2d(np.asarray(k_gain, float)).reshape(c.m, c.n)
    if spectral_radius(c.A + c.B @ K) >= 1.0:
        raise UnstableError("A + BK is not stable")
    return LtiInterface(R, Q, K, P)


def default_relation_matrix(A, B, K, C, lam: float = 1e-6, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """``M`` solving ``(A+BK)ᵀ M (A+BK) − M = −(CᵀC + λI)``."""
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    Acl = A + np.asarray(B, float).reshape(n, -1) @ np.atleast_2d(np.asarray(K, float))
    C = np.atleast_2d(np.asarray(C, float)).reshape(-1, n)
    try:
        return solve_discrete_lyapunov(Acl.T, C.T @ C + lam * np.eye(n), tol)
    except UnstableError as exc:
        raise UnstableError("A + BK is unstable; no relation matrix") from exc


def _m_factor(M) -> np.ndarray:
    """Upper factor ``L`` with ``LᵀL = M``."""
    return np.linalg.cholesky(0.5 * (M + M.T)).T


def m_norm_gains(pair: LtiPair, interface: LtiInterface, M) -> dict:
    """M-norm induced gains ``α, β, ρ`` of the error dynamics.

    In coordinates ``z = L e`` with ``LᵀL = M`` the gains are the spectral
    norms of ``L (A+BK) L⁻¹``, ``L (B_w − P B_ws)`` and ``L (B R − P B_s)``.
    """
    M = np.atleast_2d(np.asarray(M, float))
    L = _m_factor(M)
    Acl, Ew, Eu = pair.error_matrices(interface)
    Ab = L @ Acl @ np.linalg.inv(L)
    bw, bu = L @ Ew, L @ Eu
    nrm = lambda X: float(np.linalg.norm(X, 2)) if X.size else 0.0
    return {"alpha": nrm(Ab), "beta": nrm(bw), "rho": nrm(bu), "L": L, "Ab": Ab, "bw": bw, "bu": bu}


def _cw(k: int, delta: float) -> float:
    """Noise radius ``c_w`` with ``P(χ²_k > c_w) = δ`` (infinite at δ = 0)."""
    if delta <= 0.0:
        return math.inf
    return chi_square_inv(k, 1.0 - delta) if delta < 1.0 else 0.0


def tradeoff_normbound(pair: LtiPair, interface: LtiInterface, M, delta_grid, c1: float = 0.04,
                       noise_dof: Optional[int] = None) -> TradeoffCurve:
    """Closed-form ε(δ) from the triangle inequality in the M-norm.

    ``ε(δ) = (β √c_w + ρ √c1) / (1 − α)`` with ``c_w`` the ``1 − δ``
    quantile of ``χ²_k``; ``k`` defaults to the noise dimension.

    Raises
    ------
    NotContractiveError
        If ``α >= 1``.
    """
    g = m_norm_gains(pair, interface, M)
    k = pair.concrete.k if noise_dof is None else int(noise_dof)
    if g["alpha"] >= 1.0:
        raise NotContractiveError("relation not contractive; adjust K or M "
                                  f"(M-norm gain of A+BK is {g['alpha']:.4f})")
    deltas = np.asarray(delta_grid, float).reshape(-1)
    eps = [(g["beta"] * math.sqrt(_cw(k, d)) + g["rho"] * math.sqrt(c1)) / (1.0 - g["alpha"])
           for d in deltas]
    return TradeoffCurve(deltas, np.array(eps), "normbound",
                         {"alpha": g["alpha"], "beta": g["beta"], "rho": g["rho"], "dof": k, "c1": c1})


# -------------------------------------------------- S-procedure search

def _golden(f, lo, hi, iters=60):
    """Golden-section minimization of a unimodal function on [lo, hi]."""
    phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _grid_then_golden(f, lo, hi, n_grid=40, iters=50):
    """Minimize ``f`` on ``[lo, hi]``: coarse grid, then golden section on
    the bracket around the best grid point."""
    xs = np.linspace(lo, hi, n_grid)
    vals = np.array([f(x) for x in xs])
    i = int(np.argmin(vals))
    a, b = xs[max(i - 1, 0)], xs[min(i + 1, n_grid - 1)]
    x, v = _golden(f, a, b, iters)
    if vals[i] < v:
        return xs[i], vals[i]
    return x, v


class _SProcedure:
    """Multiplier search for the invariance of ``{‖z‖ <= ε}`` under
    ``z' = Ab z + bw w + bu u`` with ``‖w‖² <= c_w``, ``‖u‖² <= c1``.

    The S-procedure certificate asks for ``τ1, τ2, τ3 >= 0`` with

        [Ab bw bu]ᵀ [Ab bw bu] ⪯ diag(τ1 I, τ2 I, τ3 I),
        τ1 ε² + τ2 c_w + τ3 c1 <= ε².

    By a Schur complement the matrix inequality is
    ``Ab Abᵀ/τ1 + bw bwᵀ/τ2 + bu buᵀ/τ3 ⪯ I``, so for fixed ``τ1, τ3`` the
    least ``τ2`` is ``λ_max(bwᵀ T⁻¹ bw)`` with
    ``T = I − Ab Abᵀ/τ1 − bu buᵀ/τ3``, and the least admissible radius is
    ``ε² = (τ2 c_w + τ3 c1)/(1 − τ1)``.  The inner objective is convex in
    ``τ3`` and the outer one unimodal in ``τ1``; both are searched on a
    grid followed by golden-section refinement.
    """

    def __init__(self, Ab, bw, bu):
        self.Ab, self.bw, self.bu = Ab, bw, bu
        n = Ab.shape[0]
        self.I = np.eye(n)
        self.AA = Ab @ Ab.T
        self.a2 = float(np.linalg.eigvalsh(self.AA)[-1]) if n else 0.0
        self.has_w = bw.size > 0 and np.abs(bw).max() > 0
        self.has_u = bu.size > 0 and np.abs(bu).max() > 0
        self.has_a = self.a2 > 0

    def _tau2(self, T) -> float:
        if not self.has_w:
            return 0.0
        try:
            X = np.linalg.solve(T, self.bw)
        except np.linalg.LinAlgError:
            return math.inf
        return float(np.linalg.eigvalsh(0.5 * (self.bw.T @ X + X.T @ self.bw))[-1])

    def _S(self, tau1):
        return self.I - (self.AA / tau1 if self.has_a else 0.0)

    def _tau3_min(self, S) -> float:
        if not self.has_u:
            return 0.0
        X = np.linalg.solve(S, self.bu)
        return float(np.linalg.eigvalsh(0.5 * (self.bu.T @ X + X.T @ self.bu))[-1])

    def _pd(self, T) -> bool:
        try:
            np.linalg.cholesky(T)
            return True
        except np.linalg.LinAlgError:
            return False

    def eps2(self, tau1, tau3, cw, c1) -> float:
        S = self._S(tau1)
        T = S - (self.bu @ self.bu.T / tau3 if self.has_u else 0.0)
        if not self._pd(T):
            return math.inf
        tau2 = self._tau2(T)
        return (tau2 * cw + (tau3 * c1 if self.has_u else 0.0)) / (1.0 - tau1)

    def inner(self, tau1, cw, c1) -> tuple[float, float]:
        S = self._S(tau1)
        if not self._pd(S):
            return math.inf, math.nan
        if not self.has_u:
            return self.eps2(tau1, 1.0, cw, c1), 0.0
        t3min = self._tau3_min(S)
        f = lambda s: self.eps2(tau1, t3min * (1.0 + 10.0 ** s), cw, c1)
        s, v = _grid_then_golden(f, -8.0, 6.0, 36, 50)
        return v, t3min * (1.0 + 10.0 ** s)

    def solve(self, cw, c1) -> tuple[float, tuple[float, float, float]]:
        lo = self.a2
        if lo >= 1.0:
            return math.inf, (math.nan,) * 3
        if not self.has_a:
            g = lambda s: self.inner(10.0 ** s, cw, c1)[0]
            s, v = _grid_then_golden(g, -12.0, -1e-12, 40, 50)
            tau1 = 10.0 ** s
        else:
            # τ1 = a² + (1 − a²)·σ with σ on a log scale
            g = lambda s: self.inner(lo + (1.0 - lo) * 10.0 ** s, cw, c1)[0]
            s, v = _grid_then_golden(g, -10.0, -1e-9, 40, 50)
            tau1 = lo + (1.0 - lo) * 10.0 ** s
        _, tau3 = self.inner(tau1, cw, c1)
        S = self._S(tau1)
        T = S - (self.bu @ self.bu.T / tau3 if self.has_u else 0.0)
        tau2 = self._tau2(T) if self._pd(T) else math.inf
        return v, (tau1, tau2, tau3 if self.has_u else 0.0)

    def assembled_min_eig(self, taus) -> float:
        """Minimum eigenvalue of ``diag(τ1 I, τ2 I, τ3 I) − GᵀG``."""
        G = np.hstack([self.Ab, self.bw, self.bu])
        D = np.concatenate([np.full(self.Ab.shape[1], taus[0]), np.full(self.bw.shape[1], taus[1]),
                            np.full(self.bu.shape[1], taus[2])])
        return float(np.linalg.eigvalsh(np.diag(D) - G.T @ G)[0])


def tradeoff_sprocedure(pair: LtiPair, interface: LtiInterface, M, delta_grid, c1: float = 0.04,
                        noise_dof: Optional[int] = None) -> TradeoffCurve:
    """ε(δ) from the multiplier search; never larger than the norm bound.

    For each δ the returned ε is the least radius certified by the best
    multipliers found.  The final multipliers are re-checked on the
    assembled matrix inequality (minimum eigenvalue ``>= −1e-9``); when
    this check fails, or when the norm bound is smaller, the norm-bound
    value is returned for that δ.
    """
    nb = tradeoff_normbound(pair, interface, M, delta_grid, c1, noise_dof)
    g = m_norm_gains(pair, interface, M)
    sp = _SProcedure(g["Ab"], g["bw"], g["bu"])
    # c_w = 0 forces w = 0: drop the noise block instead of letting τ2 → ∞
    sp0 = _SProcedure(g["Ab"], g["bw"][:, :0], g["bu"])
    k = nb.meta["dof"]
    out, taus_all, source = [], [], []
    for d, e_nb in zip(nb.deltas, nb.epsilons):
        cw = _cw(k, d)
        solver = sp0 if cw == 0.0 else sp
        v, taus = solver.solve(cw, c1)
        ok = math.isfinite(v) and all(math.isfinite(t) for t in taus)
        if ok:
            # the smallest τ2 makes the inequality tight; pad it so the
            # assembled matrix passes the PSD check robustly
            taus = (taus[0], taus[1] * (1 + 1e-9) + 1e-15, taus[2])
            v = (taus[1] * cw + taus[2] * c1) / (1.0 - taus[0])
            ok = solver.assembled_min_eig(taus) >= -1e-9
        eps = math.sqrt(v) if ok else math.inf
        if eps <= e_nb:
            out.append(eps)
            source.append("sprocedure")
        else:
            out.append(e_nb)
            source.append("normbound")
        taus_all.append(taus if ok else (math.nan,) * 3)
    # a radius certified at δ' also holds at every δ > δ' (smaller noise
    # ellipsoid); carrying it forward makes the curve non-increasing
    for i in range(1, len(out)):
        if out[i - 1] < out[i]:
            out[i], taus_all[i] = out[i - 1], taus_all[i - 1]
            source[i] = source[i - 1] + f"@delta={nb.deltas[i - 1]:.6g}" \
                if "@" not in source[i - 1] else source[i - 1]
    meta = dict(nb.meta)
    meta.update({"multipliers": taus_all, "source": source})
    return TradeoffCurve(nb.deltas, np.array(out), "sprocedure", meta)


# ------------------------------------------------------------ falsifier

@dataclass(frozen=True)
class CertifyResult:
    ok: bool
    counterexample: Optional[dict]
    max_ratio: float
    samples: int


def _sphere(rng, n, size):
    if n == 0:
        return np.zeros((size, 0))
    v = rng.standard_normal((size, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def certify_by_sampling(certificate: SimRelCertificate, pair: LtiPair, interface: LtiInterface,
                        n_samples: int = 100_000, seed: int = 0, batch: int = 50_000) -> CertifyResult:
    """Search for a violation of one-step invariance by boundary sampling.

    ``e`` is drawn on the boundary of the ε-ellipsoid, ``w`` on the sphere
    ``wᵀw = c_w`` and ``u_s`` on ``u_sᵀu_s = c1``; since the one-step error
    is convex in ``(e, w, u_s)``, its maximum over the constraint set sits
    on these boundaries.  ``ok`` is evidence, not proof.

    Returns
    -------
    CertifyResult
        ``max_ratio`` is the largest sampled ``e'ᵀMe' / ε²``.
    """
    rel = certificate.relation
    M = rel.M
    eps = certificate.epsilon
    k = certificate.noise_dof if certificate.noise_dof is not None else pair.concrete.k
    Acl, Ew, Eu = pair.error_matrices(interface)
    # without a noise channel the noise radius is irrelevant
    cw = _cw(k, certificate.delta) if Ew.shape[1] and np.abs(Ew).max() > 0 else 0.0
    c1 = certificate.c1 if certificate.c1 is not None else 0.0
    L = _m_factor(M)
    Linv = np.linalg.inv(L)
    rng = generator(seed, 0xCE27)
    n = Acl.shape[0]
    worst, cex, done = 0.0, None, 0
    thresh = eps ** 2
    while done < n_samples:
        b = min(batch, n_samples - done)
        e = eps * _sphere(rng, n, b) @ Linv.T
        w = math.sqrt(cw) * _sphere(rng, Ew.shape[1], b)
        u = math.sqrt(c1) * _sphere(rng, Eu.shape[1], b)
        z = (e @ Acl.T + w @ Ew.T + u @ Eu.T) @ L.T
        val = np.einsum("ij,ij->i", z, z)
        i = int(np.argmax(val))
        ratio = val[i] / thresh if thresh > 0 else (math.inf if val[i] > 1e-24 else 0.0)
        if ratio > worst:
            worst = float(ratio)
            if val[i] > thresh * (1 + 1e-9) + 1e-24:
                cex = {"e": e[i], "w": w[i], "u_s": u[i], "form": float(val[i]), "epsilon2": thresh}
        done += b
    return CertifyResult(cex is None, cex, worst, done)


# ------------------------------------------------------ analytic cases

def analytic_shared_noise_relation(L: float, H: float, c: float) -> SimRelCertificate:
    """Certificate for two models ``x' = f(x,u) + g_i(ω)`` with shared noise.

    If ``f`` is ``L``-Lipschitz in ``x`` with ``L < 1``, the output map is
    ``H``-Lipschitz and ``‖g_1(ω) − g_2(ω)‖ <= c``, then the ball of radius
    ``c/(1−L)`` around the diagonal is invariant, giving ``δ = 0`` and
    ``ε = H c/(1−L)``.
    """
    if not (0 < L < 1):
        raise ValueError("the Lipschitz constant L must satisfy 0 < L < 1")
    if H <= 0 or c < 0:
        raise ValueError("need H > 0 and c >= 0")
    radius = c / (1.0 - L)
    return SimRelCertificate(BallRelation(radius), IdentityInterface(), 0.0, H * radius,
                             provenance="analytic")


def _same_model(a, b) -> bool:
    if a is b:
        return True
    try:
        da, db = model_to_dict(a), model_to_dict(b)
    except TypeError:
        return False
    return _deep_equal(da, db)


def _deep_equal(x, y) -> bool:
    if isinstance(x, dict):
        return isinstance(y, dict) and x.keys() == y.keys() and all(_deep_equal(x[k], y[k]) for k in x)
    if isinstance(x, (list, tuple)):
        return isinstance(y, (list, tuple)) and len(x) == len(y) and all(_deep_equal(a, b) for a, b in zip(x, y))
    return x == y


def compose_transitive(cert12: SimRelCertificate, cert23: SimRelCertificate) -> SimRelCertificate:
    """Chain ``M1 ⪯ M2`` and ``M2 ⪯ M3`` into ``M1 ⪯ M3``.

    ``ε`` and ``δ`` add (``δ`` capped at 1); the interface is the function
    composition and the relation the relational product.

    Raises
    ------
    ValueError
        If both certificates name the middle model and they differ.
    """
    if cert12.concrete is not None and cert23.abstract is not None \
            and not _same_model(cert12.concrete, cert23.abstract):
        raise ValueError("middle models differ: cannot compose certificates")
    if isinstance(cert12.relation, FiniteRelation) and isinstance(cert23.relation, FiniteRelation):
        relation = cert12.relation.compose(cert23.relation)
    else:
        relation = ComposedRelation(cert12.relation, cert23.relation)
    dofs = [d for d in (cert12.noise_dof, cert23.noise_dof) if d is not None]
    return SimRelCertificate(relation, ComposedInterface(cert12.interface, cert23.interface),
                             min(1.0, cert12.delta + cert23.delta), cert12.epsilon + cert23.epsilon,
                             max(dofs) if dofs else None, cert12.c1, "composed",
                             cert12.abstract, cert23.concrete)


def gamma_horizon(delta: float, N: int, steps: bool = False) -> float:
    """``γ = 1 − (1 − δ)^{N+1}``, or ``1 − (1 − δ)^N`` with ``steps=True``
    (exponent equal to the number of kernel applications, used when the
    initial lifting is exact)."""
    if not (0.0 <= delta <= 1.0):
        raise ValueError("delta must lie in [0, 1]")
    if N < 0:
        raise ValueError("horizon must be non-negative")
    expo = N if steps else N + 1
    return float(-math.expm1(expo * math.log1p(-delta))) if delta < 1 else (1.0 if expo > 0 else 0.0)


def case1_exact_cancel_tradeoff(concrete: GaussianLtiGmdp, abstract: GaussianLtiGmdp, epsilon_grid,
                                S=None, method: str = "isotropic") -> TradeoffCurve:
    """Trade-off for a pair whose interface cancels the deterministic mismatch.

    With ``S`` mapping concrete states to abstract coordinates (default:
    the concrete output map) and the interface ``ũ + B̃⁻¹(Ã x̃ − S A x)``,
    the one-step output error is ``G w`` with ``G = S B_w``.  Then
    ``δ(ε) = P(‖G w‖ > ε)``.

    Parameters
    ----------
    method : {"isotropic", "exact"}
        ``"exact"`` evaluates the Gaussian tail exactly; ``"isotropic"``
        uses the dominating isotropic bound ``P(χ²_r > ε²/λ_max(GGᵀ))``,
        which is the sound but looser value quoted for the thermal case.

    Raises
    ------
    ValueError
        If ``S B ≠ B̃`` (cancellation residual above 1e-9).
    """
    S = concrete.C if S is None else np.atleast_2d(np.asarray(S, float))
    resid = float(np.abs(S @ concrete.B - abstract.B).max())
    if resid > 1e-9:
        raise ValueError(f"interface does not cancel the mismatch (residual {resid:.3e})")
    G = S @ concrete.Bw
    cov = G @ G.T
    tail = {"exact": gaussian_ball_exceedance, "isotropic": isotropic_ball_bound}[method]
    eps = np.asarray(epsilon_grid, float).reshape(-1)
    deltas = np.array([tail(cov, e) for e in eps])
    return TradeoffCurve(deltas, eps, f"cancel-{method}", {"G": G, "cov": cov})
