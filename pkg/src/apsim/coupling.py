"""Liftings of finite distributions and closed-form Gaussian lifting errors.

The minimal-δ lifting problem

    minimize   Σ_{(i,j) ∉ R} W_ij
    subject to Σ_j W_ij = Δ_i,  Σ_i W_ij = Θ_j,  W ≥ 0

has 0/1 costs, so its optimum is ``1 − F*`` where ``F*`` is the maximum
flow through the bipartite network source → i → j → sink with capacities
``Δ_i`` on the source arcs, ``Θ_j`` on the sink arcs and unbounded arcs for
related pairs.  The flow fills the related entries of ``W``; the unmatched
marginal mass is then coupled independently, and by maximality of the flow
that product never touches a related pair.
"""
from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .models import Box

__all__ = [
    "CouplingMatrix", "EquivalencePartition", "UnsupportedRegionError",
    "min_delta_lifting", "check_lifting", "gamma_coupling", "quotient_tv",
    "total_variation", "gaussian_ball_exceedance", "isotropic_ball_bound",
    "truncation_delta",
]

_PROB_TOL = 1e-9
_FLOW_EPS = 1e-15


class UnsupportedRegionError(ValueError):
    """Region type not supported by a closed-form lifting computation."""


@dataclass(frozen=True, eq=False)
class CouplingMatrix:
    """A coupling ``W`` of two finite distributions and its off-relation mass.

    Attributes
    ----------
    W : ndarray, shape (n1, n2)
    delta : float
        Mass of ``W`` outside ``relation``.
    relation : ndarray of bool, shape (n1, n2)
    """

    W: np.ndarray
    delta: float
    relation: np.ndarray

    def conditional_left(self, j: int) -> np.ndarray:
        """Law of the left coordinate given the right one equals ``j``."""
        col = self.W[:, j]
        s = col.sum()
        if s <= 0:
            raise ValueError(f"right state {j} has zero mass under the coupling")
        return col / s


def _as_prob(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < -_PROB_TOL) \
            or abs(p.sum() - 1.0) > _PROB_TOL:
        raise ValueError(f"{name} is not a probability vector")
    return np.clip(p, 0.0, None)


def total_variation(p, q) -> float:
    """``sup_A |p(A) − q(A)|`` for two vectors on a common index set."""
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


def _max_flow_bipartite(a: np.ndarray, b: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path maximum flow on the lifting network.

    Returns the flow on the related arcs as an ``(n1, n2)`` matrix.  BFS
    visits nodes in index order, which fixes the returned optimal coupling
    among ties.
    """
    n1, n2 = R.shape
    src, snk = n1 + n2, n1 + n2 + 1
    nn = n1 + n2 + 2
    cap = np.zeros((nn, nn))
    cap[src, :n1] = a
    cap[n1:n1 + n2, snk] = b
    big = 2.0
    cap[:n1, n1:n1 + n2] = np.where(R, big, 0.0)
    flow = np.zeros((nn, nn))
    adj = [np.flatnonzero((cap[u] > 0) | (cap[:, u] > 0)) for u in range(nn)]
    while True:
        resid = cap - flow
        parent = np.full(nn, -1)
        parent[src] = src
        q = deque([src])
        while q and parent[snk] < 0:
            u = q.popleft()
            for v in adj[u]:
                if parent[v] < 0 and resid[u, v] > _FLOW_EPS:
                    parent[v] = u
                    q.append(v)
        if parent[snk] < 0:
            break
        v, bott = snk, np.inf
        while v != src:
            u = parent[v]
            bott = min(bott, resid[u, v])
            v = u
        v = snk
        while v != src:
            u = parent[v]
            flow[u, v] += bott
            flow[v, u] -= bott
            v = u
    return np.clip(flow[:n1, n1:n1 + n2], 0.0, None)


def min_delta_lifting(Delta, Theta, R) -> CouplingMatrix:
    """Coupling of ``Delta`` and ``Theta`` with least mass outside ``R``.

    Parameters
    ----------
    Delta, Theta : array_like
        Probability vectors of lengths ``n1`` and ``n2``.
    R : array_like of bool, shape (n1, n2)
        Relation mask.

    Returns
    -------
    CouplingMatrix
        ``delta`` is the global optimum of the transport problem, so a
        δ-lifting exists exactly when ``δ >= delta``.
    """
    a = _as_prob(Delta, "Delta")
    b = _as_prob(Theta, "Theta")
    R = np.asarray(R, dtype=bool)
    if R.shape != (a.size, b.size):
        raise ValueError(f"relation shape {R.shape} does not match ({a.size}, {b.size})")
    Wr = _max_flow_bipartite(a, b, R)
    ra = np.clip(a - Wr.sum(axis=1), 0.0, None)
    rb = np.clip(b - Wr.sum(axis=0), 0.0, None)
    mass = 0.5 * (ra.sum() + rb.sum())
    W = Wr.copy()
    if mass > 0:
        W += np.outer(ra, rb) / mass
    delta = float(W[~R].sum())
    return CouplingMatrix(W, min(max(delta, 0.0), 1.0), R)


def check_lifting(candidate, Delta, Theta, R, delta: float, tol: float = 1e-9) -> tuple[bool, list[str]]:
    """Check the three δ-lifting conditions for a candidate coupling.

    Returns
    -------
    ok : bool
    report : list of str
        One line per violated condition, naming rows/columns.
    """
    W = np.asarray(candidate.W if isinstance(candidate, CouplingMatrix) else candidate, float)
    Delta = np.asarray(Delta, float).reshape(-1)
    Theta = np.asarray(Theta, float).reshape(-1)
    R = np.asarray(R, bool)
    report: list[str] = []
    if W.shape != (Delta.size, Theta.size) or R.shape != W.shape:
        return False, [f"dimension mismatch: W {W.shape}, Delta {Delta.size}, Theta {Theta.size}, R {R.shape}"]
    neg = np.argwhere(W < -tol)
    for i, j in neg:
        report.append(f"negative entry W[{i},{j}] = {W[i, j]:.3e}")
    for i in np.flatnonzero(np.abs(W.sum(axis=1) - Delta) > tol):
        report.append(f"row {i} sums to {W[i].sum():.12g}, left marginal is {Delta[i]:.12g}")
    for j in np.flatnonzero(np.abs(W.sum(axis=0) - Theta) > tol):
        report.append(f"column {j} sums to {W[:, j].sum():.12g}, right marginal is {Theta[j]:.12g}")
    off = float(W[~R].sum())
    if off > delta + tol:
        report.append(f"off-relation mass {off:.12g} exceeds delta {delta:.12g}")
    return not report, report


def gamma_coupling(nu, nu_t) -> CouplingMatrix:
    """Maximal coupling: common mass on the diagonal plus the normalized
    product of the positive and negative parts of ``nu − nu_t``."""
    a = _as_prob(nu, "nu")
    b = _as_prob(nu_t, "nu_t")
    if a.size != b.size:
        raise ValueError("gamma coupling needs a common index set")
    common = np.minimum(a, b)
    pos = np.clip(a - b, 0.0, None)
    neg = np.clip(b - a, 0.0, None)
    tv = 0.5 * (pos.sum() + neg.sum())
    W = np.diag(common)
    if tv > 0:
        W = W + np.outer(pos, neg) / tv
    R = np.eye(a.size, dtype=bool)
    return CouplingMatrix(W, float(W[~R].sum()), R)


@dataclass(frozen=True)
class EquivalencePartition:
    """Partition of the disjoint union ``X1 ⊔ X2``.

    ``blocks`` is a sequence of ``(left_members, right_members)`` index
    tuples; together they must cover ``range(n1)`` and ``range(n2)`` exactly
    once.
    """

    blocks: tuple
    n1: int
    n2: int

    def __post_init__(self):
        blocks = tuple((tuple(int(i) for i in L), tuple(int(j) for j in Rt)) for L, Rt in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        left = sorted(i for L, _ in blocks for i in L)
        right = sorted(j for _, Rt in blocks for j in Rt)
        if left != list(range(self.n1)) or right != list(range(self.n2)):
            raise ValueError("blocks do not partition X1 ⊔ X2 exactly")

    @classmethod
    def from_labels(cls, labels1: Sequence, labels2: Sequence) -> "EquivalencePartition":
        keys = list(dict.fromkeys(list(labels1) + list(labels2)))
        blocks = [(tuple(i for i, l in enumerate(labels1) if l == k),
                   tuple(j for j, l in enumerate(labels2) if l == k)) for k in keys]
        return cls(tuple(blocks), len(labels1), len(labels2))

    def mask(self) -> np.ndarray:
        """Induced relation: ``i R j`` iff ``i`` and ``j`` share a block."""
        M = np.zeros((self.n1, self.n2), dtype=bool)
        for L, Rt in self.blocks:
            if L and Rt:
                M[np.ix_(L, Rt)] = True
        return M


def quotient_tv(Delta, Theta, partition: EquivalencePartition) -> float:
    """``Σ_blocks max(0, Δ(block ∩ X1) − Θ(block ∩ X2))``."""
    a = _as_prob(Delta, "Delta")
    b = _as_prob(Theta, "Theta")
    if a.size != partition.n1 or b.size != partition.n2:
        raise ValueError("partition does not match the distribution supports")
    total = 0.0
    for L, Rt in partition.blocks:
        total += max(0.0, float(a[list(L)].sum()) - float(b[list(Rt)].sum()))
    return total


# ---------------------------------------------------------- Gaussian tails

def _positive_eigs(cov) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, atol=1e-12, rtol=1e-10):
        raise ValueError("covariance must be a symmetric matrix")
    lam = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    top = float(lam.max(initial=0.0))
    if lam.size and lam.min() < -1e-10 * max(top, 1e-300):
        raise ValueError("covariance is not positive semi-definite")
    return lam[lam > 1e-14 * top] if top > 0 else lam[:0]


def gaussian_ball_exceedance(cov, radius: float) -> float:
    """``P(‖ξ‖ > radius)`` for ``ξ ~ N(0, cov)``.

    With eigenvalues ``λ_i`` of ``cov`` the squared norm is the quadratic
    form ``Σ λ_i Z_i²``.  Its tail is the Gil-Pelaez inversion of the
    characteristic function (Imhof's form),

    ``P(Q > x) = 1/2 + (1/π) ∫_0^∞ sin θ(u) / (u ρ(u)) du``,

    ``θ(u) = ½ Σ arctan(λ_i u) − ½ x u``, ``ρ(u) = Π (1 + λ_i² u²)^{1/4}``.
    The head of the integral is taken in ``log u`` between the scales
    ``1/λ_i``; the oscillatory tail beyond a moderate ``u`` uses
    Fourier-weighted adaptive quadrature.  When the isotropic bounds at
    ``λ_min`` and ``λ_max`` already agree to 1e-15 their midpoint is
    returned.

    Raises
    ------
    RuntimeError
        If the quadrature error estimate exceeds 1e-8.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    lam = _positive_eigs(cov)
    if lam.size == 0:
        return 0.0
    if radius ** 2 == 0.0:      # zero or underflowing radius
        return 1.0
    # Anderson's inequality brackets the tail between the isotropic laws at
    # λ_min and λ_max; when the bracket is narrower than 1e-15 it is the answer
    lo = special.gammaincc(0.5 * lam.size, 0.5 * radius ** 2 / lam.min())
    hi = special.gammaincc(0.5 * lam.size, 0.5 * radius ** 2 / lam.max())
    if hi - lo < 1e-15:
        return float(0.5 * (lo + hi))
    lam = lam / radius ** 2       # scale so the threshold is Q > 1
    if lam.size == 1:
        return float(special.erfc(np.sqrt(0.5 / lam[0])))

    def amp(u):
        return np.prod((1.0 + (lam * u) ** 2) ** 0.25)

    def a(u):
        return 0.5 * np.sum(np.arctan(lam * u))

    def full(u):
        if u == 0.0:
            return 0.5 * lam.sum() - 0.5
        return np.sin(a(u) - 0.5 * u) / (u * amp(u))

    u0 = 40.0 * np.pi

    def logform(t):
        # ∫ f(u) du = ∫ f(e^t) e^t dt; f(u)·u = sin θ / ρ is bounded and
        # smooth in t across all the scales 1/λ_i
        u = math.exp(t)
        return math.sin(a(u) - 0.5 * u) / amp(u)

    t_lo = math.log(1e-13 / max(1.0, float(lam.sum())))
    cuts = sorted({math.log(float(v)) for v in 1.0 / lam if t_lo < math.log(float(v)) < math.log(u0)})
    knots = [t_lo] + cuts + [math.log(u0)]
    head = err = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for lo, hi in zip(knots[:-1], knots[1:]):
            v, e = integrate.quad(logform, lo, hi, limit=500, epsabs=1e-13, epsrel=1e-11)
            head, err = head + v, err + e
        # sin(a − u/2) = sin a · cos(u/2) − cos a · sin(u/2)
        t1, e1 = integrate.quad(lambda u: np.sin(a(u)) / (u * amp(u)), u0, np.inf,
                                weight="cos", wvar=0.5, limlst=200, epsabs=1e-13)
        t2, e2 = integrate.quad(lambda u: np.cos(a(u)) / (u * amp(u)), u0, np.inf,
                                weight="sin", wvar=0.5, limlst=200, epsabs=1e-13)
    if err + e1 + e2 > 1e-8:
        raise RuntimeError(f"quadrature did not converge (error estimate {err + e1 + e2:.2e})")
    p = 0.5 + (head + t1 - t2) / np.pi
    return float(min(max(p, 0.0), 1.0))


def isotropic_ball_bound(cov, radius: float) -> float:
    """Upper bound on ``P(‖ξ‖ > radius)`` from the dominating isotropic law.

    ``N(0, cov)`` is more concentrated on centred balls than
    ``N(0, λ_max I_r)`` with ``r = rank(cov)`` (Anderson's inequality), so
    ``P(‖ξ‖ > radius) <= P(χ²_r > radius² / λ_max)``; for ``r = 2`` this is
    ``exp(−radius² / (2 λ_max))``.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    lam = _positive_eigs(cov)
    if lam.size == 0:
        return 0.0
    return float(special.gammaincc(0.5 * lam.size, 0.5 * radius ** 2 / lam.max()))


def truncation_delta(mean, cov, region) -> float:
    """``1 − P(e ∈ region)`` for ``e ~ N(mean, cov)`` and an axis-aligned box.

    Only boxes in decorrelated coordinates are supported: ``cov`` must be
    diagonal, so the box probability is a product of one-dimensional CDF
    differences.
    """
    if not isinstance(region, Box):
        raise UnsupportedRegionError("only axis-aligned boxes are supported")
    if region.empty:
        raise ValueError("box is empty")
    mean = np.atleast_1d(np.asarray(mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    if cov.shape != (mean.size, mean.size) or region.dim != mean.size:
        raise ValueError("dimension mismatch between distribution and box")
    off = cov - np.diag(np.diag(cov))
    if np.any(np.abs(off) > 1e-12 * max(1.0, np.abs(cov).max())):
        raise UnsupportedRegionError("boxes are only supported in decorrelated coordinates "
                                     "(diagonal covariance)")
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    log_keep = 0.0
    for mu, s, lo, hi in zip(mean, sd, region.lo, region.hi):
        if s == 0:
            if not (lo <= mu <= hi):
                return 1.0
            continue
        # probability of leaving [lo, hi] on this axis, computed from both tails
        q = special.ndtr((lo - mu) / s) + special.ndtr(-(hi - mu) / s)
        if q >= 1.0:
            return 1.0
        log_keep += np.log1p(-q)
    return float(-np.expm1(log_keep))
