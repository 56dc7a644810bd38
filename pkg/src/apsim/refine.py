"""Refinement of abstract control strategies onto concrete models.

A refined strategy runs the abstract strategy ``C1`` on a simulated
abstract state ``x1`` that is kept coupled to the measured concrete state
``x2`` through a lifting.  Each step it

1. updates ``x1`` by sampling the lifting conditioned on the new ``x2``,
2. checks that ``(x1, x2)`` is still related,
3. advances ``C1`` on ``x1``, draws ``u1`` and maps it to ``u2`` through
   the interface,

and emits ``u2``.  If the pair leaves the relation the strategy switches to
a recovery policy.  All sampling happens in :meth:`RefinedStrategy.next_state`
so that the emitted input is a deterministic function of the controller
state, which keeps the exact enumeration forms simple.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional

import numpy as np

from .coupling import CouplingMatrix, min_delta_lifting
from .models import FiniteGmdp, GaussianLtiGmdp
from .simrel import (BallRelation, FiniteRelation, IdentityInterface, QuadraticRelation,
                     SimRelCertificate)
from .strategy import ControlStrategy, InputOutOfRange, lti_noise_batch

__all__ = [
    "RecoveryPolicy", "RefinedState", "RefinedStrategy", "FiniteLifting", "LtiLifting",
    "DiagonalLifting", "NotReconstructibleError", "MissingConditionalError",
    "RandomizedInterface", "refine_exact", "refine_approx", "conditional_abstract_update",
    "reset_abstract", "simulate_refined_lti", "FiniteInterface",
]

REFINE, RECOVER = "refine", "recover"


class NotReconstructibleError(ValueError):
    """The concrete transition cannot be explained by any noise value."""


class MissingConditionalError(ValueError):
    """The lifting offers no conditional-sampling form."""


def _draw(p: np.ndarray, rng) -> int:
    """Inverse-CDF draw; point masses consume no randomness."""
    nz = np.flatnonzero(p > 0)
    if nz.size == 1:
        return int(nz[0])
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, p.size - 1)


# ------------------------------------------------------------- interfaces

class FiniteInterface:
    """Deterministic interface on finite action sets, ``table[u1, x1, x2] -> u2``."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.int64)

    def apply(self, u1, x1, x2) -> int:
        return int(self.table[int(u1), int(x1), int(x2)])

    __call__ = apply


@dataclass(frozen=True, eq=False)
class RandomizedInterface:
    """``u2 = (base(u1, x1, x2), v)`` with ``v ~ N(0, cov)`` appended.

    Realizes interfaces that inject additional noise through extra concrete
    inputs.
    """

    cov: np.ndarray
    base: Any = None

    def sample(self, u1, x1, x2, rng) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u1 if self.base is None else self.base(u1, x1, x2), float))
        cov = np.atleast_2d(np.asarray(self.cov, float))
        L = np.linalg.cholesky(cov)
        return np.concatenate([u, L @ rng.standard_normal(cov.shape[0])])


def _interface_sample(interface, u1, x1, x2, rng):
    if hasattr(interface, "sample"):
        return interface.sample(u1, x1, x2, rng)
    return interface(u1, x1, x2)


# --------------------------------------------------------------- liftings

@dataclass
class FiniteLifting:
    """Couplings for a finite abstract/concrete pair.

    ``couplings[(x1, x2, u1)]`` couples ``T1(·|x1, u1)`` with
    ``T2(·|x2, U(u1, x1, x2))`` and ``initial`` couples the two initial
    distributions; all are minimum-δ liftings for the relation.
    """

    abstract: FiniteGmdp
    concrete: FiniteGmdp
    relation: FiniteRelation
    interface: Any
    couplings: dict
    initial: CouplingMatrix

    @classmethod
    def build(cls, abstract: FiniteGmdp, concrete: FiniteGmdp, relation: FiniteRelation,
              interface=None) -> "FiniteLifting":
        interface = IdentityInterface() if interface is None else interface
        R = relation.mask
        couplings = {}
        for x1, x2 in zip(*np.nonzero(R)):
            for u1 in range(abstract.n_actions):
                u2 = interface(u1, int(x1), int(x2))
                couplings[(int(x1), int(x2), u1)] = min_delta_lifting(
                    abstract.kernel[x1, u1], concrete.kernel[x2, u2], R)
        init = min_delta_lifting(abstract.init, concrete.init, R)
        return cls(abstract, concrete, relation, interface, couplings, init)

    @property
    def delta(self) -> float:
        """Worst off-relation mass over all transition liftings and the initial one."""
        vals = [c.delta for c in self.couplings.values()] + [self.initial.delta]
        return float(max(vals))

    def _cond(self, W: CouplingMatrix, x2: int) -> np.ndarray:
        col = W.W[:, int(x2)]
        s = col.sum()
        if s <= 0:
            raise ValueError(f"concrete state {x2} has zero mass under the lifting")
        return col / s

    def initial_dist(self, x2):
        p = self._cond(self.initial, x2)
        return [(float(p[i]), int(i)) for i in np.flatnonzero(p > 0)]

    def initial_state(self, x2, rng):
        return _draw(self._cond(self.initial, x2), rng)

    def update_dist(self, x2n, u1, x1, x2, u2):
        p = self._cond(self.couplings[(int(x1), int(x2), int(u1))], x2n)
        return [(float(p[i]), int(i)) for i in np.flatnonzero(p > 0)]

    def update(self, x2n, u1, x1, x2, u2, rng):
        return _draw(self._cond(self.couplings[(int(x1), int(x2), int(u1))], x2n), rng)


@dataclass(frozen=True, eq=False)
class LtiLifting:
    """Shared-noise lifting of two linear models.

    The noise of the concrete step is reconstructed from the observed
    transition and replayed through the abstract model.
    """

    abstract: GaussianLtiGmdp
    concrete: GaussianLtiGmdp
    relation: Any
    tolerance: float = 1e-9

    def _pinv(self):
        return np.linalg.pinv(self.concrete.Bw)

    def reconstruct_noise(self, x2n, x2, u2) -> np.ndarray:
        c = self.concrete
        r = np.asarray(x2n, float) - np.asarray(x2, float) @ c.A.T - np.asarray(u2, float) @ c.B.T
        w = r @ self._pinv().T
        resid = np.abs(w @ c.Bw.T - r).max() if r.size else 0.0
        scale = max(1.0, float(np.abs(r).max()) if r.size else 1.0)
        if resid > self.tolerance * scale:
            raise NotReconstructibleError(f"lifting not noise-reconstructible (residual {resid:.3e})")
        return w

    def initial_state(self, x2, rng):
        return reset_abstract_relation(self.relation, x2)[0]

    def update(self, x2n, u1, x1, x2, u2, rng):
        w = self.reconstruct_noise(x2n, x2, u2)
        a = self.abstract
        return np.asarray(x1, float) @ a.A.T + np.asarray(u1, float) @ a.B.T + w[..., :a.k] @ a.Bw.T \
            if a.k else np.asarray(x1, float) @ a.A.T + np.asarray(u1, float) @ a.B.T


@dataclass(frozen=True, eq=False)
class DiagonalLifting:
    """Lifting supported on the diagonal: ``x1' = x2'``."""

    def initial_state(self, x2, rng):
        return x2

    def initial_dist(self, x2):
        return [(1.0, x2)]

    def update(self, x2n, u1, x1, x2, u2, rng):
        return x2n

    def update_dist(self, x2n, u1, x1, x2, u2):
        return [(1.0, x2n)]


def reset_abstract_relation(relation, x2) -> tuple[Any, bool]:
    """Abstract state best related to ``x2`` and whether it is related."""
    if isinstance(relation, FiniteRelation):
        col = np.flatnonzero(relation.mask[:, int(x2)])
        return (int(col[0]), True) if col.size else (0, False)
    if isinstance(relation, (QuadraticRelation, BallRelation)):
        x1, val = relation.reset(x2)
        bound = relation.epsilon ** 2 if isinstance(relation, QuadraticRelation) else relation.radius ** 2
        return x1, bool(val <= bound * (1 + 1e-12))
    if hasattr(relation, "reset"):
        return relation.reset(x2)
    raise TypeError(f"relation {type(relation).__name__} has no reset")


def reset_abstract(certificate: SimRelCertificate, x2) -> tuple[Any, bool]:
    """``x1 = argmin`` of the relation form for concrete ``x2``.

    For quadratic relations ``x1 = (PᵀMP)⁻¹PᵀM x2``.  The flag is ``False``
    when even the minimizer is not related (unrecoverable).

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``PᵀMP`` is singular.
    """
    return reset_abstract_relation(certificate.relation, x2)


def conditional_abstract_update(certificate: SimRelCertificate, x1, u1, x2, u2, x2n, tolerance: float = 1e-9):
    """Next abstract state under the shared-noise lifting.

    ``w = B_w⁺ (x2' − A x2 − B u2)`` and ``x1' = A_i x1 + B_i u1 + B_wi w``.

    Raises
    ------
    NotReconstructibleError
        If ``B_w w`` does not reproduce the observed transition.
    """
    if certificate.abstract is None or certificate.concrete is None:
        raise ValueError("certificate does not reference its models")
    lift = LtiLifting(certificate.abstract, certificate.concrete, certificate.relation, tolerance)
    return lift.update(x2n, u1, x1, x2, u2, None)


# --------------------------------------------------------------- recovery

@dataclass(frozen=True)
class RecoveryPolicy:
    """What the refined strategy does once the pair leaves the relation.

    kind : {"reset", "hold", "custom"}
        ``"reset"`` re-initializes the abstract state from the concrete one
        and keeps refining (falls back to holding ``u0`` if the reset state
        is not related); ``"hold"`` applies the constant ``u0``;
        ``"custom"`` hands control to ``strategy``, a strategy acting on the
        concrete state.
    """

    kind: str = "reset"
    u0: Any = None
    strategy: Optional[ControlStrategy] = None

    def __post_init__(self):
        if self.kind not in ("reset", "hold", "custom"):
            raise ValueError("recovery kind must be reset, hold or custom")
        if self.kind == "custom" and self.strategy is None:
            raise ValueError("custom recovery needs a strategy")

    @classmethod
    def reset(cls, u0=None) -> "RecoveryPolicy":
        return cls("reset", u0)

    @classmethod
    def hold(cls, u0=0) -> "RecoveryPolicy":
        return cls("hold", u0)

    @classmethod
    def custom(cls, strategy: ControlStrategy) -> "RecoveryPolicy":
        return cls("custom", None, strategy)


def _hold_input(u0, concrete):
    if isinstance(concrete, GaussianLtiGmdp):
        return np.zeros(concrete.m) if u0 is None else np.atleast_1d(np.asarray(u0, float))
    return 0 if u0 is None else int(u0)


# ------------------------------------------------------ refined strategy

class RefinedState(NamedTuple):
    """Controller state of a refined strategy."""

    mode: str
    xc1: Any
    x1: Any
    x2: Any
    u1: Any
    u2: Any
    exits: int
    rec: Any = None


def _key(v):
    return v.tobytes() if isinstance(v, np.ndarray) else v


class RefinedStrategy(ControlStrategy):
    """Strategy ``C2`` refining ``C1`` through a lifting and an interface.

    Parameters
    ----------
    abstract_strategy : ControlStrategy
        ``C1``, acting on abstract states.
    lifting : object
        Provides ``initial_state(x2, rng)`` and ``update(x2', u1, x1, x2, u2, rng)``;
        the enumeration forms additionally need ``initial_dist`` and
        ``update_dist``.
    relation : object
        Membership via ``contains(x1, x2)``.
    interface : callable
        ``u2 = interface(u1, x1, x2)``, or an object with ``sample``.
    recovery : RecoveryPolicy
    concrete : model, optional
        Used to size the held recovery input.
    """

    def __init__(self, abstract_strategy: ControlStrategy, lifting, relation, interface,
                 recovery: RecoveryPolicy = RecoveryPolicy(), concrete=None,
                 certificate: Optional[SimRelCertificate] = None):
        self.c1 = abstract_strategy
        self.lifting = lifting
        self.relation = relation
        self.interface = interface
        self.recovery = recovery
        self.concrete = concrete
        self.certificate = certificate
        self.horizon = abstract_strategy.horizon

    def clone(self) -> "RefinedStrategy":
        """Independent copy (the object holds no per-execution state)."""
        return RefinedStrategy(self.c1, self.lifting, self.relation, self.interface,
                               self.recovery, self.concrete, self.certificate)

    def initial_state(self):
        return None

    def _related(self, x1, x2) -> bool:
        return bool(self.relation.contains(x1, x2))

    # sampling form ---------------------------------------------------
    def next_state(self, t, xc, x2, rng):
        if t == 0 or xc is None:
            x1 = self.lifting.initial_state(x2, rng)
            exits, xc1_prev, rec = 0, self.c1.initial_state(), None
            if not self._related(x1, x2):
                return self._leave(t, x2, xc1_prev, x1, 1, rng, rec)
        elif xc.mode == REFINE:
            x1 = self.lifting.update(x2, xc.u1, xc.x1, xc.x2, xc.u2, rng)
            exits, xc1_prev, rec = xc.exits, xc.xc1, xc.rec
            if not self._related(x1, x2):
                return self._leave(t, x2, xc1_prev, x1, exits + 1, rng, rec)
        else:
            return self._recover_step(t, xc, x2, rng)
        return self._refine_step(t, x2, xc1_prev, x1, exits, rng, rec)

    def _refine_step(self, t, x2, xc1_prev, x1, exits, rng, rec):
        xc1 = self.c1.next_state(t, xc1_prev, x1, rng)
        u1 = self.c1.action(t, xc1, rng)
        u2 = _interface_sample(self.interface, u1, x1, x2, rng)
        return RefinedState(REFINE, xc1, x1, x2, u1, u2, exits, rec)

    def _leave(self, t, x2, xc1_prev, x1, exits, rng, rec):
        if self.recovery.kind == "reset":
            x1r, ok = reset_abstract_relation(self.relation, x2)
            if ok:
                return self._refine_step(t, x2, xc1_prev, x1r, exits, rng, rec)
        return self._recover_step(t, RefinedState(RECOVER, xc1_prev, x1, None, None, None, exits, None),
                                  x2, rng)

    def _recover_step(self, t, xc, x2, rng):
        if self.recovery.kind == "custom":
            s = self.recovery.strategy
            prev = s.initial_state() if xc.rec is None else xc.rec
            rec = s.next_state(t, prev, x2, rng)
            u2 = s.action(t, rec, rng)
            return RefinedState(RECOVER, xc.xc1, xc.x1, x2, None, u2, xc.exits, rec)
        u2 = _hold_input(self.recovery.u0, self.concrete)
        return RefinedState(RECOVER, xc.xc1, xc.x1, x2, None, u2, xc.exits, None)

    def action(self, t, xc, rng):
        return xc.u2

    # enumeration form ------------------------------------------------
    def next_state_dist(self, t, xc, x2):
        out: dict = {}

        def add(p, s):
            k = tuple(_key(v) for v in s)
            if k in out:
                out[k] = (out[k][0] + p, s)
            else:
                out[k] = (p, s)

        if t == 0 or xc is None:
            for p, x1 in self.lifting.initial_dist(x2):
                for q, s in self._after_update_dist(t, x2, self.c1.initial_state(), x1, 0, None, True):
                    add(p * q, s)
        elif xc.mode == REFINE:
            for p, x1 in self.lifting.update_dist(x2, xc.u1, xc.x1, xc.x2, xc.u2):
                for q, s in self._after_update_dist(t, x2, xc.xc1, x1, xc.exits, xc.rec, False):
                    add(p * q, s)
        else:
            for q, s in self._recover_dist(t, xc, x2):
                add(q, s)
        return list(out.values())

    def _after_update_dist(self, t, x2, xc1_prev, x1, exits, rec, first):
        if self._related(x1, x2):
            return self._refine_dist(t, x2, xc1_prev, x1, exits, rec)
        exits += 1
        if self.recovery.kind == "reset":
            x1r, ok = reset_abstract_relation(self.relation, x2)
            if ok:
                return self._refine_dist(t, x2, xc1_prev, x1r, exits, rec)
        return self._recover_dist(t, RefinedState(RECOVER, xc1_prev, x1, None, None, None, exits, None), x2)

    def _refine_dist(self, t, x2, xc1_prev, x1, exits, rec):
        res = []
        for p, xc1 in self.c1.next_state_dist(t, xc1_prev, x1):
            for q, u1 in self.c1.action_dist(t, xc1):
                if hasattr(self.interface, "sample"):
                    raise NotImplementedError("randomized interfaces have no enumeration form")
                u2 = self.interface(u1, x1, x2)
                res.append((p * q, RefinedState(REFINE, xc1, x1, x2, u1, u2, exits, rec)))
        return res

    def _recover_dist(self, t, xc, x2):
        if self.recovery.kind == "custom":
            s = self.recovery.strategy
            prev = s.initial_state() if xc.rec is None else xc.rec
            res = []
            for p, rec in s.next_state_dist(t, prev, x2):
                for q, u2 in s.action_dist(t, rec):
                    res.append((p * q, RefinedState(RECOVER, xc.xc1, xc.x1, x2, None, u2, xc.exits, rec)))
            return res
        u2 = _hold_input(self.recovery.u0, self.concrete)
        return [(1.0, RefinedState(RECOVER, xc.xc1, xc.x1, x2, None, u2, xc.exits, None))]

    def action_dist(self, t, xc):
        return [(1.0, xc.u2)]


def refine_exact(abstract_strategy: ControlStrategy, lifting, relation, interface=None,
                 concrete=None, tol: float = 1e-12) -> RefinedStrategy:
    """Refinement for an exact simulation (δ = 0).

    Raises
    ------
    MissingConditionalError
        If the lifting has no conditional-sampling form.
    ValueError
        If the lifting has positive off-relation mass.
    """
    for name in ("initial_state", "update"):
        if not hasattr(lifting, name):
            raise MissingConditionalError(f"lifting lacks the conditional form ({name})")
    delta = getattr(lifting, "delta", 0.0)
    if delta > tol:
        raise ValueError(f"lifting is not exact (delta = {delta:.3e})")
    interface = IdentityInterface() if interface is None else interface
    # a δ = 0 lifting never leaves the relation, so recovery is never used
    return RefinedStrategy(abstract_strategy, lifting, relation, interface,
                           RecoveryPolicy.hold(), concrete)


def refine_approx(abstract_strategy: ControlStrategy, certificate: SimRelCertificate,
                  recovery: RecoveryPolicy = RecoveryPolicy(), lifting=None) -> RefinedStrategy:
    """Refinement for an ε,δ-simulation certificate.

    Linear certificates get the shared-noise lifting by default; finite
    ones need ``lifting`` (see :class:`FiniteLifting`).
    """
    if lifting is None:
        if not isinstance(certificate.concrete, GaussianLtiGmdp):
            raise MissingConditionalError("finite certificates need an explicit lifting")
        lifting = LtiLifting(certificate.abstract, certificate.concrete, certificate.relation)
    return RefinedStrategy(abstract_strategy, lifting, certificate.relation, certificate.interface,
                           recovery, certificate.concrete, certificate)


# ----------------------------------------------------------- batch runner

def simulate_refined_lti(concrete: GaussianLtiGmdp, abstract: GaussianLtiGmdp,
                         abstract_actions: Callable[[int, np.ndarray], np.ndarray],
                         relation, interface, horizon: int, trials: int, seed: int,
                         recovery: RecoveryPolicy = RecoveryPolicy(), first_trial: int = 0,
                         recovery_actions: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
                         tolerance: float = 1e-9) -> dict:
    """Vectorized execution of a refined strategy on a linear concrete model.

    ``abstract_actions(t, X1)`` is a deterministic Markov abstract policy.
    Draws exactly the noise of :func:`~apsim.strategy.execute_controlled`,
    so each trial equals the scalar execution of the matching
    :class:`RefinedStrategy`.

    Returns
    -------
    dict
        ``concrete_states`` (trials, N+1, n2), ``abstract_states``
        (trials, N+1, n1), ``inputs`` (trials, N, m2), ``modes`` (trials, N+1)
        with True for refine, ``exits`` (trials,), ``first_exit`` (trials,;
        −1 if none), ``exit_steps`` (trials, N+1) bool.
    """
    X0, W = lti_noise_batch(concrete, horizon, trials, seed, first_trial)
    lift = LtiLifting(abstract, concrete, relation, tolerance)
    n1 = abstract.n
    X2 = np.empty((trials, horizon + 1, concrete.n))
    X1 = np.full((trials, horizon + 1, n1), np.nan)
    U = np.empty((trials, horizon, concrete.m))
    modes = np.zeros((trials, horizon + 1), dtype=bool)
    exit_steps = np.zeros((trials, horizon + 1), dtype=bool)
    X2[:, 0] = X0
    x1, ok = _batch_reset(relation, X0)
    refine = ok.copy()
    exit_steps[:, 0] = ~ok
    hold = _hold_input(recovery.u0, concrete)
    X1[:, 0] = x1
    for t in range(horizon):
        modes[:, t] = refine
        x2 = X2[:, t]
        u1 = np.asarray(abstract_actions(t, x1), float).reshape(trials, -1)
        u2 = np.empty((trials, concrete.m))
        if np.any(refine):
            u2[refine] = interface(u1[refine], x1[refine], x2[refine])
        if np.any(~refine):
            u2[~refine] = hold if recovery_actions is None else recovery_actions(t, x2[~refine])
        if concrete.input_bound is not None:
            if np.any(np.einsum("ij,ij->i", u2, u2) > concrete.input_bound * (1 + 1e-12) + 1e-15):
                raise InputOutOfRange(f"input out of range at t={t}")
        U[:, t] = u2
        x2n = x2 @ concrete.A.T + u2 @ concrete.B.T + W[:, t] @ concrete.Bw.T
        X2[:, t + 1] = x2n
        x1n = x1.copy()
        if np.any(refine):
            x1n[refine] = lift.update(x2n[refine], u1[refine], x1[refine], x2[refine], u2[refine], None)
        inside = np.asarray(relation.contains(x1n, x2n), dtype=bool)
        leaving = refine & ~inside
        exit_steps[:, t + 1] = leaving
        if recovery.kind == "reset" and np.any(leaving):
            xr, okr = _batch_reset(relation, x2n[leaving])
            x1n[leaving] = xr
            still = np.zeros(trials, dtype=bool)
            still[np.flatnonzero(leaving)[okr]] = True
            refine = (refine & inside) | still
        else:
            refine = refine & inside
        x1 = x1n
        X1[:, t + 1] = x1
    modes[:, horizon] = refine
    exits = exit_steps.sum(axis=1)
    first = np.where(exits > 0, np.argmax(exit_steps, axis=1), -1)
    return {"concrete_states": X2, "abstract_states": X1, "inputs": U, "modes": modes,
            "exits": exits, "first_exit": first, "exit_steps": exit_steps,
            "concrete_outputs": X2 @ concrete.C.T, "abstract_outputs": X1 @ abstract.C.T, "noise": W}


def _batch_reset(relation, X2) -> tuple[np.ndarray, np.ndarray]:
    x1, val = relation.reset(X2)
    bound = relation.epsilon ** 2 if isinstance(relation, QuadraticRelation) else relation.radius ** 2
    return np.asarray(x1, float), np.asarray(val <= bound * (1 + 1e-12), dtype=bool)
