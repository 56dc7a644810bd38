"""Statistical and exact checks of refinement guarantees.

Monte Carlo estimates come with Wilson intervals.  On finite models the
law of the output word is computed exactly by forward path enumeration,
which turns the sandwich inequality between an abstract and a refined
concrete execution into a deterministic test.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .models import Box, FiniteGmdp, GaussianLtiGmdp
from .refine import FiniteInterface, FiniteLifting, RecoveryPolicy, RefinedStrategy, refine_exact
from .rng import generator
from .simrel import FiniteRelation, gamma_horizon
from .strategy import ControlStrategy, FiniteMemoryStrategy, MarkovPolicy, execute_controlled

__all__ = [
    "McReport", "wilson_interval", "monte_carlo_safety", "StateExplosionError",
    "output_word_distribution", "enumerate_event_prob", "check_sandwich",
    "FinitePair", "random_exact_pair", "random_approx_pair", "sandwich_instance",
    "sandwich_suite", "SandwichResult", "paired_difference_ci", "Z95",
]

Z95 = 1.959963984540054


class StateExplosionError(ValueError):
    """Path enumeration would exceed the configured size."""


def wilson_interval(successes: int, trials: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval.

    At the boundaries (no successes or no failures) the one-sided 95%
    rule of three ``3/trials`` is used, which is the tighter familiar bound.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k, n = int(successes), int(trials)
    if k == n:
        return max(0.0, 1.0 - 3.0 / n), 1.0
    if k == 0:
        return 0.0, min(1.0, 3.0 / n)
    p = k / n
    den = 1.0 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


@dataclass
class McReport:
    """Monte Carlo safety estimate.

    Attributes
    ----------
    per_trial : ndarray of bool
        Safety indicator of every trial (kept for paired comparisons).
    exit_counts : ndarray or None
        Histogram of relation exits per trial, when the strategy records them.
    first_exit_hist : ndarray or None
        Histogram of the first exit time (index N+1 counts "never").
    """

    trials: int
    successes: int
    estimate: float
    interval: tuple
    seed: int
    per_trial: np.ndarray = field(repr=False, default=None)
    exit_counts: Optional[np.ndarray] = None
    first_exit_hist: Optional[np.ndarray] = None

    @property
    def standard_error(self) -> float:
        p = self.estimate
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)


def _safe_indicator(outputs: np.ndarray, safe) -> np.ndarray:
    """``outputs`` has shape (trials, N+1, d)."""
    if isinstance(safe, Box):
        return np.all(safe.contains(outputs), axis=1)
    return np.array([all(safe(y) for y in row) for row in outputs])


def monte_carlo_safety(model, strategy: ControlStrategy, safe: Union[Box, Callable], N: int,
                       trials: int, seed: int, batch: bool = True) -> McReport:
    """Fraction of trials whose outputs stay in ``safe`` for ``t = 0..N``.

    Linear models use the strategy's vectorized ``simulate_batch`` when
    available; otherwise every trial runs through ``execute_controlled``.
    Both paths draw identical noise for equal seeds.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    exits = None
    if batch and isinstance(model, GaussianLtiGmdp) and hasattr(strategy, "simulate_batch"):
        out = strategy.simulate_batch(model, N, trials, seed)
        ok = _safe_indicator(out["outputs"], safe)
    else:
        ok = np.empty(trials, dtype=bool)
        ex = []
        for i in range(trials):
            tr = execute_controlled(model, strategy, N, seed, trial=i, record_controller=True)
            if isinstance(safe, Box):
                ok[i] = bool(np.all(safe.contains(np.asarray(tr.outputs, float).reshape(len(tr.outputs), -1))))
            else:
                ok[i] = all(safe(y) for y in tr.outputs)
            last = tr.controller_states[-1]
            if hasattr(last, "exits"):
                ex.append(last.exits)
        if ex:
            exits = np.bincount(np.asarray(ex), minlength=N + 2)
    k = int(ok.sum())
    return McReport(trials, k, k / trials, wilson_interval(k, trials), seed, ok, exits)


def paired_difference_ci(a: np.ndarray, b: np.ndarray, z: float = Z95) -> tuple[float, float]:
    """Mean of ``a − b`` and its half-width for paired (common random
    number) indicators."""
    d = np.asarray(a, float) - np.asarray(b, float)
    n = d.size
    sd = d.std(ddof=1) if n > 1 else 0.0
    half = z * sd / math.sqrt(n)
    return float(d.mean()), float(max(half, 3.0 / n))


# ------------------------------------------------------------ enumeration

def _explosion_guard(model: FiniteGmdp, N: int, limit: float):
    size = float(model.n_states) ** (N + 1)
    if size > limit:
        raise StateExplosionError(f"n_x^(N+1) = {size:.3g} exceeds the enumeration limit {limit:.3g}")


def output_word_distribution(model: FiniteGmdp, strategy: ControlStrategy, N: int,
                             limit: float = 1e7) -> dict:
    """Exact law of the output word ``(y(0), ..., y(N))``.

    Forward enumeration over ``(state, controller state, word)``; merged
    paths are summed with compensated summation at the end.
    """
    _explosion_guard(model, N, limit)
    if N > strategy.horizon:
        raise ValueError(f"strategy too short: horizon {N} > {strategy.horizon}")
    K = model.kernel
    front: dict = defaultdict(list)
    xc0 = strategy.initial_state()
    for x0 in np.flatnonzero(model.init > 0):
        front[(int(x0), xc0, (model.output(x0),))].append(float(model.init[x0]))
    for t in range(N):
        nxt: dict = defaultdict(list)
        for (x, xc, word), ps in front.items():
            p = math.fsum(ps)
            for q, xcn in strategy.next_state_dist(t, xc, x):
                for r, u in strategy.action_dist(t, xcn):
                    row = K[x, int(u)]
                    for xn in np.flatnonzero(row > 0):
                        nxt[(int(xn), xcn, word + (model.output(xn),))].append(p * q * r * float(row[xn]))
        front = nxt
    words: dict = defaultdict(list)
    for (_, _, word), ps in front.items():
        words[word].extend(ps)
    return {w: math.fsum(ps) for w, ps in words.items()}


def enumerate_event_prob(model: FiniteGmdp, strategy: ControlStrategy, event, N: int,
                         limit: float = 1e7) -> float:
    """Exact probability that the output word lies in ``event``.

    ``event`` is a set of words (tuples of outputs) or a predicate on words.
    """
    dist = output_word_distribution(model, strategy, N, limit)
    pred = event if callable(event) else (lambda w: w in event)
    return math.fsum(p for w, p in dist.items() if pred(w))


def check_sandwich(p_abstract_minus: float, p_abstract_plus: float, p_concrete: float,
                   gamma: float, slack: float = 0.0, atol: float = 1e-12) -> bool:
    """``P1(A−ε) − γ <= P2(A) <= P1(A+ε) + γ`` up to ``slack`` (and round-off)."""
    for p in (p_abstract_minus, p_abstract_plus, p_concrete):
        if not -atol <= p <= 1 + atol:
            raise ValueError("probabilities must lie in [0, 1]")
    s = slack + atol
    return (p_abstract_minus - gamma - s <= p_concrete) and (p_concrete <= p_abstract_plus + gamma + s)


# ------------------------------------------------------- random instances

@dataclass
class FinitePair:
    """A finite abstract/concrete pair with relation, interface and lifting."""

    abstract: FiniteGmdp
    concrete: FiniteGmdp
    relation: FiniteRelation
    interface: FiniteInterface
    lifting: FiniteLifting
    exact: bool

    @property
    def delta(self) -> float:
        return self.lifting.delta


def _random_labels(rng, n):
    labels = rng.integers(0, 2, size=n)
    if n > 1 and labels.min() == labels.max():
        labels[rng.integers(n)] ^= 1
    return ["ab"[i] for i in labels]


def _split_pair(rng, max_states: int = 5):
    n1 = int(rng.integers(2, min(4, max_states) + 1))
    n_u = int(rng.integers(1, 4))
    labels = _random_labels(rng, n1)
    K1 = rng.dirichlet(np.ones(n1), size=(n1, n_u))
    init1 = rng.dirichlet(np.ones(n1))
    copies = np.ones(n1, dtype=int)
    for _ in range(max_states - n1):
        if rng.random() < 0.5:
            copies[rng.integers(n1)] += 1
    f = np.repeat(np.arange(n1), copies)
    n2 = f.size
    perms = np.array([rng.permutation(n_u) for _ in range(n2)])   # u2 = perms[x2, u1]
    K2 = np.zeros((n2, n_u, n2))
    for x2 in range(n2):
        for u1 in range(n_u):
            for x1n in range(n1):
                dest = np.flatnonzero(f == x1n)
                K2[x2, perms[x2, u1], dest] = K1[f[x2], u1, x1n] * rng.dirichlet(np.ones(dest.size))
    init2 = np.zeros(n2)
    for x1 in range(n1):
        dest = np.flatnonzero(f == x1)
        init2[dest] = init1[x1] * rng.dirichlet(np.ones(dest.size))
    M1 = FiniteGmdp(K1, init1, labels)
    labels2 = [labels[i] for i in f]
    table = np.zeros((n_u, n1, n2), dtype=np.int64)
    for x2 in range(n2):
        table[:, :, x2] = perms[x2][:, None]
    return M1, K2, init2, labels2, f, table


def random_exact_pair(rng: np.random.Generator, max_states: int = 5) -> FinitePair:
    """Concrete model obtained by splitting abstract states (lumpable).

    Every concrete state is a copy of one abstract state; the kernel mass
    into each abstract class is preserved, so the graph of the copy map is
    an exact simulation relation.  Actions are permuted per concrete state
    and the interface undoes the permutation.
    """
    M1, K2, init2, labels2, f, table = _split_pair(rng, max_states)
    M2 = FiniteGmdp(K2, init2, labels2)
    mask = np.zeros((M1.n_states, M2.n_states), dtype=bool)
    mask[f, np.arange(f.size)] = True
    rel = FiniteRelation(mask)
    iface = FiniteInterface(table)
    lift = FiniteLifting.build(M1, M2, rel, iface)
    return FinitePair(M1, M2, rel, iface, lift, True)


def random_approx_pair(rng: np.random.Generator, max_states: int = 5) -> FinitePair:
    """Perturbed split pair with a thinned label-respecting relation.

    The relation contains the copy map plus a random subset of further
    equal-label pairs (so related outputs coincide and ε = 0), each kept
    only if it does not raise δ, the worst off-relation mass of the
    minimum-δ liftings.
    """
    M1, K2, init2, labels2, f, table = _split_pair(rng, max_states)
    eta = rng.uniform(0.005, 0.08)
    n2 = f.size
    K2 = (1 - eta) * K2 + eta * rng.dirichlet(np.ones(n2), size=K2.shape[:2])
    init2 = (1 - eta) * init2 + eta * rng.dirichlet(np.ones(n2))
    M2 = FiniteGmdp(K2, init2, labels2)
    same = np.array([[a == b for b in labels2] for a in M1.outputs])
    mask = np.zeros_like(same)
    mask[f, np.arange(n2)] = True
    iface = FiniteInterface(table)
    lift = FiniteLifting.build(M1, M2, FiniteRelation(mask), iface)
    base = lift.delta
    # thin the equal-label candidates: keep one only if δ does not grow
    cand = np.argwhere(same & ~mask)
    for i in rng.permutation(len(cand)):
        if rng.random() < 0.5:
            continue
        trial = mask.copy()
        trial[tuple(cand[i])] = True
        tl = FiniteLifting.build(M1, M2, FiniteRelation(trial), iface)
        if tl.delta <= base + 1e-12:
            mask, lift = trial, tl
    return FinitePair(M1, M2, lift.relation, iface, lift, False)


def _random_recovery(rng, pair: FinitePair, N: int) -> RecoveryPolicy:
    kind = rng.integers(3)
    if kind == 0:
        return RecoveryPolicy.hold(int(rng.integers(pair.concrete.n_actions)))
    if kind == 1:
        return RecoveryPolicy.reset(0)
    n_u = pair.concrete.n_actions
    return RecoveryPolicy.custom(MarkovPolicy(rng.dirichlet(np.ones(n_u), size=(N, pair.concrete.n_states))))


@dataclass
class SandwichResult:
    """Outcome of one random instance."""

    index: int
    exact: bool
    delta: float
    gamma: float
    tv: float
    lower_ok: bool
    upper_ok: bool
    n1: int
    n2: int
    horizon: int

    @property
    def passed(self) -> bool:
        if self.exact:
            return self.tv <= 1e-10
        return self.lower_ok and self.upper_ok


def sandwich_instance(rng: np.random.Generator, index: int = 0, exact: Optional[bool] = None,
                      max_states: int = 5, max_horizon: int = 4) -> SandwichResult:
    """Build a random pair and strategy, enumerate both executions and check.

    For exact pairs the two output-word laws must coincide; otherwise the
    sandwich must hold for every event.  With discrete labels and ε = 0
    both ε-modifications of an event equal the event, and the worst event
    is ``{w : P2(w) > P1(w)}``, so checking it and its complement covers
    all events.
    """
    exact = bool(rng.integers(2)) if exact is None else exact
    pair = random_exact_pair(rng, max_states) if exact else random_approx_pair(rng, max_states)
    N = int(rng.integers(1, max_horizon + 1))
    n_mem = int(rng.integers(1, 4))
    C1 = FiniteMemoryStrategy.random(rng, pair.abstract.n_states, pair.abstract.n_actions, n_mem, N)
    if exact:
        C2 = refine_exact(C1, pair.lifting, pair.relation, pair.interface, pair.concrete)
    else:
        C2 = RefinedStrategy(C1, pair.lifting, pair.relation, pair.interface,
                             _random_recovery(rng, pair, N), pair.concrete)
    P1 = output_word_distribution(pair.abstract, C1, N)
    P2 = output_word_distribution(pair.concrete, C2, N)
    words = set(P1) | set(P2)
    worst = {w for w in words if P2.get(w, 0.0) > P1.get(w, 0.0)}
    tv = math.fsum(P2.get(w, 0.0) - P1.get(w, 0.0) for w in worst)
    gamma = gamma_horizon(pair.delta, N)
    ok = []
    for ev in (worst, words - worst):
        p1 = math.fsum(P1.get(w, 0.0) for w in ev)
        p2 = math.fsum(P2.get(w, 0.0) for w in ev)
        ok.append(check_sandwich(min(p1, 1.0), min(p1, 1.0), min(p2, 1.0), gamma))
    return SandwichResult(index, exact, pair.delta, gamma, tv, ok[0] and ok[1], ok[0] and ok[1],
                          pair.abstract.n_states, pair.concrete.n_states, N)


def sandwich_suite(n_instances: int = 500, seed: int = 20240501, max_states: int = 5,
                   max_horizon: int = 4) -> list[SandwichResult]:
    """Run ``n_instances`` random instances (alternating exact/approximate)."""
    out = []
    for i in range(n_instances):
        rng = generator(seed, 5, i)
        out.append(sandwich_instance(rng, i, exact=(i % 2 == 0), max_states=max_states,
                                     max_horizon=max_horizon))
    return out
