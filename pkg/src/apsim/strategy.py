"""Control strategies and the execution semantics of a controlled model.

A control strategy is an inhomogeneous Markov process on its own memory
``X_C``.  At every step ``t`` the controlled model

1. draws the next controller state ``x_C(t+1) ~ T_C^t(· | x_C(t), x(t))``,
2. forms the input law ``μ_t = h_C^t(x_C(t+1))``,
3. draws ``u(t) ~ μ_t``, and
4. draws ``x(t+1) ~ T(· | x(t), u(t))``.

Strategies implement the sampling form (``next_state``/``action``) and,
when their laws are finite, the enumeration form (``next_state_dist``/
``action_dist``) used by exact path enumeration.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .models import GaussianLtiGmdp
from .rng import TrialStreams, trial_streams

__all__ = [
    "StrategyTooShort", "InputOutOfRange", "ControlStrategy", "MarkovPolicy",
    "FeedbackPolicy", "FiniteMemoryStrategy", "Trace", "execute_controlled", "lti_noise_batch",
    "simulate_lti_batch",
]


class StrategyTooShort(ValueError):
    """Requested horizon exceeds the horizon the strategy is defined on."""


class InputOutOfRange(ValueError):
    """A strategy emitted an input outside the model's admissible set."""


class ControlStrategy:
    """Base class.  ``horizon`` is the number of inputs the strategy can emit.

    Subclasses override :meth:`next_state` and :meth:`action`; strategies
    with finite laws also override the ``*_dist`` methods.
    """

    horizon: int = 0

    def initial_state(self) -> Any:
        return None

    def next_state(self, t: int, xc, x, rng: np.random.Generator):
        raise NotImplementedError

    def action(self, t: int, xc, rng: np.random.Generator):
        raise NotImplementedError

    def next_state_dist(self, t: int, xc, x) -> list[tuple[float, Any]]:
        raise NotImplementedError(f"{type(self).__name__} has no enumeration form")

    def action_dist(self, t: int, xc) -> list[tuple[float, Any]]:
        raise NotImplementedError(f"{type(self).__name__} has no enumeration form")


class MarkovPolicy(ControlStrategy):
    """Markov policy on a finite model, stored as a table.

    The controller memory is the current model state.

    Parameters
    ----------
    table : array_like
        Either integer actions of shape ``(N, n_x)`` or action
        probabilities of shape ``(N, n_x, n_u)``.  A table without the time
        axis is repeated over ``horizon`` steps.
    horizon : int, optional
        Required when ``table`` has no time axis.
    """

    def __init__(self, table, horizon: Optional[int] = None):
        table = np.asarray(table)
        randomized = np.issubdtype(table.dtype, np.floating)
        time_axis = table.ndim == (3 if randomized else 2)
        if not time_axis:
            if horizon is None:
                raise ValueError("horizon required for a stationary table")
            table = np.broadcast_to(table, (horizon,) + table.shape)
        self.table = np.array(table)
        self.table.setflags(write=False)
        self.randomized = randomized
        self.horizon = int(self.table.shape[0])

    def next_state(self, t, xc, x, rng):
        return x

    def action(self, t, xc, rng):
        if self.randomized:
            p = self.table[t, xc]
            i = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
            return min(i, p.size - 1)
        return int(self.table[t, xc])

    def next_state_dist(self, t, xc, x):
        return [(1.0, x)]

    def action_dist(self, t, xc):
        if self.randomized:
            return [(float(p), u) for u, p in enumerate(self.table[t, xc]) if p > 0]
        return [(1.0, int(self.table[t, xc]))]


class FeedbackPolicy(ControlStrategy):
    """Deterministic Markov policy ``u(t) = fn(t, x(t))`` for linear models.

    ``fn`` must accept a batch of states (leading axes) and return the
    matching batch of inputs; it is also called on single states.
    """

    def __init__(self, fn: Callable[[int, np.ndarray], np.ndarray], horizon: int):
        self.fn = fn
        self.horizon = int(horizon)

    def next_state(self, t, xc, x, rng):
        return np.array(x, dtype=float)

    def action(self, t, xc, rng):
        return np.atleast_1d(np.asarray(self.fn(t, xc), dtype=float))

    def actions_batch(self, t: int, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(t, X), dtype=float).reshape(X.shape[0], -1)

    def simulate_batch(self, model: GaussianLtiGmdp, horizon: int, trials: int, seed: int,
                       first_trial: int = 0):
        return simulate_lti_batch(model, self.actions_batch, horizon, trials, seed, first_trial)


class FiniteMemoryStrategy(ControlStrategy):
    """Randomized strategy with a finite memory ``{0, ..., n_mem − 1}``.

    Parameters
    ----------
    memory : array_like, shape (N, n_mem, n_x, n_mem)
        ``memory[t, c, x]`` is the law of the next memory given the current
        memory ``c`` (``0`` before the first step) and the model state ``x``.
    actions : array_like, shape (N, n_mem, n_u)
        ``actions[t, c]`` is the input law in memory ``c``.
    """

    def __init__(self, memory, actions):
        self.memory = np.array(memory, dtype=float)
        self.actions = np.array(actions, dtype=float)
        if self.memory.shape[0] != self.actions.shape[0] or self.memory.shape[1] != self.actions.shape[1]:
            raise ValueError("memory and action tables disagree in horizon or memory size")
        self.horizon = int(self.memory.shape[0])

    @classmethod
    def random(cls, rng: np.random.Generator, n_x: int, n_u: int, n_mem: int, horizon: int,
               concentration: float = 1.0) -> "FiniteMemoryStrategy":
        """Dirichlet-distributed tables."""
        mem = rng.dirichlet(np.full(n_mem, concentration), size=(horizon, n_mem, n_x))
        act = rng.dirichlet(np.full(n_u, concentration), size=(horizon, n_mem))
        return cls(mem, act)

    def initial_state(self):
        return 0

    def next_state(self, t, xc, x, rng):
        return _draw_index(self.memory[t, int(xc), int(x)], rng)

    def action(self, t, xc, rng):
        return _draw_index(self.actions[t, int(xc)], rng)

    def next_state_dist(self, t, xc, x):
        p = self.memory[t, int(xc), int(x)]
        return [(float(p[i]), int(i)) for i in np.flatnonzero(p > 0)]

    def action_dist(self, t, xc):
        p = self.actions[t, int(xc)]
        return [(float(p[i]), int(i)) for i in np.flatnonzero(p > 0)]


def _draw_index(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(p) - 1)


@dataclass
class Trace:
    """One execution of a controlled model."""

    states: list
    inputs: list
    outputs: list
    controller_states: Optional[list] = None

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    def to_csv(self, fh=None, provenance: Optional[dict] = None) -> str:
        """Write ``t,x_1..x_n,u_1..u_m,y_1..y_d`` rows; returns the text."""
        def flat(v):
            if v is None:
                return []
            a = np.atleast_1d(np.asarray(v, dtype=object if isinstance(v, str) else None))
            return list(a.reshape(-1))
        n = len(flat(self.states[0]))
        m = len(flat(self.inputs[0])) if self.inputs else 0
        d = len(flat(self.outputs[0]))
        buf = io.StringIO()
        if provenance:
            for k in sorted(provenance):
                buf.write(f"#{k}={provenance[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i+1}" for i in range(n)] + [f"u_{i+1}" for i in range(m)]
                   + [f"y_{i+1}" for i in range(d)])
        for t in range(len(self.states)):
            u = flat(self.inputs[t]) if t < len(self.inputs) else [""] * m
            w.writerow([t] + [_fmt(v) for v in flat(self.states[t])] + [_fmt(v) for v in u]
                       + [_fmt(v) for v in flat(self.outputs[t])])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def execute_controlled(model, strategy: ControlStrategy, horizon: int, seed: int,
                       trial: int = 0, record_controller: bool = False) -> Trace:
    """Sample one trace of ``strategy × model`` over ``horizon`` steps.

    The model noise and the controller randomness come from separate
    streams derived from ``(seed, trial)``.

    Raises
    ------
    StrategyTooShort
        If ``horizon`` exceeds ``strategy.horizon``.
    InputOutOfRange
        If the strategy emits an inadmissible input.
    """
    if horizon > strategy.horizon:
        raise StrategyTooShort(f"strategy too short: horizon {horizon} > {strategy.horizon}")
    model_rng, ctrl_rng = trial_streams(seed, trial)
    is_lti = isinstance(model, GaussianLtiGmdp)
    x = model.sample_init(model_rng)
    xc = strategy.initial_state()
    states, inputs, outputs = [x], [], [model.output(x)]
    ctrl = [xc] if record_controller else None
    for t in range(horizon):
        xc = strategy.next_state(t, xc, x, ctrl_rng)
        u = strategy.action(t, xc, ctrl_rng)
        if is_lti:
            u = np.atleast_1d(np.asarray(u, dtype=float))
        if not model.admissible(u):
            raise InputOutOfRange(f"input out of range at t={t}: {u!r}")
        x = model.sample_next(x, u, model_rng)
        states.append(x)
        inputs.append(u)
        outputs.append(model.output(x))
        if record_controller:
            ctrl.append(xc)
    return Trace(states, inputs, outputs, ctrl)


def lti_noise_batch(model: GaussianLtiGmdp, horizon: int, trials: int, seed: int,
                    first_trial: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Initial states and noise sequences for a block of trials.

    Draws exactly what :func:`execute_controlled` draws from each trial's
    model stream, so batch and scalar simulations coincide.

    Returns
    -------
    X0 : ndarray, shape (trials, n)
    W : ndarray, shape (trials, horizon, k)
    """
    X0 = np.empty((trials, model.n))
    W = np.empty((trials, horizon, model.k))
    streams = TrialStreams(seed)
    for i in range(trials):
        rng = streams.seek(first_trial + i, controller=False).model
        X0[i] = model.sample_init(rng)
        W[i] = rng.standard_normal((horizon, model.k))
    return X0, W


def simulate_lti_batch(model: GaussianLtiGmdp, actions: Callable[[int, np.ndarray], np.ndarray],
                       horizon: int, trials: int, seed: int, first_trial: int = 0) -> dict:
    """Vectorized closed-loop simulation for deterministic Markov feedback.

    Returns
    -------
    dict
        ``states`` (trials, N+1, n), ``inputs`` (trials, N, m) and
        ``outputs`` (trials, N+1, d).
    """
    X0, W = lti_noise_batch(model, horizon, trials, seed, first_trial)
    X = np.empty((trials, horizon + 1, model.n))
    U = np.empty((trials, horizon, model.m))
    X[:, 0] = X0
    for t in range(horizon):
        u = actions(t, X[:, t])
        if model.input_bound is not None:
            if np.any(np.einsum("ij,ij->i", u, u) > model.input_bound * (1 + 1e-12) + 1e-15):
                raise InputOutOfRange(f"input out of range at t={t}")
        U[:, t] = u
        X[:, t + 1] = X[:, t] @ model.A.T + u @ model.B.T + W[:, t] @ model.Bw.T
    return {"states": X, "inputs": U, "outputs": X @ model.C.T, "noise": W}
