"""Model types: finite gMDPs, Gaussian linear gMDPs and output boxes.

Both model classes are frozen dataclasses whose arrays are made read-only
at construction, so a model can be shared freely between simulations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .linalg import psd_factor

__all__ = [
    "FiniteGmdp", "GaussianLtiGmdp", "Box", "validate_model",
    "model_to_dict", "model_from_dict", "load_model", "save_model",
    "discrete_metric", "euclidean_metric",
]

_SUM_TOL = 1e-12


def discrete_metric(a, b) -> float:
    """0/1 metric on labels."""
    return 0.0 if a == b else 1.0


def euclidean_metric(a, b) -> float:
    """Euclidean distance between numeric outputs."""
    return float(np.linalg.norm(np.atleast_1d(np.asarray(a, float)) - np.atleast_1d(np.asarray(b, float))))


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim < 2:
        arr = np.atleast_2d(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FiniteGmdp:
    """Finite-state, finite-action gMDP.

    Parameters
    ----------
    kernel : array_like, shape (n_x, n_u, n_x)
        ``kernel[x, u, x']`` is the probability of moving from ``x`` to
        ``x'`` under action ``u``.
    init : array_like, shape (n_x,)
        Initial distribution.
    outputs : sequence, length n_x
        Output point of every state.  Labels (strings, ints) get the
        discrete metric by default; numeric vectors get the Euclidean one.
    metric : callable, optional
        Distance on outputs; overrides the default.
    """

    kernel: np.ndarray
    init: np.ndarray
    outputs: tuple
    metric: Optional[Callable[[Any, Any], float]] = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _frozen(self.kernel))
        object.__setattr__(self, "init", _frozen(self.init))
        outs = tuple(tuple(o) if isinstance(o, (list, np.ndarray)) else o for o in self.outputs)
        object.__setattr__(self, "outputs", outs)
        if self.metric is None:
            numeric = all(isinstance(o, tuple) for o in outs) or all(
                isinstance(o, float) for o in outs)
            object.__setattr__(self, "metric", euclidean_metric if numeric else discrete_metric)

    @property
    def n_states(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.kernel.shape[1])

    def output(self, x: int):
        return self.outputs[int(x)]

    def admissible(self, u) -> bool:
        return isinstance(u, (int, np.integer)) and 0 <= int(u) < self.n_actions

    def sample_init(self, rng: np.random.Generator) -> int:
        return _draw_index(self.init, rng)

    def sample_next(self, x: int, u: int, rng: np.random.Generator) -> int:
        return _draw_index(self.kernel[int(x), int(u)], rng)


def _draw_index(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(p) - 1)


@dataclass(frozen=True, eq=False)
class GaussianLtiGmdp:
    """Linear gMDP ``x(t+1) = A x(t) + B u(t) + B_w w(t)``, ``y = C x``,
    with ``w(t) ~ N(0, I_k)`` independent over time.

    Parameters
    ----------
    A, B, Bw, C : array_like
        System matrices of shapes ``(n, n)``, ``(n, m)``, ``(n, k)`` and
        ``(d, n)``.  ``k = 0`` gives a deterministic model.
    x0 : array_like, optional
        Initial state (mean); zero by default.
    init_cov : array_like, optional
        Initial covariance.  ``None`` means a point initialization.
    input_bound : float, optional
        ``c1`` such that admissible inputs satisfy ``uᵀu <= c1``.
    """

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    x0: Optional[np.ndarray] = None
    init_cov: Optional[np.ndarray] = None
    input_bound: Optional[float] = None

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        n = A.shape[0]
        B = np.array(self.B, dtype=float).reshape(n, -1) if np.size(self.B) else np.zeros((n, 0))
        Bw = np.array(self.Bw, dtype=float).reshape(n, -1) if np.size(self.Bw) else np.zeros((n, 0))
        C = np.array(self.C, dtype=float)
        C = C.reshape(-1, n) if C.size else np.zeros((0, n))
        x0 = np.zeros(n) if self.x0 is None else np.array(self.x0, dtype=float).reshape(-1)
        for name, arr in (("A", A), ("B", B), ("Bw", Bw), ("C", C), ("x0", x0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        factor = None
        if self.init_cov is not None:
            object.__setattr__(self, "init_cov", _frozen(self.init_cov, ndim=2))
            try:
                factor = psd_factor(self.init_cov)
            except ValueError:
                factor = None  # reported by validate_model
        object.__setattr__(self, "_init_factor", factor)
        if self.input_bound is not None:
            object.__setattr__(self, "input_bound", float(self.input_bound))

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B.shape[1])

    @property
    def k(self) -> int:
        return int(self.Bw.shape[1])

    @property
    def d(self) -> int:
        return int(self.C.shape[0])

    @property
    def noise_cov(self) -> np.ndarray:
        """State-noise covariance ``Σ = B_w B_wᵀ``."""
        return self.Bw @ self.Bw.T

    def output(self, x) -> np.ndarray:
        return np.asarray(x, float) @ self.C.T

    def admissible(self, u) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.m,) or not np.all(np.isfinite(u)):
            return False
        if self.input_bound is None:
            return True
        return float(u @ u) <= self.input_bound * (1 + 1e-12) + 1e-15

    def sample_init(self, rng: np.random.Generator) -> np.ndarray:
        if self.init_cov is None:
            return self.x0.copy()
        F = self._init_factor
        if F is None:
            raise ValueError("initial covariance is not positive semi-definite")
        return self.x0 + F @ rng.standard_normal(F.shape[1])

    def step(self, x, u, w) -> np.ndarray:
        """Deterministic update for a given noise vector ``w``."""
        x = np.asarray(x, float)
        return x @ self.A.T + np.asarray(u, float) @ self.B.T + np.asarray(w, float) @ self.Bw.T

    def sample_noise(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.k,) if size is None else tuple(np.atleast_1d(size)) + (self.k,)
        return rng.standard_normal(shape)

    def sample_next(self, x, u, rng: np.random.Generator) -> np.ndarray:
        return self.step(x, u, self.sample_noise(rng))

    def with_(self, **changes) -> "GaussianLtiGmdp":
        """Copy with some fields replaced."""
        base = dict(A=self.A, B=self.B, Bw=self.Bw, C=self.C, x0=self.x0,
                    init_cov=self.init_cov, input_bound=self.input_bound)
        base.update(changes)
        return GaussianLtiGmdp(**base)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``{y : lo <= y <= hi}``; infinite bounds allowed.

    An empty box (some ``lo > hi``) is a legal value and reports
    ``empty = True``.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lo, dtype=float))
        hi = np.atleast_1d(np.array(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds have different shapes")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return int(self.lo.size)

    @property
    def empty(self) -> bool:
        return bool(np.any(self.lo > self.hi))

    def contains(self, y) -> np.ndarray:
        """Membership for a point or a batch of points (last axis = dim)."""
        y = np.asarray(y, float)
        return np.all((y >= self.lo) & (y <= self.hi), axis=-1)

    def shrink(self, eps: float) -> "Box":
        return Box(self.lo + eps, self.hi - eps)


def validate_model(model) -> list[str]:
    """Check the type invariants of a model and describe every violation.

    Returns
    -------
    list of str
        Empty when the model is valid.
    """
    diags: list[str] = []
    if isinstance(model, FiniteGmdp):
        K = model.kernel
        if K.ndim != 3 or K.shape[0] != K.shape[2]:
            return [f"kernel has shape {K.shape}; expected (n_x, n_u, n_x)"]
        if not np.all(np.isfinite(K)):
            diags.append("kernel has non-finite entries")
        for x in range(K.shape[0]):
            for u in range(K.shape[1]):
                row = K[x, u]
                if np.any(row < 0):
                    diags.append(f"kernel[x={x},u={u}] has negative entries")
                s = float(row.sum())
                if abs(s - 1.0) > _SUM_TOL:
                    diags.append(f"kernel[x={x},u={u}] sums to {s:.12g}")
        if model.init.shape != (K.shape[0],):
            diags.append(f"init has shape {model.init.shape}; expected ({K.shape[0]},)")
        else:
            if np.any(model.init < 0):
                diags.append("init has negative entries")
            if abs(float(model.init.sum()) - 1.0) > _SUM_TOL:
                diags.append(f"init sums to {float(model.init.sum()):.12g}")
        if len(model.outputs) != K.shape[0]:
            diags.append(f"outputs defined for {len(model.outputs)} of {K.shape[0]} states")
    elif isinstance(model, GaussianLtiGmdp):
        n = model.A.shape[0]
        if model.A.shape != (n, n):
            diags.append(f"A has shape {model.A.shape}; expected square")
        if model.B.shape[0] != n:
            diags.append(f"B has {model.B.shape[0]} rows; expected {n}")
        if model.Bw.shape[0] != n:
            diags.append(f"Bw has {model.Bw.shape[0]} rows; expected {n}")
        if model.C.shape[1] != n:
            diags.append(f"C has {model.C.shape[1]} columns; expected {n}")
        if model.x0.shape != (n,):
            diags.append(f"initial state has length {model.x0.size}; expected {n}")
        for name in ("A", "B", "Bw", "C", "x0"):
            if not np.all(np.isfinite(getattr(model, name))):
                diags.append(f"{name} has non-finite entries")
        if model.init_cov is not None:
            S = model.init_cov
            if S.shape != (n, n):
                diags.append(f"init covariance has shape {S.shape}; expected ({n}, {n})")
            elif not np.allclose(S, S.T, atol=1e-12, rtol=0):
                diags.append("covariance not symmetric")
            elif np.min(np.linalg.eigvalsh(0.5 * (S + S.T))) < -1e-12 * max(1.0, np.abs(S).max()):
                diags.append("covariance not positive semi-definite")
        if model.input_bound is not None and not model.input_bound > 0:
            diags.append("input bound c1 must be positive")
    else:
        diags.append(f"unsupported model type {type(model).__name__}")
    return diags


# ---------------------------------------------------------------- JSON I/O

def model_to_dict(model) -> dict:
    """Serialize to the shared JSON schema."""
    if isinstance(model, FiniteGmdp):
        outs = [list(o) if isinstance(o, tuple) else o for o in model.outputs]
        return {"type": "finite", "kernel": model.kernel.tolist(),
                "init": model.init.tolist(), "outputs": outs}
    if isinstance(model, GaussianLtiGmdp):
        init: Any = model.x0.tolist()
        if model.init_cov is not None:
            init = {"mean": model.x0.tolist(), "cov": model.init_cov.tolist()}
        return {"type": "lti", "A": model.A.tolist(), "B": model.B.tolist(),
                "Bw": model.Bw.tolist(), "C": model.C.tolist(), "init": init,
                "input_bound": model.input_bound}
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict):
    """Inverse of :func:`model_to_dict`."""
    kind = d.get("type")
    if kind == "finite":
        return FiniteGmdp(np.array(d["kernel"], float), np.array(d["init"], float),
                          tuple(d["outputs"]))
    if kind == "lti":
        A = np.atleast_2d(np.array(d["A"], float))
        n = A.shape[0]
        init = d.get("init")
        x0, cov = None, None
        if isinstance(init, dict):
            x0, cov = init.get("mean"), init.get("cov")
        elif init is not None:
            x0 = init
        return GaussianLtiGmdp(A, np.array(d.get("B", np.zeros((n, 0))), float),
                               np.array(d.get("Bw", np.zeros((n, 0))), float),
                               np.array(d.get("C", np.eye(n)), float),
                               x0=x0, init_cov=cov, input_bound=d.get("input_bound"))
    raise ValueError(f"unknown model type {kind!r}")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
