"""Grid abstraction and bounded-horizon safety value iteration.

The model is first brought to decorrelated coordinates ``z = T x`` in
which the one-step noise is standard normal, so the probability of
landing in an axis-aligned grid cell factorizes into one-dimensional CDF
differences.  Each backup is then a sequence of small dense contractions
over the grid axes; no cell-to-cell matrix is stored.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .linalg import solve_discrete_lyapunov
from .models import Box, GaussianLtiGmdp
from .strategy import ControlStrategy, simulate_lti_batch

__all__ = [
    "Decorrelation", "Grid", "GridValueFunction", "LookupStrategy",
    "shrink_safe_set", "expand_safe_set", "decorrelate", "lipschitz_constants",
    "abstraction_error", "transition_prob", "value_iteration_safety",
    "grid_to_strategy", "default_grid", "quantized_inputs", "balanced_counts",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def shrink_safe_set(box: Box, epsilon: float) -> Box:
    """Contract every interval of ``box`` by ``epsilon`` on both ends.

    The result may be empty; check ``Box.empty``.
    """
    return Box(box.lo + epsilon, box.hi - epsilon)


def expand_safe_set(box: Box, epsilon: float) -> Box:
    """Inflate every interval of ``box`` by ``epsilon`` on both ends."""
    return Box(box.lo - epsilon, box.hi + epsilon)


@dataclass(frozen=True, eq=False)
class Decorrelation:
    """Change of coordinates ``z = T x`` with ``T Σ Tᵀ = I``."""

    T: np.ndarray
    Tinv: np.ndarray

    def to_z(self, x) -> np.ndarray:
        return np.asarray(x, float) @ self.T.T

    def to_x(self, z) -> np.ndarray:
        return np.asarray(z, float) @ self.Tinv.T

    def model(self, model: GaussianLtiGmdp) -> GaussianLtiGmdp:
        T, Ti = self.T, self.Tinv
        return GaussianLtiGmdp(T @ model.A @ Ti, T @ model.B, T @ model.Bw, model.C @ Ti,
                               x0=T @ model.x0, input_bound=model.input_bound)


def _noise_factor(model: GaussianLtiGmdp) -> np.ndarray:
    S = model.noise_cov
    try:
        L = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        L = None
    if L is None or np.min(np.diag(L)) <= 1e-12 * math.sqrt(max(np.abs(np.diag(S)).max(), 1e-300)):
        raise np.linalg.LinAlgError("noise covariance B_w B_wᵀ is singular; reduce the noise "
                                    "dimension (or the state dimension) first")
    return L


def decorrelate(model: GaussianLtiGmdp, align_output: bool = True) -> Decorrelation:
    """Whitening transform for the model noise.

    ``T = U L⁻¹`` with ``L Lᵀ = B_w B_wᵀ``.  For a single output and
    ``align_output=True`` the rotation ``U`` (a Householder reflection) makes
    the output proportional to the last ``z`` coordinate, so an output
    interval is an axis-aligned slab of the grid.
    """
    L = _noise_factor(model)
    n = model.n
    U = np.eye(n)
    if align_output and model.d == 1 and n > 1:
        c = (model.C @ L).reshape(-1)
        target = np.zeros(n)
        target[-1] = np.linalg.norm(c)
        v = c - target
        if np.linalg.norm(v) > 1e-14 * max(1.0, target[-1]):
            U = np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)
    T = U @ np.linalg.inv(L)
    Tinv = L @ U.T
    return Decorrelation(T, Tinv)


def lipschitz_constants(model: GaussianLtiGmdp) -> np.ndarray:
    """Per-axis constants ``H_d = (2/√(2π)) Σ_i |(L A)_{i d}|``, ``LᵀL = Σ⁻¹``.

    They bound the total-variation change of the one-step kernel,
    ``‖t(·|x) − t(·|x')‖₁ <= Σ_d H_d |x_d − x'_d|``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``Σ = B_w B_wᵀ`` is singular.
    """
    Lc = _noise_factor(model)
    abar = np.linalg.solve(Lc, model.A)
    return 2.0 * _INV_SQRT_2PI * np.abs(abar).sum(axis=0)


def abstraction_error(H, widths, N: int) -> float:
    """``E = N Σ_d H_d Δ_d``."""
    H = np.asarray(H, float).reshape(-1)
    widths = np.broadcast_to(np.asarray(widths, float), H.shape)
    return float(N * np.dot(H, widths))


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on the box ``[lo, hi]`` with ``counts`` cells per axis."""

    lo: np.ndarray
    hi: np.ndarray
    counts: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lo, float))
        hi = np.atleast_1d(np.array(self.hi, float))
        counts = tuple(int(c) for c in np.broadcast_to(np.asarray(self.counts), lo.shape))
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
            raise ValueError("grid bounds must be finite with hi > lo")
        if min(counts) < 1:
            raise ValueError("every axis needs at least one cell")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_widths(cls, lo, hi, widths) -> "Grid":
        """Grid with cells of (at most) the given widths; the box is kept."""
        lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
        w = np.broadcast_to(np.asarray(widths, float), lo.shape)
        counts = tuple(int(math.ceil((h - l) / x - 1e-9)) for l, h, x in zip(lo, hi, w))
        return cls(lo, hi, counts)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.counts)

    def edges(self, d: int) -> np.ndarray:
        return np.linspace(self.lo[d], self.hi[d], self.counts[d] + 1)

    def axis_centers(self, d: int) -> np.ndarray:
        e = self.edges(d)
        return 0.5 * (e[:-1] + e[1:])

    def centers(self) -> np.ndarray:
        """All cell centers, C order, shape (n_cells, dim)."""
        axes = np.meshgrid(*[self.axis_centers(d) for d in range(self.dim)], indexing="ij")
        return np.stack([a.reshape(-1) for a in axes], axis=1)

    def locate(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Cell multi-index of points (last axis = dim), clipped to the
        nearest cell, and a flag telling whether the point was inside."""
        z = np.asarray(z, float)
        raw = np.floor((z - self.lo) / self.widths).astype(np.int64)
        hi_idx = np.asarray(self.counts) - 1
        inside = np.all((z >= self.lo) & (z <= self.hi), axis=-1)
        # a point exactly on the upper boundary belongs to the last cell
        idx = np.clip(raw, 0, hi_idx)
        return idx, inside

    def flat_index(self, idx) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(idx), -1, 0)), self.counts)


def quantized_inputs(c1: float, m: int = 1, count: int = 21) -> np.ndarray:
    """``count`` evenly spaced inputs on ``[-√c1, √c1]`` (scalar input).

    For ``m > 1`` the tensor grid over ``[-√c1, √c1]^m`` is intersected with
    the ball ``uᵀu <= c1``.
    """
    r = math.sqrt(c1)
    axis = np.linspace(-r, r, count)
    if m == 1:
        return axis[:, None]
    pts = np.stack(np.meshgrid(*[axis] * m, indexing="ij"), -1).reshape(-1, m)
    return pts[np.einsum("ij,ij->i", pts, pts) <= c1 * (1 + 1e-12)]


def transition_prob(model: GaussianLtiGmdp, x, u, cell: Box, transform: Optional[Decorrelation] = None) -> float:
    """Mass of ``N(A x + B u, Σ)`` on ``cell``.

    ``cell`` is a box in the decorrelated coordinates of ``transform``
    (default :func:`decorrelate`); ``x`` is in the model's own coordinates.
    """
    tr = decorrelate(model) if transform is None else transform
    mz = tr.to_z(np.asarray(x, float) @ model.A.T + np.atleast_1d(np.asarray(u, float)) @ model.B.T)
    p = 1.0
    for mu, lo, hi in zip(mz, cell.lo, cell.hi):
        p *= float(special.ndtr(hi - mu) - special.ndtr(lo - mu)) if hi < np.inf or lo > -np.inf else 1.0
    return p


@dataclass(frozen=True, eq=False)
class GridValueFunction:
    """Safety probabilities on a grid.

    Attributes
    ----------
    values : ndarray, shape (N+1, *grid.shape)
        ``values[t]`` is ``V_t``; ``values[N]`` is the safe-cell indicator.
    policy : ndarray of int, shape (N, *grid.shape)
        Index into ``inputs`` of the maximizing input.
    """

    values: np.ndarray
    policy: np.ndarray
    inputs: np.ndarray
    error_bound: float
    horizon: int
    safe_box: Box
    grid: Grid
    transform: Decorrelation
    lipschitz: np.ndarray

    def value_at(self, x, t: int = 0) -> np.ndarray:
        idx, _ = self.grid.locate(self.transform.to_z(x))
        return self.values[t][tuple(np.moveaxis(idx, -1, 0))]

    def to_csv(self, t: int = 0, provenance: Optional[dict] = None) -> str:
        """Cell centers (decorrelated coordinates), ``V_t`` and, for
        ``t < N``, the chosen input."""
        buf = io.StringIO()
        for k in sorted(provenance or {}):
            buf.write(f"#{k}={provenance[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        D = self.grid.dim
        m = self.inputs.shape[1]
        head = [f"z_{d+1}" for d in range(D)] + ["value"]
        if t < self.horizon:
            head += [f"u_{j+1}" for j in range(m)]
        w.writerow(head)
        cen = self.grid.centers()
        vals = self.values[t].reshape(-1)
        pol = self.policy[t].reshape(-1) if t < self.horizon else None
        for i in range(cen.shape[0]):
            row = [repr(float(c)) for c in cen[i]] + [repr(float(vals[i]))]
            if pol is not None:
                row += [repr(float(v)) for v in self.inputs[pol[i]]]
            w.writerow(row)
        return buf.getvalue()

    def policy_csv(self, provenance: Optional[dict] = None) -> str:
        """Policy table ``t, cell indices..., input index, inputs...``."""
        buf = io.StringIO()
        for k in sorted(provenance or {}):
            buf.write(f"#{k}={provenance[k]}\n")
        w = csv.writer(buf, lineterminator="\n")
        D = self.grid.dim
        m = self.inputs.shape[1]
        w.writerow(["t"] + [f"i_{d+1}" for d in range(D)] + ["input_index"] + [f"u_{j+1}" for j in range(m)])
        idx = np.stack(np.unravel_index(np.arange(self.grid.n_cells), self.grid.shape), 1)
        for t in range(self.horizon):
            pol = self.policy[t].reshape(-1)
            for c in range(self.grid.n_cells):
                w.writerow([t] + [int(i) for i in idx[c]] + [int(pol[c])]
                           + [repr(float(v)) for v in self.inputs[pol[c]]])
        return buf.getvalue()

    def metadata(self) -> dict:
        """JSON-serializable description of grid, transform and inputs."""
        return {"lo": self.grid.lo.tolist(), "hi": self.grid.hi.tolist(),
                "counts": list(self.grid.counts), "T": self.transform.T.tolist(),
                "Tinv": self.transform.Tinv.tolist(), "inputs": self.inputs.tolist(),
                "horizon": self.horizon, "error_bound": self.error_bound,
                "safe_lo": self.safe_box.lo.tolist(), "safe_hi": self.safe_box.hi.tolist(),
                "lipschitz": self.lipschitz.tolist()}

    def to_dict(self) -> dict:
        """Metadata plus the value and policy arrays (flattened, C order)."""
        d = self.metadata()
        d["values"] = self.values.reshape(self.horizon + 1, -1).tolist()
        d["policy"] = self.policy.reshape(self.horizon, -1).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridValueFunction":
        grid = Grid(d["lo"], d["hi"], tuple(d["counts"]))
        N = int(d["horizon"])
        values = np.array(d["values"], float).reshape((N + 1,) + grid.shape)
        policy = np.array(d["policy"], dtype=np.int64).reshape((N,) + grid.shape)
        return cls(values, policy, np.array(d["inputs"], float), float(d["error_bound"]), N,
                   Box(d["safe_lo"], d["safe_hi"]), grid,
                   Decorrelation(np.array(d["T"], float), np.array(d["Tinv"], float)),
                   np.array(d["lipschitz"], float))


def _axis_probs(edges: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``P(edges[i] <= mu + Z < edges[i+1])`` for every mean, shape (len(mu), len(edges)-1)."""
    cdf = special.ndtr(edges[None, :] - mu[:, None])
    return np.diff(cdf, axis=1)


def _expect(V: np.ndarray, probs: list[np.ndarray]) -> np.ndarray:
    """``Σ_{i_1..i_D} Π_d probs[d][c, i_d] V[i_1..i_D]`` for every row c."""
    cells = probs[0].shape[0]
    X = probs[0] @ V.reshape(V.shape[0], -1)            # (cells, rest)
    for d in range(1, len(probs)):
        if d == len(probs) - 1:
            return np.einsum("ci,ci->c", X, probs[d])
        X = X.reshape(cells, V.shape[d], -1)
        X = np.einsum("cir,ci->cr", X, probs[d])
    return X.reshape(cells)


def value_iteration_safety(model: GaussianLtiGmdp, grid: Grid, safe_box: Box, inputs, N: int,
                           transform: Optional[Decorrelation] = None,
                           cache: bool = True, cache_limit_bytes: int = 512 * 2 ** 20) -> GridValueFunction:
    """Maximal probability of keeping the output in ``safe_box`` for ``N`` steps.

    ``grid`` lives in the decorrelated coordinates of ``transform``.  A
    cell is safe when the output at its center lies in ``safe_box``;
    probability mass leaving the grid counts as failure, so the result is a
    lower bound up to the abstraction error ``E``.

    Parameters
    ----------
    inputs : array_like, shape (n_u, m)
        Finite input set; ties in the maximization go to the lowest index.
    cache : bool
        Keep the per-axis transition probabilities across time steps for as
        many inputs as fit in ``cache_limit_bytes``.
    """
    tr = decorrelate(model) if transform is None else transform
    mz = tr.model(model)
    inputs = np.asarray(inputs, float).reshape(-1, model.m)
    if inputs.shape[0] == 0:
        raise ValueError("input set is empty")
    D = grid.dim
    if D != model.n:
        raise ValueError("grid dimension differs from the state dimension")
    centers = grid.centers()
    safe = safe_box.contains(centers @ mz.C.T).reshape(grid.shape).astype(float)
    edges = [grid.edges(d) for d in range(D)]
    drift = centers @ mz.A.T
    shift = inputs @ mz.B.T
    H = lipschitz_constants(mz)
    E = abstraction_error(H, grid.widths, N)

    per_input_bytes = 8 * grid.n_cells * sum(grid.counts)
    cache_slots = cache_limit_bytes // per_input_bytes if cache else 0
    store: dict[int, list[np.ndarray]] = {}

    def probs_for(j):
        if j in store:
            return store[j]
        mean = drift + shift[j]
        p = [_axis_probs(edges[d], mean[:, d]) for d in range(D)]
        if len(store) < cache_slots:        # inputs beyond the budget are recomputed each step
            store[j] = p
        return p

    values = np.empty((N + 1,) + grid.shape)
    policy = np.zeros((N,) + grid.shape, dtype=np.int64)
    values[N] = safe
    for t in range(N - 1, -1, -1):
        Vn = values[t + 1]
        Qs = np.empty((inputs.shape[0], grid.n_cells))
        for j in range(inputs.shape[0]):
            Qs[j] = _expect(Vn, probs_for(j))
        best = np.argmax(Qs, axis=0)
        values[t] = (safe.reshape(-1) * Qs[best, np.arange(grid.n_cells)]).reshape(grid.shape)
        policy[t] = best.reshape(grid.shape)
    np.clip(values, 0.0, 1.0, out=values)
    return GridValueFunction(values, policy, inputs, E, N, safe_box, grid, tr, H)


class LookupStrategy(ControlStrategy):
    """Markov strategy that reads the input from a grid policy.

    States outside the grid use the nearest cell; the controller state
    records whether that happened.
    """

    def __init__(self, value_fn: GridValueFunction):
        self.vf = value_fn
        self.horizon = value_fn.horizon

    def next_state(self, t, xc, x, rng):
        _, inside = self.vf.grid.locate(self.vf.transform.to_z(x))
        return (np.array(x, float), bool(inside))

    def action(self, t, xc, rng):
        return self.actions_batch(t, np.asarray(xc[0], float)[None, :])[0]

    def actions_batch(self, t: int, X: np.ndarray) -> np.ndarray:
        idx, _ = self.vf.grid.locate(self.vf.transform.to_z(X))
        pol = self.vf.policy[t][tuple(np.moveaxis(idx, -1, 0))]
        return self.vf.inputs[pol]

    def out_of_grid(self, X: np.ndarray) -> np.ndarray:
        return ~self.vf.grid.locate(self.vf.transform.to_z(X))[1]

    def simulate_batch(self, model: GaussianLtiGmdp, horizon: int, trials: int, seed: int,
                       first_trial: int = 0) -> dict:
        out = simulate_lti_batch(model, self.actions_batch, horizon, trials, seed, first_trial)
        out["out_of_grid"] = np.array([self.out_of_grid(out["states"][:, t]) for t in range(horizon)]).T
        return out


def grid_to_strategy(value_fn: GridValueFunction, grid: Optional[Grid] = None) -> LookupStrategy:
    """Lookup strategy realizing the policy of ``value_fn``."""
    if grid is not None and (grid.counts != value_fn.grid.counts
                             or not np.allclose(grid.lo, value_fn.grid.lo)
                             or not np.allclose(grid.hi, value_fn.grid.hi)):
        raise ValueError("grid does not match the value function")
    return LookupStrategy(value_fn)


def default_grid(model: GaussianLtiGmdp, safe_box: Box, cells_per_axis, c1: Optional[float] = None,
                 transform: Optional[Decorrelation] = None, n_std: float = 3.0) -> Grid:
    """Grid box in decorrelated coordinates.

    For a single output aligned with the last axis, that axis tiles exactly
    the safe output interval (cells beyond it are unsafe and behave like
    out-of-grid mass).  Every other axis spans ``n_std`` stationary standard
    deviations plus the largest steady-state offset that inputs with
    ``uᵀu <= c1`` can cause.
    """
    tr = decorrelate(model) if transform is None else transform
    mz = tr.model(model)
    n = mz.n
    P = solve_discrete_lyapunov(mz.A, mz.Bw @ mz.Bw.T)
    half = n_std * np.sqrt(np.diag(P))
    if c1:
        # ‖(I − A)⁻¹ B u‖ per axis for |u| <= √c1, a steady-state reach bound
        G = np.linalg.solve(np.eye(n) - mz.A, mz.B)
        half = half + math.sqrt(c1) * np.sqrt((G ** 2).sum(axis=1))
    lo, hi = -half, half.copy()
    aligned = mz.d == 1 and np.allclose(mz.C[0, :-1], 0.0, atol=1e-12 * max(1.0, abs(mz.C[0, -1])))
    if aligned and safe_box.dim == 1:
        g = mz.C[0, -1]
        a, b = sorted((safe_box.lo[0] / g, safe_box.hi[0] / g))
        lo = lo.copy()
        lo[-1], hi[-1] = a, b
    return Grid(lo, hi, tuple(np.broadcast_to(np.asarray(cells_per_axis), (n,))))


def balanced_counts(H, lo, hi, total_cells: int) -> tuple:
    """Per-axis cell counts with about ``total_cells`` cells in all that
    equalize the error contributions ``H_d Δ_d`` (minimizing ``E`` for the
    given cell budget).  Axes with ``H_d = 0`` get a single cell."""
    H = np.asarray(H, float)
    L = np.asarray(hi, float) - np.asarray(lo, float)
    active = H > 0
    counts = np.ones(H.size, dtype=np.int64)
    if np.any(active):
        ha = H[active] * L[active]
        # n_d ∝ H_d L_d with Π n_d = total
        scale = (total_cells / np.prod(ha)) ** (1.0 / ha.size)
        counts[active] = np.maximum(1, np.round(ha * scale)).astype(np.int64)
    return tuple(int(c) for c in counts)
