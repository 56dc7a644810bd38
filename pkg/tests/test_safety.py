import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apsim.linalg import spectral_radius
from apsim.models import Box, GaussianLtiGmdp
from apsim.rng import generator
from apsim.safety import (Grid, GridValueFunction, abstraction_error, balanced_counts, decorrelate,
                          default_grid, expand_safe_set, grid_to_strategy, lipschitz_constants,
                          quantized_inputs, shrink_safe_set, transition_prob, value_iteration_safety)
from apsim.validate import monte_carlo_safety

INF = np.inf


def scalar_model(a=0.9, sigma=0.1):
    return GaussianLtiGmdp([[a]], [[1.0]], [[sigma]], [[1.0]], input_bound=0.04)


def random_model(rng):
    A = rng.standard_normal((2, 2))
    A *= rng.uniform(0.3, 0.95) / spectral_radius(A)
    Bw = np.diag(rng.uniform(0.1, 0.4, 2)) + 0.05 * rng.standard_normal((2, 2))
    return GaussianLtiGmdp(A, rng.standard_normal((2, 1)), Bw, rng.standard_normal((1, 2)),
                           input_bound=0.04)


def test_shrink_and_expand():
    s = shrink_safe_set(Box([-0.5], [0.5]), 0.2014)
    np.testing.assert_allclose([s.lo[0], s.hi[0]], [-0.2986, 0.2986], atol=1e-12)
    s0 = shrink_safe_set(Box([-0.5], [0.5]), 0.0)
    np.testing.assert_array_equal(s0.lo, [-0.5])
    assert shrink_safe_set(Box([-0.5], [0.5]), 0.6).empty
    e = expand_safe_set(Box([-0.5], [0.5]), 0.1)
    np.testing.assert_allclose([e.lo[0], e.hi[0]], [-0.6, 0.6])


def test_lipschitz_examples():
    m0 = GaussianLtiGmdp(np.zeros((2, 2)), [[1.0], [0.0]], np.eye(2), [[1.0, 0.0]])
    np.testing.assert_array_equal(lipschitz_constants(m0), [0.0, 0.0])
    mi = m0.with_(A=np.eye(2))
    np.testing.assert_allclose(lipschitz_constants(mi), [2 / math.sqrt(2 * math.pi)] * 2, rtol=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        lipschitz_constants(m0.with_(Bw=[[1.0], [0.0]]))


def test_office_lipschitz_finite(office):
    a = office["abstract"]
    H = lipschitz_constants(decorrelate(a).model(a))
    assert np.all(np.isfinite(H)) and np.all(H > 0)


def test_abstraction_error_examples():
    assert abstraction_error([0.8, 0.8], [0.0, 0.0], 6) == 0.0
    assert abstraction_error([0.8, 0.8], [0.01, 0.01], 6) == pytest.approx(0.096)


def test_abstraction_error_at_implied_widths(office):
    # back-solve balanced widths that give E = 0.0983 with 2.6e7 cells
    a = office["abstract"]
    H = lipschitz_constants(decorrelate(a).model(a))
    E, N, cells = 0.0983, 6, 2.6e7
    widths = E / (N * H.size * H)
    assert abs(abstraction_error(H, widths, N) - E) <= 0.02 * E
    implied_box = cells * np.prod(widths)
    assert np.isfinite(implied_box) and implied_box > 0


def test_transition_prob_examples():
    m = scalar_model(0.0, 0.3)
    assert transition_prob(m, [0.2], [0.0], Box([-INF], [INF])) == pytest.approx(1.0)
    tr = decorrelate(m)
    w = 1.959964
    p = transition_prob(m, [0.0], [0.1], Box([0.1 / 0.3 - w], [0.1 / 0.3 + w]), tr)
    assert abs(p - 0.95) < 1e-6


def test_transition_probs_normalize():
    m = random_model(generator(3))
    tr = decorrelate(m)
    g = Grid([-2, -3], [2, 1], (6, 5))
    x, u = np.array([0.3, -0.1]), np.array([0.1])
    total = 0.0
    for c in g.centers():
        lo, hi = c - g.widths / 2, c + g.widths / 2
        total += transition_prob(m, x, u, Box(lo, hi), tr)
    inside = transition_prob(m, x, u, Box(g.lo, g.hi), tr)
    outside = 1.0 - inside
    assert abs(total + outside - 1.0) < 1e-9


def test_horizon_zero_is_safe_indicator():
    m = random_model(generator(4))
    tr = decorrelate(m)
    safe = Box([-0.5], [0.5])
    g = default_grid(m, safe, 12, c1=0.04, transform=tr)
    vf = value_iteration_safety(m, g, safe, quantized_inputs(0.04), 0, transform=tr)
    y = g.centers() @ tr.model(m).C.T
    np.testing.assert_array_equal(vf.values[0].reshape(-1), safe.contains(y).astype(float))


def test_absorbing_fixed_point():
    m = GaussianLtiGmdp([[0.0]], [[0.0]], [[1e-9]], [[1.0]])
    tr = decorrelate(m)
    g = Grid([-5e9], [5e9], (5,))
    vf = value_iteration_safety(m, g, Box([-1], [1]), [[0.0]], 4, transform=tr)
    assert vf.value_at(np.zeros(1)) == pytest.approx(1.0, abs=1e-12)


def test_scalar_value_matches_monte_carlo():
    m = scalar_model()
    safe = Box([-1], [1])
    tr = decorrelate(m)
    g = Grid.from_widths([-10.0], [10.0], [0.1])      # Δ = 0.01 in x
    vf = value_iteration_safety(m, g, safe, quantized_inputs(0.04), 6, transform=tr)
    rep = monte_carlo_safety(m, grid_to_strategy(vf), safe, 6, 1_000_000, seed=5)
    v0 = float(vf.value_at(np.zeros(1)))
    assert abs(v0 - rep.estimate) <= vf.error_bound + 3 * rep.standard_error


def test_constant_policy_gives_constant_strategy():
    m = scalar_model(0.5, 0.5)
    tr = decorrelate(m)
    g = Grid([-2.0], [2.0], (8,))
    vf = value_iteration_safety(m, g, Box([-1], [1]), [[0.1]], 3, transform=tr)
    s = grid_to_strategy(vf)
    X = np.linspace(-3, 3, 25)[:, None]
    for t in range(3):
        np.testing.assert_array_equal(s.actions_batch(t, X), np.full((25, 1), 0.1))


def test_replay_on_centers_reproduces_argmax():
    m = random_model(generator(6))
    tr = decorrelate(m)
    safe = Box([-0.6], [0.6])
    g = default_grid(m, safe, 15, c1=0.04, transform=tr)
    vf = value_iteration_safety(m, g, safe, quantized_inputs(0.04, 1, 7), 3, transform=tr)
    s = grid_to_strategy(vf)
    X = tr.to_x(g.centers())
    for t in range(3):
        np.testing.assert_array_equal(s.actions_batch(t, X), vf.inputs[vf.policy[t].reshape(-1)])
    with pytest.raises(ValueError):
        grid_to_strategy(vf, Grid(g.lo, g.hi, (3, 3)))


def test_case2_strategy_matches_value(case2_run):
    v = case2_run["verify"]
    lo, hi = v["abstract_modified_interval"]
    assert abs(v["V0"] - v["abstract_modified_fraction"]) <= v["E"] + (hi - lo)


def test_value_function_roundtrip():
    m = random_model(generator(7))
    tr = decorrelate(m)
    safe = Box([-0.5], [0.5])
    g = default_grid(m, safe, 6, c1=0.04, transform=tr)
    vf = value_iteration_safety(m, g, safe, quantized_inputs(0.04, 1, 5), 2, transform=tr)
    back = GridValueFunction.from_dict(vf.to_dict())
    np.testing.assert_array_equal(back.values, vf.values)
    np.testing.assert_array_equal(back.policy, vf.policy)
    assert back.error_bound == vf.error_bound
    assert vf.to_csv(0, {"seed": 1}).startswith("#seed=1\n")


def test_balanced_counts_equalize_terms():
    H = np.array([0.1417, 6.731])
    lo, hi = np.array([-3.0, -0.3]), np.array([3.0, 0.3])
    counts = balanced_counts(H, lo, hi, 10_000)
    terms = H * (hi - lo) / np.array(counts)
    assert terms.max() / terms.min() < 1.1
    assert abs(np.prod(counts) - 10_000) / 10_000 < 0.05


def _vi(m, tr, g, safe, inputs, N):
    return value_iteration_safety(m, g, safe, inputs, N, transform=tr)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(0.2, 0.8), st.floats(0.05, 0.5))
def test_larger_safe_set_dominates(seed, half, extra):
    m = random_model(generator(seed))
    tr = decorrelate(m)
    small, big = Box([-half], [half]), Box([-half - extra], [half + extra])
    g = default_grid(m, big, 10, c1=0.04, transform=tr)
    u = quantized_inputs(0.04, 1, 5)
    assert np.all(_vi(m, tr, g, big, u, 3).values >= _vi(m, tr, g, small, u, 3).values - 1e-12)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_larger_input_set_dominates(seed):
    m = random_model(generator(seed))
    tr = decorrelate(m)
    safe = Box([-0.5], [0.5])
    g = default_grid(m, safe, 10, c1=0.04, transform=tr)
    u_small = quantized_inputs(0.04, 1, 3)
    u_big = quantized_inputs(0.04, 1, 5)      # contains the three inputs of u_small
    assert np.all(_vi(m, tr, g, safe, u_big, 3).values[0] >= _vi(m, tr, g, safe, u_small, 3).values[0] - 1e-12)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_enlarging_grid_box_never_decreases_interior(seed, pad):
    m = random_model(generator(seed))
    tr = decorrelate(m)
    safe = Box([-0.5], [0.5])
    g = default_grid(m, safe, 8, c1=0.04, transform=tr)
    w = g.widths
    big = Grid(g.lo - pad * w, g.hi + pad * w, tuple(np.array(g.counts) + 2 * pad))
    u = quantized_inputs(0.04, 1, 5)
    v_small = _vi(m, tr, g, safe, u, 3).values[0]
    v_big = _vi(m, tr, big, safe, u, 3).values[0]
    inner = v_big[pad:-pad, pad:-pad]
    assert np.all(inner >= v_small - 1e-12)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_halving_widths_halves_error_and_stays_consistent(seed):
    rng = generator(seed)
    a = rng.uniform(0.3, 0.7)
    m = scalar_model(a, 0.5)
    tr = decorrelate(m)
    safe = Box([-1], [1])
    coarse = Grid([-2.0], [2.0], (50,))
    fine = Grid([-2.0], [2.0], (100,))
    u = quantized_inputs(0.04, 1, 5)
    vc, vf = _vi(m, tr, coarse, safe, u, 6), _vi(m, tr, fine, safe, u, 6)
    assert vf.error_bound == pytest.approx(vc.error_bound / 2, rel=1e-12)
    x = tr.to_x(fine.centers())
    assert np.all(np.abs(vc.value_at(x) - vf.value_at(x)) <= vc.error_bound + vf.error_bound)
