import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from apsim.coupling import (EquivalencePartition, UnsupportedRegionError, check_lifting,
                            gamma_coupling, gaussian_ball_exceedance, isotropic_ball_bound,
                            min_delta_lifting, quotient_tv, total_variation, truncation_delta)
from apsim.models import Box
from apsim.rng import generator


def prob(n):
    return st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n).map(lambda v: np.array(v) / sum(v))


def test_min_delta_examples():
    assert min_delta_lifting([0.5, 0.5], [0.5, 0.5], np.eye(2, dtype=bool)).delta == pytest.approx(0, abs=1e-12)
    assert min_delta_lifting([0.5, 0.5], [0.7, 0.3], np.eye(2, dtype=bool)).delta == pytest.approx(0.2, abs=1e-12)
    assert min_delta_lifting([1.0], [0.6, 0.4], [[True, False]]).delta == pytest.approx(0.4, abs=1e-12)


def test_check_lifting_examples():
    I = np.eye(2, dtype=bool)
    cm = min_delta_lifting([0.5, 0.5], [0.5, 0.5], I)
    assert check_lifting(cm, [0.5, 0.5], [0.5, 0.5], I, 0.0)[0]
    W = cm.W.copy()
    W[0, 0] += 1e-3
    ok, report = check_lifting(W, [0.5, 0.5], [0.5, 0.5], I, 0.0)
    assert not ok and any("row 0" in r for r in report)
    rng = generator(2)
    D, T = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(3))
    R = rng.random((4, 3)) < 0.5
    cm = min_delta_lifting(D, T, R)
    assert check_lifting(cm, D, T, R, cm.delta)[0]


@given(prob(3), prob(4), st.integers(0, 10_000))
def test_lifting_invariants(D, T, seed):
    R = generator(seed).random((3, 4)) < 0.4
    cm = min_delta_lifting(D, T, R)
    np.testing.assert_allclose(cm.W.sum(axis=1), D, atol=1e-10)
    np.testing.assert_allclose(cm.W.sum(axis=0), T, atol=1e-10)
    assert abs(cm.W[~R].sum() - cm.delta) < 1e-10
    assert cm.W.min() >= 0


@given(prob(3), prob(3), st.integers(0, 10_000))
def test_enlarging_relation_never_increases_delta(D, T, seed):
    rng = generator(seed)
    R = rng.random((3, 3)) < 0.4
    R2 = R | (rng.random((3, 3)) < 0.3)
    assert min_delta_lifting(D, T, R2).delta <= min_delta_lifting(D, T, R).delta + 1e-10


def _brute_force_diagonal_delta(D, T, steps=20):
    # enumerate couplings on a lattice of the free off-diagonal entries (2x2)
    best = 1.0
    for a in np.linspace(0, 1, steps * 10 + 1):
        w00 = min(D[0], T[0]) * a
        W = np.array([[w00, D[0] - w00], [T[0] - w00, 0.0]])
        W[1, 1] = D[1] - W[1, 0]
        if W.min() < -1e-12 or abs(W[:, 1].sum() - T[1]) > 1e-12:
            continue
        best = min(best, 1 - np.trace(W))
    return best


@given(prob(2), prob(2))
def test_diagonal_relation_equals_total_variation(D, T):
    d = min_delta_lifting(D, T, np.eye(2, dtype=bool)).delta
    assert abs(d - total_variation(D, T)) < 1e-10
    assert abs(d - _brute_force_diagonal_delta(D, T)) < 1e-10


def test_gamma_coupling_examples():
    np.testing.assert_allclose(gamma_coupling([0.5, 0.5], [0.5, 0.5]).W, np.diag([0.5, 0.5]))
    np.testing.assert_allclose(gamma_coupling([1, 0], [0, 1]).W, [[0, 1], [0, 0]])
    np.testing.assert_allclose(gamma_coupling([0.7, 0.3], [0.5, 0.5]).W, [[0.5, 0.2], [0, 0.3]])


@given(prob(4), prob(4))
def test_gamma_coupling_off_diagonal_is_tv(p, q):
    g = gamma_coupling(p, q)
    off = g.W.sum() - np.trace(g.W)
    assert abs(off - total_variation(p, q)) < 1e-12
    assert abs(off - min_delta_lifting(p, q, np.eye(4, dtype=bool)).delta) < 1e-10
    np.testing.assert_allclose(g.W.sum(axis=1), p, atol=1e-12)
    np.testing.assert_allclose(g.W.sum(axis=0), q, atol=1e-12)


def test_quotient_tv_examples():
    D, T = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.1, 0.3])
    single = EquivalencePartition.from_labels([0, 1, 2], [0, 1, 2])
    assert abs(quotient_tv(D, T, single) - total_variation(D, T)) < 1e-12
    one = EquivalencePartition.from_labels([0, 0, 0], [0, 0, 0])
    assert quotient_tv(D, T, one) == pytest.approx(0, abs=1e-15)


def random_partition_instance(rng):
    n1, n2 = 6, 6
    k = int(rng.integers(1, 5))
    l1, l2 = rng.integers(0, k, n1), rng.integers(0, k, n2)
    return rng.dirichlet(np.ones(n1)), rng.dirichlet(np.ones(n2)), EquivalencePartition.from_labels(l1, l2)


def test_quotient_tv_equals_lifting_random():
    for i in range(200):
        D, T, part = random_partition_instance(generator(17, i))
        assert abs(quotient_tv(D, T, part) - min_delta_lifting(D, T, part.mask()).delta) < 1e-9


def test_partition_must_cover():
    with pytest.raises(ValueError):
        EquivalencePartition((((0,), (0,)),), 2, 1)


def test_gaussian_ball_exceedance_examples():
    assert abs(gaussian_ball_exceedance(np.eye(2), 2.0) - math.exp(-2)) < 1e-9
    assert gaussian_ball_exceedance(np.eye(2), 0.0) == 1.0


def test_gaussian_ball_exceedance_monte_carlo():
    cov = np.diag([0.07 ** 2, 0.03 ** 2])
    exact = gaussian_ball_exceedance(cov, 0.16)
    z = generator(8).standard_normal((10 ** 7, 2)) * np.sqrt(np.diag(cov))
    mc = np.mean(np.einsum("ij,ij->i", z, z) > 0.16 ** 2)
    assert abs(exact - mc) < 4 * math.sqrt(exact * (1 - exact) / 1e7)
    # the caption value is the isotropic chi-square bound, not the exact tail
    assert abs(isotropic_ball_bound(cov, 0.16) - 0.073) < 0.005
    assert exact < isotropic_ball_bound(cov, 0.16)


@given(st.floats(0.01, 2), st.floats(0.01, 2), st.floats(0.0, 3.0))
def test_isotropic_bound_dominates_exact(s1, s2, r):
    cov = np.diag([s1 ** 2, s2 ** 2])
    assert gaussian_ball_exceedance(cov, r) <= isotropic_ball_bound(cov, r) + 1e-9


def test_truncation_delta_examples():
    assert truncation_delta([0.0], [[1.0]], Box([-np.inf], [np.inf])) == pytest.approx(0, abs=1e-15)
    assert abs(truncation_delta([0.0], [[1.0]], Box([-1.959964], [1.959964])) - 0.05) < 1e-6
    assert abs(truncation_delta([0, 0], np.eye(2), Box([-2, -2], [2, 2])) - (1 - 0.954500 ** 2)) < 1e-6
    with pytest.raises(UnsupportedRegionError):
        truncation_delta([0, 0], [[1, 0.5], [0.5, 1]], Box([-1, -1], [1, 1]))
