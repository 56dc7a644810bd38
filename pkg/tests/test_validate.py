import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apsim.models import Box, FiniteGmdp, GaussianLtiGmdp
from apsim.refine import FiniteInterface, RecoveryPolicy, RefinedStrategy
from apsim.rng import generator
from apsim.strategy import FeedbackPolicy, FiniteMemoryStrategy, MarkovPolicy
from apsim.validate import (StateExplosionError, check_sandwich, enumerate_event_prob, monte_carlo_safety,
                            output_word_distribution, paired_difference_ci, random_approx_pair,
                            random_exact_pair, sandwich_suite, wilson_interval)


def test_wilson_interval():
    assert wilson_interval(100, 100) == (0.97, 1.0)
    assert wilson_interval(0, 1000) == (0.0, 0.003)
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)
    assert wilson_interval(50, 100) == pytest.approx((0.4038, 0.5962), abs=1e-4)
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


@settings(max_examples=50)
@given(st.integers(1, 10_000), st.data())
def test_estimate_inside_interval(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1


def test_always_safe_system():
    m = GaussianLtiGmdp([[0.5]], [[1.0]], [], [[1.0]])
    rep = monte_carlo_safety(m, FeedbackPolicy(lambda t, x: 0 * np.asarray(x), 5), Box([-1], [1]), 5, 1000, 1)
    assert rep.estimate == 1.0 and rep.interval == (0.997, 1.0)
    assert rep.successes <= rep.trials


def coin():
    K = np.zeros((2, 1, 2))
    K[0, 0] = [0.5, 0.5]
    K[1, 0] = [0.0, 1.0]
    return FiniteGmdp(K, [1.0, 0.0], ["a", "b"])


def test_bernoulli_half():
    rep = monte_carlo_safety(coin(), MarkovPolicy(np.zeros((1, 2), dtype=int)), lambda y: y == "a", 1,
                             100_000, 4)
    assert abs(rep.estimate - 0.5) <= 0.01
    assert rep.interval[0] <= rep.estimate <= rep.interval[1]


def test_enumeration_examples():
    K = np.zeros((2, 1, 2))
    K[0, 0] = [0.9, 0.1]
    K[1, 0] = [0.1, 0.9]
    m = FiniteGmdp(K, [1.0, 0.0], ["safe", "unsafe"])
    pol = MarkovPolicy(np.zeros((2, 2), dtype=int))
    assert enumerate_event_prob(m, pol, lambda w: True, 2) == pytest.approx(1.0, abs=1e-15)
    assert enumerate_event_prob(m, pol, lambda w: all(y == "safe" for y in w), 2) == pytest.approx(0.81)
    assert enumerate_event_prob(m, pol, {("safe", "safe", "safe")}, 2) == pytest.approx(0.81)
    with pytest.raises(StateExplosionError):
        enumerate_event_prob(m, pol, lambda w: True, 2, limit=4)


@pytest.mark.parametrize("seed", range(4))
def test_enumeration_matches_monte_carlo(seed):
    rng = generator(100 + seed)
    n, nu = 4, 2
    m = FiniteGmdp(rng.dirichlet(np.ones(n), size=(n, nu)), rng.dirichlet(np.ones(n)), ["a", "a", "b", "a"])
    C = FiniteMemoryStrategy.random(rng, n, nu, 2, 3)
    p = enumerate_event_prob(m, C, lambda w: "b" not in w, 3)
    rep = monte_carlo_safety(m, C, lambda y: y != "b", 3, 4000, seed)
    assert abs(rep.estimate - p) <= 4 * math.sqrt(p * (1 - p) / 4000) + 1e-12


def test_check_sandwich_cases():
    assert check_sandwich(0.9, 0.95, 0.1, 1.0)
    assert check_sandwich(0.4, 0.4, 0.4, 0.0)
    assert not check_sandwich(0.4, 0.4, 0.4 + 1e-9, 0.0)
    assert not check_sandwich(0.4, 0.6, 0.3, 0.05)
    assert check_sandwich(0.4, 0.6, 0.3, 0.1)
    with pytest.raises(ValueError):
        check_sandwich(1.2, 0.5, 0.5, 0.0)


def test_paired_ci():
    a = np.array([1, 1, 0, 1] * 250, bool)
    mean, half = paired_difference_ci(a, a)
    assert mean == 0.0 and half == pytest.approx(3 / 1000)
    b = a.copy()
    b[:100] = ~b[:100]
    mean, half = paired_difference_ci(a, b)
    d = a.astype(float) - b.astype(float)
    assert mean == pytest.approx(d.mean()) and half == pytest.approx(1.959964 * d.std(ddof=1) / math.sqrt(1000), rel=1e-6)


def test_small_sandwich_suite():
    res = sandwich_suite(40)
    assert all(r.passed for r in res)
    assert any(r.delta > 0 for r in res if not r.exact)


def test_wrong_refinement_breaks_sandwich():
    """Negative control: an interface that plays the wrong concrete action."""
    failures, tried = 0, 0
    for i in range(30):
        rng = generator(20240502, i)
        pair = random_exact_pair(rng)
        nu = pair.abstract.n_actions
        if nu < 2:
            continue
        tried += 1
        wrong = FiniteInterface((pair.interface.table + 1) % nu)
        C1 = FiniteMemoryStrategy.random(rng, pair.abstract.n_states, nu, 1, 3)
        C2 = RefinedStrategy(C1, pair.lifting, pair.relation, wrong, RecoveryPolicy.hold(0), pair.concrete)
        P1 = output_word_distribution(pair.abstract, C1, 3)
        P2 = output_word_distribution(pair.concrete, C2, 3)
        worst = {w for w in set(P1) | set(P2) if P2.get(w, 0) > P1.get(w, 0)}
        p1 = sum(P1.get(w, 0) for w in worst)
        p2 = sum(P2.get(w, 0) for w in worst)
        failures += not check_sandwich(min(p1, 1), min(p1, 1), min(p2, 1), 0.0)
    assert tried >= 10 and failures >= tried // 2


def test_refined_exit_bookkeeping():
    pair = random_approx_pair(generator(31))
    C1 = FiniteMemoryStrategy.random(generator(32), pair.abstract.n_states, pair.abstract.n_actions, 1, 3)
    C2 = RefinedStrategy(C1, pair.lifting, pair.relation, pair.interface, RecoveryPolicy.hold(0), pair.concrete)
    rep = monte_carlo_safety(pair.concrete, C2, lambda y: True, 3, 500, 2)
    assert rep.exit_counts is not None and rep.exit_counts.sum() == rep.trials
    assert rep.exit_counts[2:].sum() == 0        # hold recovery: at most one exit per run
