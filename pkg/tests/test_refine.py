import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apsim.cases import certificate_from_artifacts
from apsim.models import FiniteGmdp, GaussianLtiGmdp
from apsim.refine import (DiagonalLifting, LtiLifting, MissingConditionalError, NotReconstructibleError,
                          RandomizedInterface, RecoveryPolicy, conditional_abstract_update, refine_approx,
                          refine_exact, reset_abstract, simulate_refined_lti)
from apsim.rng import generator
from apsim.safety import GridValueFunction, grid_to_strategy
from apsim.simrel import (BallRelation, FiniteRelation, IdentityInterface, LtiPair, QuadraticRelation,
                          SimRelCertificate, gamma_horizon)
from apsim.strategy import FeedbackPolicy, MarkovPolicy, execute_controlled
from apsim.validate import output_word_distribution, random_approx_pair, random_exact_pair


def _case2_parts(run, epsilon=None):
    cfg = run["cfg"]
    cert = certificate_from_artifacts(cfg, run["interface"], run["tradeoff"])
    if epsilon is not None:
        cert = dataclasses.replace(cert, relation=QuadraticRelation(cert.relation.M, cert.interface.P, epsilon),
                                   epsilon=epsilon)
    return cert, grid_to_strategy(GridValueFunction.from_dict(run["grid-dp"]))


@pytest.mark.parametrize("epsilon", [0.01, 0.002])
@pytest.mark.parametrize("kind", ["reset", "hold"])
def test_batch_runner_matches_scalar_refinement(case2_run, epsilon, kind):
    cert, C1 = _case2_parts(case2_run, epsilon)
    rec = RecoveryPolicy.reset() if kind == "reset" else RecoveryPolicy.hold()
    N, trials = 6, 40
    run = simulate_refined_lti(cert.concrete, cert.abstract, C1.actions_batch, cert.relation,
                               cert.interface, N, trials, 7, rec)
    assert run["exits"].sum() > 0        # the small ε forces exits
    R = refine_approx(C1, cert, rec)
    for i in range(trials):
        tr = execute_controlled(cert.concrete, R, N, 7, trial=i, record_controller=True)
        np.testing.assert_allclose(np.array(tr.states), run["concrete_states"][i], rtol=0, atol=1e-10)
        # the scalar strategy checks the relation when it needs an input, i.e. at t < N
        assert tr.controller_states[-1].exits == run["exit_steps"][i, :N].sum()


def test_identity_pair_traces_equal():
    rng = generator(11)
    K = rng.dirichlet(np.ones(3), size=(3, 2))
    M = FiniteGmdp(K, [0.5, 0.3, 0.2], ["a", "b", "a"])
    C1 = MarkovPolicy(rng.dirichlet(np.ones(2), size=(5, 3)))
    C2 = refine_exact(C1, DiagonalLifting(), FiniteRelation(np.eye(3, dtype=bool)), IdentityInterface(), M)
    for trial in range(20):
        a = execute_controlled(M, C1, 5, 3, trial)
        b = execute_controlled(M, C2, 5, 3, trial)
        assert a.states == b.states and a.outputs == b.outputs


def test_variance_split_interface_matches_moments():
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    S_e = np.diag([0.09, 0.04])
    S_small = np.diag([0.04, 0.01])
    M1 = GaussianLtiGmdp(A, np.eye(2), np.sqrt(S_e), np.eye(2), x0=[1.0, -1.0])
    M2 = GaussianLtiGmdp(A, np.hstack([np.eye(2), np.eye(2)]), np.sqrt(S_small), np.eye(2), x0=[1.0, -1.0])
    C1 = FeedbackPolicy(lambda t, x: -0.3 * np.asarray(x), 4)
    C2 = refine_exact(C1, DiagonalLifting(), BallRelation(1e-12), RandomizedInterface(S_e - S_small), M2)
    n = 4000
    y1 = np.array([execute_controlled(M1, C1, 4, 9, i).outputs[-1] for i in range(n)])
    y2 = np.array([execute_controlled(M2, C2, 4, 9, i).outputs[-1] for i in range(n)])
    se = np.sqrt(y1.var(axis=0) / n + y2.var(axis=0) / n)
    assert np.all(np.abs(y1.mean(axis=0) - y2.mean(axis=0)) <= 4 * se)
    c1, c2 = np.cov(y1.T), np.cov(y2.T)
    scale = np.sqrt(np.outer(np.diag(c1), np.diag(c1)))
    assert np.all(np.abs(c1 - c2) <= 4 * np.sqrt(2 / n) * 2 * scale)


def test_reset_abstract_examples(office):
    cert = SimRelCertificate(QuadraticRelation(np.eye(2), np.eye(2), 0.1), None, 0.0, 0.1)
    x1, ok = reset_abstract(cert, np.array([0.3, -0.2]))
    np.testing.assert_allclose(x1, [0.3, -0.2])
    assert ok
    P = office["interface"].P
    rel = QuadraticRelation(office["M"], P, 0.2)
    xs = np.array([0.4, -0.7])
    x1, ok = reset_abstract(SimRelCertificate(rel, None, 0.0, 0.2), P @ xs)
    np.testing.assert_allclose(x1, xs, atol=1e-9)
    assert rel.form(x1, P @ xs) < 1e-18 and ok
    with pytest.raises(np.linalg.LinAlgError):
        reset_abstract(SimRelCertificate(QuadraticRelation(np.eye(2), np.zeros((2, 2)), 1.0), None, 0, 1),
                       np.zeros(2))


def test_reset_minimizes_form_on_office_states(office):
    rel = QuadraticRelation(office["M"], office["interface"].P, 0.2)
    rng = generator(12)
    for _ in range(5):
        x2 = rng.standard_normal(rel.P.shape[0])
        x1, val = rel.reset(x2)
        cand = x1 + rng.standard_normal((1000, 2)) * rng.uniform(1e-3, 3.0)
        assert val <= rel.form(cand, x2).min() + 1e-12


def test_conditional_update_identity_noise():
    m = GaussianLtiGmdp([[0.5, 0.1], [0.0, 0.9]], [[1.0], [0.5]], np.eye(2), np.eye(2))
    cert = SimRelCertificate(BallRelation(1.0), IdentityInterface(), 0.0, 1.0, abstract=m, concrete=m)
    lift = LtiLifting(m, m, cert.relation)
    x2, u2, x2n = np.array([0.2, -0.1]), np.array([0.3]), np.array([1.0, 2.0])
    np.testing.assert_allclose(lift.reconstruct_noise(x2n, x2, u2), x2n - m.A @ x2 - m.B @ u2, atol=1e-14)
    # self-abstraction: replaying the noise gives back the concrete state
    x1n = conditional_abstract_update(cert, x2, u2, x2, u2, x2n)
    np.testing.assert_allclose(x1n, x2n, atol=1e-12)


def test_conditional_update_not_reconstructible():
    m = GaussianLtiGmdp(np.eye(2), np.zeros((2, 1)), [[1.0], [0.0]], np.eye(2))
    cert = SimRelCertificate(BallRelation(1.0), IdentityInterface(), 0.0, 1.0, abstract=m, concrete=m)
    with pytest.raises(NotReconstructibleError, match="not noise-reconstructible"):
        conditional_abstract_update(cert, np.zeros(2), [0.0], np.zeros(2), [0.0], np.array([0.0, 1.0]))


def test_office_shared_noise_error_moments(office):
    """One-step error ``e' = x2' − P x1'`` has mean ``Acl e + Eu u1`` and covariance ``Ew Ewᵀ``."""
    c, a, I = office["concrete"], office["abstract"], office["interface"]
    rng = generator(13)
    n = 20000
    x1 = np.tile(rng.standard_normal(2) * 0.3, (n, 1))
    x2 = x1 @ I.P.T + 0.01 * rng.standard_normal(c.n)
    u1 = np.full((n, 1), 0.1)
    u2 = I(u1, x1, x2)
    w = rng.standard_normal((n, c.k))
    x2n = x2 @ c.A.T + u2 @ c.B.T + w @ c.Bw.T
    lift = LtiLifting(a, c, QuadraticRelation(office["M"], I.P, 1.0))
    x1n = lift.update(x2n, u1, x1, x2, u2, None)
    e, en = x2[0] - I.P @ x1[0], x2n - x1n @ I.P.T
    Acl, Ew, Eu = LtiPair(c, a).error_matrices(I)
    res = LtiPair(c, a).sylvester_residual(I)[0]
    mean = Acl @ e + Eu @ u1[0]
    se = np.sqrt(np.diag(Ew @ Ew.T) / n)
    assert np.all(np.abs(en.mean(axis=0) - mean) <= 4 * se + 10 * res)
    cov = np.cov(en.T)
    ref = Ew @ Ew.T
    tol = 4 * np.sqrt(2 / n) * np.sqrt(np.outer(np.diag(ref), np.diag(ref))) + 1e-12
    assert np.all(np.abs(cov - ref) <= tol)


@settings(max_examples=25)
@given(st.integers(0, 100_000))
def test_exact_refinement_never_leaves_refine_mode(seed):
    rng = generator(seed)
    pair = random_exact_pair(rng)
    from apsim.strategy import FiniteMemoryStrategy
    C1 = FiniteMemoryStrategy.random(rng, pair.abstract.n_states, pair.abstract.n_actions, 2, 4)
    C2 = refine_exact(C1, pair.lifting, pair.relation, pair.interface, pair.concrete)
    for trial in range(10):
        tr = execute_controlled(pair.concrete, C2, 4, seed, trial, record_controller=True)
        assert all(s.mode == "refine" for s in tr.controller_states[1:])
        assert tr.controller_states[-1].exits == 0
    P1 = output_word_distribution(pair.abstract, C1, 3)
    P2 = output_word_distribution(pair.concrete, C2, 3)
    for w in set(P1) | set(P2):
        assert abs(P1.get(w, 0.0) - P2.get(w, 0.0)) <= 1e-10


def test_refine_exact_errors():
    pair = random_approx_pair(generator(14))
    assert pair.delta > 0
    C1 = MarkovPolicy(np.zeros((2, pair.abstract.n_states), dtype=int))
    with pytest.raises(ValueError, match="not exact"):
        refine_exact(C1, pair.lifting, pair.relation, pair.interface, pair.concrete)
    with pytest.raises(MissingConditionalError):
        refine_exact(C1, object(), pair.relation)


def test_case2_exit_frequency_below_gamma(case2_run):
    cfg = case2_run["cfg"]
    sim = case2_run["refine-simulate"]
    g = gamma_horizon(cfg.delta, cfg.horizon, steps=True)
    n = len(sim["exits"])
    sigma = np.sqrt(g * (1 - g) / n)
    assert sim["exit_any_fraction"] <= g + 3 * sigma


def test_modes_under_hold_and_reset(case2_run):
    cert, C1 = _case2_parts(case2_run, 0.005)
    hold = simulate_refined_lti(cert.concrete, cert.abstract, C1.actions_batch, cert.relation,
                                cert.interface, 6, 2000, 3, RecoveryPolicy.hold())
    m = hold["modes"].astype(int)
    assert np.all(np.diff(m, axis=1) <= 0)
    assert np.all(hold["exits"] <= 1)
    reset = simulate_refined_lti(cert.concrete, cert.abstract, C1.actions_batch, cert.relation,
                                 cert.interface, 6, 2000, 3, RecoveryPolicy.reset())
    inside = cert.relation.contains(reset["abstract_states"], reset["concrete_states"])
    assert np.all(inside[reset["modes"]])
    assert reset["exits"].sum() >= hold["exits"].sum()


def test_case1_excursions_below_bound(case1_run):
    assert case1_run["excursion_mean"] <= case1_run["excursion_bound"]
    assert case1_run["excursions"].size == 1000


def test_refined_runs_are_reproducible(case2_run):
    cert, C1 = _case2_parts(case2_run, 0.01)
    R = refine_approx(C1, cert)
    a = execute_controlled(cert.concrete, R, 6, 21, 4, record_controller=True)
    b = execute_controlled(cert.concrete, R.clone(), 6, 21, 4, record_controller=True)
    np.testing.assert_array_equal(np.array(a.states), np.array(b.states))
    r1 = simulate_refined_lti(cert.concrete, cert.abstract, C1.actions_batch, cert.relation,
                              cert.interface, 6, 300, 21)
    r2 = simulate_refined_lti(cert.concrete, cert.abstract, C1.actions_batch, cert.relation,
                              cert.interface, 6, 300, 21)
    np.testing.assert_array_equal(r1["concrete_states"], r2["concrete_states"])
