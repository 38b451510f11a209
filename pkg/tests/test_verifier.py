import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idmlab import verifier as V


def _exact_visitation_by_paths(mdp, pi):
    nS, T = mdp.n_states, mdp.horizon
    K = np.einsum("sa,sat->st", pi, mdp.transition)
    p_s = np.zeros(nS)
    # sum over state paths s_1..s_T of prob * (1/T) sum_t 1[s_t = s]
    for path in itertools.product(range(nS), repeat=T):
        prob = mdp.initial[path[0]]
        for t in range(1, T):
            prob *= K[path[t - 1], path[t]]
        for s in path:
            p_s[s] += prob / T
    return p_s


def _brute_terms(mdp, pi, h):
    """KL chain-rule terms by explicit loops over (s, a, s')."""
    nS, nA = mdp.n_states, mdp.n_actions
    p_s = _exact_visitation_by_paths(mdp, pi)
    joint = np.zeros((nS, nA, nS))
    for s, a, t in itertools.product(range(nS), range(nA), range(nS)):
        joint[s, a, t] = p_s[s] * pi[s, a] * mdp.transition[s, a, t]
    pair = joint.sum(axis=1)
    lhs = pol = dyn = 0.0
    v = pair / p_s[:, None]
    pi_hat = np.zeros((nS, nA))
    for s, t, a in itertools.product(range(nS), range(nS), range(nA)):
        pi_hat[s, a] += h[s, t, a] * v[s, t]
    for s, t, a in itertools.product(range(nS), range(nS), range(nA)):
        if joint[s, a, t] > 0:
            hstar = joint[s, a, t] / pair[s, t]
            lhs += pair[s, t] * hstar * math.log(hstar / h[s, t, a])
            p_model = h[s, t, a] * v[s, t] / pi_hat[s, a]
            dyn += p_s[s] * pi[s, a] * mdp.transition[s, a, t] * math.log(mdp.transition[s, a, t] / p_model)
    for s, a in itertools.product(range(nS), range(nA)):
        if pi[s, a] > 0:
            pol += p_s[s] * pi[s, a] * math.log(pi[s, a] / pi_hat[s, a])
    return lhs, pol, dyn


def _chain():
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    return V.TabularMDP(P, np.array([1.0, 0, 0]), 2)


def test_chain_visitation():
    p_s, joint = V.visitation(_chain(), np.ones((3, 1)))
    np.testing.assert_allclose(p_s, [0.5, 0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(joint.sum(axis=(1, 2)), p_s, atol=1e-12)


@settings(max_examples=30, deadline=None, derandomize=True)
@given(st.integers(0, 2**31))
def test_against_brute_force_enumeration(seed):
    rng = np.random.default_rng(seed)
    nS, nA, T = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
    mdp = V.random_mdp(rng, nS, nA, T)
    pi = V.random_policy(rng, nS, nA)
    h = V.random_idm(rng, nS, nA)
    p_s, _ = V.visitation(mdp, pi)
    np.testing.assert_allclose(p_s, _exact_visitation_by_paths(mdp, pi), atol=1e-12)
    rep = V.check_kl_decomposition(mdp, pi, h)
    lhs, pol, dyn = _brute_terms(mdp, pi, h.table)
    assert rep.lhs == pytest.approx(lhs, abs=1e-10)
    assert rep.rhs_policy_term == pytest.approx(pol, abs=1e-10)
    assert rep.rhs_dynamics_term == pytest.approx(dyn, abs=1e-10)


def test_exact_idm_has_zero_kl_terms():
    rng = np.random.default_rng(0)
    mdp = V.random_mdp(rng, 5, 3, 4)
    pi = V.random_policy(rng, 5, 3)
    h_star, _ = V.induced_idm_vm(mdp, pi)
    rep = V.check_kl_decomposition(mdp, pi, h_star)
    assert abs(rep.lhs) < 1e-12 and abs(rep.rhs_policy_term) < 1e-12 and abs(rep.rhs_dynamics_term) < 1e-12


def test_uniform_idm_lhs_is_log_a_minus_entropy():
    rng = np.random.default_rng(1)
    mdp = V.random_mdp(rng, 4, 3, 3)
    pi = V.random_policy(rng, 4, 3)
    _, h_ass = V.conditional_entropies(mdp, pi)
    rep = V.check_kl_decomposition(mdp, pi, V.uniform_idm(4, 3))
    assert rep.lhs == pytest.approx(math.log(3) - h_ass, abs=1e-12)


def test_compose_recovers_expert_and_entropy_inequality():
    rng = np.random.default_rng(2)
    for _ in range(20):
        mdp = V.random_mdp(rng, 5, 3, 4, sparse=True)
        pi = V.random_policy(rng, 5, 3)
        h, v = V.induced_idm_vm(mdp, pi)
        composed = V.compose(v, h)
        np.testing.assert_allclose(composed[v.defined], pi[v.defined], atol=1e-12)
        h_as, h_ass = V.conditional_entropies(mdp, pi)
        assert h_ass <= h_as + 1e-12


def test_compose_state_independent_idm_gives_marginal():
    rng = np.random.default_rng(3)
    row = rng.dirichlet(np.ones(3))
    h = V.TabularIDM(np.broadcast_to(row, (4, 4, 3)).copy(), np.ones((4, 4), bool))
    vm = V.TabularVM(rng.dirichlet(np.ones(4), size=4), np.ones(4, bool))
    np.testing.assert_allclose(V.compose(vm, h), np.tile(row, (4, 1)), atol=1e-15)


def test_compose_rejects_reached_undefined_rows():
    h = V.TabularIDM(np.full((2, 2, 2), 0.5), np.array([[True, False], [True, True]]))
    vm = V.TabularVM(np.array([[0.5, 0.5], [1.0, 0.0]]), np.array([True, True]))
    with pytest.raises(V.VerificationError):
        V.compose(vm, h)


def test_sparse_support_flags_undefined_rows():
    rng = np.random.default_rng(4)
    mdp = V.random_mdp(rng, 6, 2, 3, sparse=True)
    h, v = V.induced_idm_vm(mdp, V.random_policy(rng, 6, 2))
    assert not h.defined.all()
    assert np.all(h.table[~h.defined] == 0)
    np.testing.assert_allclose(h.table.sum(axis=2)[h.defined], 1.0, atol=1e-12)


def test_zero_mass_mismatch_reports_infinity():
    rng = np.random.default_rng(5)
    mdp = V.random_mdp(rng, 3, 2, 2)
    pi = V.random_policy(rng, 3, 2)
    table = np.zeros((3, 3, 2))
    table[..., 0] = 1.0
    rep = V.check_kl_decomposition(mdp, pi, V.TabularIDM(table, np.ones((3, 3), bool)))
    assert math.isinf(rep.lhs)
    assert V.weighted_kl(np.ones(2), np.array([0.0, 1.0]), np.array([0.0, 1.0])) == 0.0


def test_equivalence_with_exact_idm_returns_expert():
    rng = np.random.default_rng(6)
    mdp = V.random_mdp(rng, 4, 3, 3)
    pi = V.random_policy(rng, 4, 3)
    h, _ = V.induced_idm_vm(mdp, pi)
    rep = V.check_equivalence(mdp, pi, h)
    np.testing.assert_allclose(rep.labeling_policy, pi, atol=1e-12)
    assert rep.residual < 1e-12


def test_hundred_trials_pass_and_report_lines():
    trials = V.run_trials(100, seed=0)
    assert all(t.passed() for t in trials)
    lines = V.format_report(trials).splitlines()
    assert len(lines) == 100
    rec = json.loads(lines[0])
    assert {"kl_residual", "inequality_holds", "equivalence_residual"} <= set(rec)
    assert V.format_report(V.run_trials(100, seed=0)) == V.format_report(trials)
