import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessim_drive.boundlab import (
    BoundConfigError,
    BoundConstants,
    CoverageError,
    LogLinearPolicy,
    ModelClass,
    TabularMDP,
    boundlab_report,
    concentrability,
    delta_decomposition,
    deterministic_policy,
    gamma_decomposition,
    group_bound_instance,
    group_bound_rhs,
    group_bound_terms,
    inner_min,
    lemma_checks,
    mle_tv2_curve,
    monte_carlo_occupancy,
    monte_carlo_value,
    npg_run,
    occupancy,
    optimal_policy,
    perturbed_class,
    pessimistic_solve,
    policy_value,
    random_features,
    random_mdp,
    random_policy,
    read_instance,
    simulation_lemma_bound,
    state_occupancy,
    tv_by_events,
    tv_distance,
    value_iteration,
    write_instance,
)


def constants(**kw):
    base = dict(gamma=0.9, n_actions=2, r_max=1.0, conc=1.5, class_size=8, chi_bar=2, n_agents=4, eta=0.5,
                W=10.0, phi_max=1.0, occupancy_ratio=2.0, delta=0.1)
    base.update(kw)
    return BoundConstants(**base)


def two_state_reach(p_good):
    """State 1 pays 1; every action reaches it with probability ``p_good``."""
    P = np.zeros((2, 2, 2))
    P[:, :, 1] = p_good
    P[:, :, 0] = 1 - p_good
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMDP(P, R, np.array([1.0, 0.0]), 0.9)


class TestValues:
    def test_zero_reward(self, rng):
        mdp = random_mdp(rng, 4, 2)
        mdp = TabularMDP(mdp.P, np.zeros_like(mdp.R), mdp.mu0, mdp.gamma)
        V, Q = value_iteration(mdp, random_policy(rng, 4, 2))
        np.testing.assert_array_equal(V, 0.0)
        np.testing.assert_array_equal(Q, 0.0)

    def test_single_state_geometric_series(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.ones(1), 0.98)
        V, _ = value_iteration(mdp, np.ones((1, 1)))
        assert V[0] == pytest.approx(50.0, rel=1e-12)

    def test_monte_carlo_value(self):
        mdp = random_mdp(3, 5, 2, gamma=0.9)
        pi = random_policy(4, 5, 2)
        mean, se = monte_carlo_value(mdp, pi, 20_000, 200, rng=5)  # 4e6 simulated steps
        assert abs(mean - policy_value(mdp, pi)) < 3 * se

    def test_bellman_consistency(self, rng):
        mdp = random_mdp(rng, 5, 3)
        pi = random_policy(rng, 5, 3)
        V, Q = value_iteration(mdp, pi)
        np.testing.assert_allclose((pi * Q).sum(axis=1), V, rtol=1e-12, atol=1e-12)

    def test_optimal_policy_beats_every_deterministic_policy(self, rng):
        mdp = random_mdp(rng, 3, 2)
        best = policy_value(mdp, optimal_policy(mdp))
        for acts in itertools.product(range(2), repeat=3):
            assert policy_value(mdp, deterministic_policy(np.array(acts), 2)) <= best + 1e-12

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            TabularMDP(np.full((1, 1, 2), 0.6), np.zeros((1, 1)), np.array([1.0]), 0.9)
        with pytest.raises(ValueError):
            TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), np.ones(1), 1.0)


class TestOccupancy:
    def test_absorbing_state(self):
        mdp = TabularMDP(np.ones((1, 3, 1)), np.zeros((1, 3)), np.ones(1), 0.9)
        pi = np.array([[0.2, 0.5, 0.3]])
        np.testing.assert_allclose(occupancy(mdp, pi), pi, rtol=1e-12)

    def test_myopic_limit(self, rng):
        mdp = random_mdp(rng, 4, 2, gamma=1e-9, uniform_start=False)
        pi = random_policy(rng, 4, 2)
        np.testing.assert_allclose(occupancy(mdp, pi), mdp.mu0[:, None] * pi, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_is_a_distribution(self, seed):
        mdp = random_mdp(seed, 4, 3)
        d = occupancy(mdp, random_policy(seed + 1, 4, 3))
        assert np.all(d >= 0) and d.sum() == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_visitation(self):
        mdp = random_mdp(7, 3, 2, gamma=0.8)
        pi = random_policy(8, 3, 2)
        n = 200_000
        freq = monte_carlo_occupancy(mdp, pi, n, rng=9)
        d = occupancy(mdp, pi)
        se = np.sqrt(d * (1 - d) / n)
        assert np.all(np.abs(freq - d) < 3 * se + 1e-12)

    def test_value_is_occupancy_weighted_reward(self, rng):
        mdp = random_mdp(rng, 5, 2)
        pi = random_policy(rng, 5, 2)
        assert policy_value(mdp, pi) == pytest.approx((occupancy(mdp, pi) * mdp.R).sum() / (1 - mdp.gamma),
                                                      rel=1e-10)


class TestTv:
    def test_identical_rows(self, rng):
        p = rng.dirichlet(np.ones(4))
        assert tv_distance(p, p) == 0.0

    def test_disjoint_support(self):
        assert tv_distance([0.5, 0.5, 0, 0], [0, 0, 0.25, 0.75]) == pytest.approx(1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_matches_event_enumeration(self, seed, k):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        assert tv_distance(p, q) == pytest.approx(tv_by_events(p, q), abs=1e-12)

    def test_batched_rows(self, rng):
        P1, P2 = rng.dirichlet(np.ones(3), size=(4, 2)), rng.dirichlet(np.ones(3), size=(4, 2))
        out = tv_distance(P1, P2)
        assert out.shape == (4, 2)
        assert out[2, 1] == pytest.approx(tv_distance(P1[2, 1], P2[2, 1]))


class TestModelClass:
    def test_reference_is_always_a_member(self, rng):
        mdp = random_mdp(rng, 3, 2)
        models = perturbed_class(mdp.P, rng, 5)
        mc = ModelClass(models, mdp.P, np.full((3, 2), 1 / 6), xi=0.0)
        assert len(mc) == 1 and mc.members()[0] is models[0]

    def test_kl_ball_widens_with_xi(self, rng):
        mdp = random_mdp(rng, 3, 2)
        models = perturbed_class(mdp.P, rng, 10)
        rho = np.full((3, 2), 1 / 6)
        sizes = [len(ModelClass(models, mdp.P, rho, xi, "kl")) for xi in (0.0, 0.01, 0.1, 10.0)]
        assert sizes == sorted(sizes) and sizes[-1] == 10

    def test_unknown_divergence(self, rng):
        mdp = random_mdp(rng, 2, 2)
        with pytest.raises(ValueError):
            ModelClass([mdp.P], mdp.P, np.full((2, 2), 0.25), 1.0, "hellinger").members()


class TestConcentrability:
    def test_true_model_only(self, rng):
        mdp = random_mdp(rng, 3, 2)
        assert concentrability([mdp.P], mdp.P, occupancy(mdp, optimal_policy(mdp)), np.full((3, 2), 1 / 6)) == 1.0

    def test_data_matches_comparator(self, rng):
        mdp = random_mdp(rng, 3, 2)
        d = occupancy(mdp, random_policy(rng, 3, 2))
        assert concentrability(perturbed_class(mdp.P, rng, 6), mdp.P, d, d) == pytest.approx(1.0, rel=1e-12)

    def test_matches_enumeration(self):
        rng = np.random.default_rng(21)
        mdp = random_mdp(rng, 3, 2)
        models = perturbed_class(mdp.P, rng, 4)
        d = occupancy(mdp, optimal_policy(mdp))
        rho = rng.dirichlet(np.ones(6)).reshape(3, 2)
        ratios = []
        for P in models[1:]:
            num = den = 0.0
            for s in range(3):
                for a in range(2):
                    tv = 0.5 * sum(abs(P[s, a, t] - mdp.P[s, a, t]) for t in range(3))
                    num += d[s, a] * tv * tv
                    den += rho[s, a] * tv * tv
            ratios.append(num / den)
        assert concentrability(models, mdp.P, d, rho) == pytest.approx(max(ratios), rel=1e-12)

    def test_partial_coverage_raises(self):
        P = np.zeros((2, 1, 2))
        P[:, 0, 0] = 1.0
        Q = P.copy()
        Q[1, 0] = [0.5, 0.5]
        d = np.array([[0.5], [0.5]])
        rho = np.array([[1.0], [0.0]])
        with pytest.raises(CoverageError):
            concentrability([Q], P, d, rho)


class TestPessimisticSolve:
    def test_true_class_gives_optimal_policy(self, rng):
        mdp = random_mdp(rng, 3, 2)
        sol = pessimistic_solve(mdp, [mdp.P])
        assert sol.value == pytest.approx(policy_value(mdp, optimal_policy(mdp)), rel=1e-12)

    def test_inner_min_picks_the_unreachable_model(self, rng):
        good, bad = two_state_reach(0.9), two_state_reach(0.1)
        pols = [deterministic_policy(np.array(a), 2) for a in itertools.product(range(2), repeat=2)]
        pols += [random_policy(rng, 2, 2) for _ in range(5)]
        for pi in pols:
            _, k = inner_min(good, [good.P, bad.P], pi)
            assert k == 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_pessimistic_value_below_true_value(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 3, 2)
        sol = pessimistic_solve(mdp, perturbed_class(mdp.P, rng, 4))
        assert sol.value <= policy_value(mdp, sol.policy) + 1e-12

    def test_empty_class(self, rng):
        with pytest.raises(ValueError):
            pessimistic_solve(random_mdp(rng, 2, 2), [])


class TestDecompositions:
    def test_optimal_iterates_with_true_class(self, rng):
        mdp = random_mdp(rng, 4, 2)
        pi = optimal_policy(mdp)
        t = delta_decomposition(mdp, [mdp.P], pi, [pi, pi])
        assert (t.a, t.b, t.c) == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)

    def test_true_class_leaves_only_the_value_gap(self, rng):
        mdp = random_mdp(rng, 4, 2)
        pis = [random_policy(rng, 4, 2) for _ in range(3)]
        t = delta_decomposition(mdp, [mdp.P], optimal_policy(mdp), pis)
        assert t.a == 0.0 and t.c == 0.0
        assert t.b == pytest.approx(t.gap, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_delta_telescopes(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 4, 2)
        models = perturbed_class(mdp.P, rng, 5)
        pis = [random_policy(rng, 4, 2) for _ in range(4)]
        t = delta_decomposition(mdp, models, optimal_policy(mdp), pis)
        assert abs(t.total - t.gap) <= 1e-10

    def test_gamma_same_model_has_no_shift_term(self, rng):
        mdp = random_mdp(rng, 4, 3)
        pol = LogLinearPolicy(random_features(rng, 4, 3, 3), rng.normal(size=3))
        g = gamma_decomposition(mdp, mdp.P, optimal_policy(mdp), pol, rng.normal(size=3))
        assert g.b == 0.0

    def test_gamma_zero_weights(self, rng):
        mdp = random_mdp(rng, 4, 2)
        P_t = perturbed_class(mdp.P, rng, 2)[1]
        pol = LogLinearPolicy(random_features(rng, 4, 2, 3), rng.normal(size=3))
        pi_star = optimal_policy(mdp)
        g = gamma_decomposition(mdp, P_t, pi_star, pol, np.zeros(3))
        model = mdp.with_transition(P_t)
        V, Q = value_iteration(model, pol.probs())
        assert g.b == 0.0 and g.c == 0.0
        assert g.a == pytest.approx((occupancy(model, pi_star) * (Q - V[:, None])).sum(), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gamma_sum_is_scaled_model_value_gap(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, 4, 2)
        P_t = perturbed_class(mdp.P, rng, 2)[1]
        pol = LogLinearPolicy(random_features(rng, 4, 2, 3), rng.normal(size=3))
        pi_star = optimal_policy(mdp)
        g = gamma_decomposition(mdp, P_t, pi_star, pol, rng.normal(size=3))
        model = mdp.with_transition(P_t)
        direct = (1 - mdp.gamma) * (policy_value(model, pi_star) - policy_value(model, pol.probs()))
        assert abs(g.total - direct) <= 1e-10


class TestLemmas:
    @pytest.mark.parametrize("seed", range(10))
    def test_all_checks_pass(self, seed):
        rep = lemma_checks(seed)
        assert rep.passed, rep.failures()
        assert len(rep.results) == 7

    def test_symmetric_features_give_zero_score(self):
        feats = np.tile(np.array([[1.0, 0.0], [-1.0, 0.0]]), (3, 1, 1))
        pol = LogLinearPolicy(feats, np.zeros(2))
        np.testing.assert_allclose(pol.probs(), 0.5)
        np.testing.assert_allclose(pol.grad_log().sum(axis=1), 0.0, atol=1e-15)
        np.testing.assert_allclose(pol.grad_log()[:, 0, 0], 1.0)

    def test_simulation_bound_on_hand_set_chain(self):
        P = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.5, 0.5], [0.1, 0.9]]])
        mdp = TabularMDP(P, np.array([[0.0, 0.5], [1.0, 0.2]]), np.array([0.5, 0.5]), 0.9)
        Q = np.array([[[0.6, 0.4], [0.3, 0.7]], [[0.5, 0.5], [0.3, 0.7]]])
        lhs, rhs = simulation_lemma_bound(mdp, Q, np.full((2, 2), 0.5))
        assert 0 < lhs < rhs

    def test_mle_error_decays_like_inverse_sample_size(self):
        mdp = random_mdp(31, 3, 2)
        _, slope = mle_tv2_curve(mdp, np.full((3, 2), 1 / 6), rng=0)
        assert abs(slope + 1.0) <= 0.3


class TestGroupBound:
    def test_first_term_scales_with_inverse_root_k(self):
        c = constants()
        t1, t2 = group_bound_terms(c, 4, 50), group_bound_terms(c, 8, 50)
        assert t2["statistical"] / t1["statistical"] == pytest.approx(1 / math.sqrt(2), rel=1e-12)

    def test_rhs_is_sum_of_terms(self):
        c = constants()
        assert group_bound_rhs(c, 3, 20) == pytest.approx(sum(group_bound_terms(c, 3, 20).values()), rel=1e-15)

    def test_missing_constant(self):
        with pytest.raises(BoundConfigError, match="conc"):
            group_bound_rhs(constants(conc=None), 1, 1)

    def test_bad_delta(self):
        with pytest.raises(BoundConfigError):
            group_bound_rhs(constants(delta=1.0), 1, 1)

    def test_true_class_npg_is_bounded(self, rng):
        mdp = random_mdp(rng, 4, 2)
        feats = random_features(rng, 4, 2, 3)
        iters = npg_run(mdp, [mdp.P], LogLinearPolicy(feats, np.zeros(3)), 20, 0.5, 10.0)
        v_star = policy_value(mdp, optimal_policy(mdp))
        assert len(iters) == 21
        assert all(policy_value(mdp, pi) <= v_star + 1e-12 for pi in iters)

    def test_bound_holds_on_twenty_instances(self):
        rows = [group_bound_instance(s, delta=0.1) for s in range(20)]
        violations = sum(not r.holds for r in rows)
        assert violations / len(rows) <= 0.1

    def test_report_files(self, tmp_path):
        ok, text = boundlab_report(2, 0.1, tmp_path, lemma_seeds=2)
        assert ok and "verdict: PASS" in text
        assert (tmp_path / "group_bound.csv").read_text().startswith("seed,lhs,rhs,holds")
        assert len((tmp_path / "lemmas.txt").read_text().splitlines()) == 14

    def test_report_arguments(self, tmp_path):
        with pytest.raises(BoundConfigError):
            boundlab_report(0, 0.1, tmp_path)
        with pytest.raises(BoundConfigError):
            boundlab_report(3, 0.0, tmp_path)


class TestInstanceFiles:
    def test_round_trip(self, rng, tmp_path):
        mdp = random_mdp(rng, 3, 2, uniform_start=False)
        write_instance(mdp, tmp_path / "m.txt")
        back = read_instance(tmp_path / "m.txt")
        np.testing.assert_array_equal(back.P, mdp.P)
        np.testing.assert_array_equal(back.R, mdp.R)
        np.testing.assert_array_equal(back.mu0, mdp.mu0)
        assert back.gamma == mdp.gamma
        assert state_occupancy(back, random_policy(0, 3, 2)).sum() == pytest.approx(1.0)
