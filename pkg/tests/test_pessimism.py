import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pessim_drive.agent import AgentConfig, AgentNets
from pessim_drive.dynamics import Batch, ConstraintSpec, DynamicsModel, Normalizer, empirical_kl, in_constraint_set
from pessim_drive.nn import Mlp
from pessim_drive.pessimism import (
    MAX_HALVINGS,
    CandidateMode,
    Objective,
    pessimism_objective,
    pgd_step,
    run_pgd,
    write_trace_csv,
)
from pessim_drive.traffic import ACTION_DIM, STATE_DIM

from conftest import central_diff, max_rel_err

S, A = STATE_DIM, ACTION_DIM


def nets(seed=0, zero_q=False, **kw):
    n = AgentNets(AgentConfig(hidden=(8,), **kw), rng=seed)
    if zero_q:
        for q in (n.q1, n.q2):
            q.net.params.values[:] = 0.0
        n.q1_target.params.values[:] = 0.0
        n.q2_target.params.values[:] = 0.0
    return n


def obs(rng, n):
    lo = np.array([0, -80, -40, 0, 0, 0, 0, 0, 0])
    hi = np.array([13.89, 80, 40, 13.89, 75, 13.89, 75, 240, 1])
    return rng.uniform(lo, hi, size=(n, S))


def constant_model(reward, lv=-10.0):
    """Affine net emitting zero state increment, a fixed reward and a fixed log-variance."""
    net = Mlp((S + A, 2 * (S + 1)), rng=0)
    net.params.values[:] = 0.0
    _, b = next(net.weights())
    b[S] = reward
    b[S + 1:] = lv
    return DynamicsModel(net, Normalizer.identity(S + A, S + 1))


def random_model(seed):
    rng = np.random.default_rng(seed)
    norm = Normalizer(np.r_[obs(rng, 200).mean(0), 7.0, 0.0], np.r_[obs(rng, 200).std(0), 4.0, 1.0],
                      rng.normal(size=S + 1) * 0.1, np.abs(rng.normal(size=S + 1)) + 0.5)
    return DynamicsModel(Mlp((S + A, 6, 2 * (S + 1)), rng=seed), norm)


def anchor(rng, n=48):
    a = np.zeros((n, A))
    a[:, 0] = rng.uniform(0, 13.89, size=n)
    return Batch(obs(rng, n), a, np.zeros(n), obs(rng, n), np.zeros(n, dtype=bool))


def spec_for(model, rng, xi=0.1):
    return ConstraintSpec(model, anchor(rng), xi)


class TestObjective:
    def test_one_step_constant_reward(self, rng):
        agent = nets(zero_q=True, reward_scale=1.0)
        c = 2.5
        res = pessimism_objective(constant_model(c), agent, obs(rng, 4), 1, seed=0, deterministic=True)
        assert res.valid
        assert res.value == pytest.approx(c, abs=1e-12)

    def test_one_step_gradient(self, rng):
        agent = nets(zero_q=True, reward_scale=1.0)
        model = random_model(1)
        s0 = obs(rng, 5)
        res = pessimism_objective(model, agent, s0, 1, seed=3, deterministic=True)
        num = central_diff(lambda p: pessimism_objective(model.with_params(p), agent, s0, 1, seed=3,
                                                         deterministic=True).value, model.params)
        assert max_rel_err(res.grad, num) < 1e-3

    def test_multi_step_gradient_with_noise(self, rng):
        agent = nets(4)
        model = random_model(2)
        s0 = obs(rng, 6)
        res = pessimism_objective(model, agent, s0, 3, seed=5)
        num = central_diff(lambda p: pessimism_objective(model.with_params(p), agent, s0, 3, seed=5).value,
                           model.params)
        assert max_rel_err(res.grad, num) < 1e-3

    def test_reward_offset_adds_discounted_sum(self, rng):
        agent = nets(1, reward_scale=1.0)
        base = random_model(3)
        shifted = base.with_params(base.params)
        # +1 on the raw reward: the standardized head moves by 1 / tgt_std
        last_b = list(shifted.net.weights())[-1][1]
        last_b[S] += 1.0 / base.norm.tgt_std[S]
        s0 = obs(rng, 7)
        v0 = pessimism_objective(base, agent, s0, 2, seed=8).value
        v1 = pessimism_objective(shifted, agent, s0, 2, seed=8).value
        assert v1 - v0 == pytest.approx(1 + agent.cfg.gamma, rel=1e-9)

    def test_same_seed_identical(self, rng):
        agent, model, s0 = nets(2), random_model(4), obs(rng, 5)
        a = pessimism_objective(model, agent, s0, 4, seed=9)
        b = pessimism_objective(model, agent, s0, 4, seed=9)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_terminal_rule_truncates_return(self, rng):
        agent = nets(zero_q=False, reward_scale=1.0)
        model = constant_model(1.0)
        s0 = obs(rng, 3)
        res = pessimism_objective(model, agent, s0, 5, seed=0, deterministic=True,
                                  terminal_fn=lambda s: np.ones(len(s), dtype=bool))
        assert res.value == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_is_invalid(self, rng):
        model = constant_model(np.inf)
        res = pessimism_objective(model, nets(), obs(rng, 2), 1, seed=0)
        assert not res.valid and not np.any(res.grad)

    def test_horizon_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            pessimism_objective(constant_model(0.0), nets(), obs(rng, 1), 0)


class TestPgdStep:
    def test_zero_gradient_keeps_point(self, rng):
        model = random_model(5)
        spec = spec_for(model, rng)
        phi, kl, k = pgd_step(model.params, np.zeros_like(model.params), 1e-3, spec, model.params)
        np.testing.assert_array_equal(phi, model.params)
        assert kl == 0.0 and k == 0

    def test_interior_step_is_raw_step(self, rng):
        model = random_model(6)
        spec = spec_for(model, rng, xi=10.0)
        g = rng.normal(size=model.params.size)
        phi, _, k = pgd_step(model.params, g, 1e-4, spec, model.params)
        np.testing.assert_array_equal(phi, model.params - 1e-4 * g)
        assert k == 0

    def test_infeasible_step_is_backtracked(self, rng):
        model = random_model(7)
        spec = spec_for(model, rng, xi=1e-3)
        g = rng.normal(size=model.params.size)
        phi, kl, k = pgd_step(model.params, g, 1.0, spec, model.params)
        assert k >= 1
        assert in_constraint_set(model.with_params(phi), spec)
        assert kl == pytest.approx(empirical_kl(model.with_params(phi), spec), abs=0)

    def test_stall_returns_anchor(self, rng):
        model = random_model(8)
        spec = spec_for(model, rng, xi=1e-6)
        phi, _, k = pgd_step(model.params, np.full(model.params.size, 1e12), 1.0, spec, model.params)
        assert k == MAX_HALVINGS + 1
        np.testing.assert_array_equal(phi, model.params)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.floats(1e-4, 1.0), st.floats(-3, 1))
    def test_result_always_feasible(self, seed, xi, log_step):
        rng = np.random.default_rng(seed)
        model = random_model(seed)
        spec = spec_for(model, rng, xi)
        phi, kl, _ = pgd_step(model.params, rng.normal(size=model.params.size), 10.0**log_step, spec,
                              model.params)
        assert in_constraint_set(model.with_params(phi), spec)
        assert kl <= xi


class TestRunPgd:
    def scripted(self, values, size):
        calls = {"n": 0}

        def objective(model):
            v = values[min(calls["n"], len(values) - 1)]
            calls["n"] += 1
            return Objective(v, np.full(size, 1e-3), True)

        return objective

    def test_single_iteration(self, rng):
        model = random_model(9)
        spec = spec_for(model, rng)
        starts = obs(rng, 4)
        chosen_b, tr_b = run_pgd(spec, nets(), starts, iters=1, mode="best", seed=0)
        chosen_f, tr_f = run_pgd(spec, nets(), starts, iters=1, mode="final", seed=0)
        assert len(tr_b.candidates) == 1
        np.testing.assert_array_equal(chosen_b.params, chosen_f.params)

    def test_scripted_minimum_at_third_iterate(self, rng):
        model = random_model(10)
        spec = spec_for(model, rng, xi=10.0)
        values = [5.0, 4.0, 3.5, 1.0, 2.0, 2.5, 3.0, 3.2, 3.3, 3.4, 3.6]  # first entry scores the MLE start
        chosen, trace = run_pgd(spec, None, None, iters=10, mode=CandidateMode.BEST,
                                objective=self.scripted(values, model.params.size))
        assert trace.selected == 2
        np.testing.assert_array_equal(chosen.params, trace.candidates[2].phi)
        assert all(trace.candidates[2].objective <= c.objective for c in trace.candidates)

    def test_average_mode_is_feasible(self, rng):
        model = random_model(11)
        spec = spec_for(model, rng, xi=0.01)
        chosen, trace = run_pgd(spec, nets(3), obs(rng, 8), iters=5, mode="avg", seed=2, step_size=0.05)
        assert in_constraint_set(chosen, spec)
        assert trace.selected == -1

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 500), st.sampled_from(["adam", "none"]))
    def test_candidates_feasible_and_best_dominates(self, seed, precond):
        rng = np.random.default_rng(seed)
        model = random_model(seed)
        spec = spec_for(model, rng, xi=0.05)
        _, trace = run_pgd(spec, nets(seed), obs(rng, 6), iters=6, mode="best", seed=seed, step_size=0.01,
                           horizon=3, preconditioner=precond)
        for c in trace.candidates:
            assert in_constraint_set(model.with_params(c.phi), spec)
        objs = trace.objectives()
        assert objs[trace.selected] <= objs[-1]

    def test_best_candidate_improves_on_mle(self, rng):
        model = random_model(12)
        spec = spec_for(model, rng, xi=0.1)
        agent, starts = nets(5), obs(rng, 16)
        _, trace = run_pgd(spec, agent, starts, iters=10, seed=1, step_size=1e-2, horizon=4)
        start = pessimism_objective(model, agent, starts, 4, seed=1)
        assert trace.objectives().min() < start.value

    def test_invalid_objective_falls_back_to_mle(self, rng):
        model = random_model(13)
        spec = spec_for(model, rng)
        chosen, trace = run_pgd(spec, None, None, iters=3,
                                objective=lambda m: Objective(float("nan"), np.zeros_like(m.params), False))
        assert trace.candidates == []
        np.testing.assert_array_equal(chosen.params, model.params)

    def test_bad_arguments(self, rng):
        spec = spec_for(random_model(14), rng)
        with pytest.raises(ValueError):
            run_pgd(spec, nets(), obs(rng, 2), iters=0)
        with pytest.raises(ValueError):
            run_pgd(spec, nets(), obs(rng, 2), preconditioner="lbfgs")
        with pytest.raises(ValueError):
            CandidateMode.parse("median")

    def test_mode_aliases(self):
        assert CandidateMode.parse("avg") is CandidateMode.AVERAGE
        assert CandidateMode.parse("last") is CandidateMode.FINAL

    def test_trace_csv(self, rng, tmp_path):
        model = random_model(15)
        spec = spec_for(model, rng)
        _, trace = run_pgd(spec, nets(), obs(rng, 4), iters=3, seed=0, horizon=2)
        write_trace_csv(trace, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iter,objective,feasible,kl"
        assert len(lines) == 1 + len(trace.candidates)
        assert all(line.split(",")[2] == "1" for line in lines[1:])
