"""Exact tabular oracles for pessimistic model-based policy optimization.

Small finite MDPs where values, occupancy measures, worst-case models within a
finite model class, and the terms of the sub-optimality bound can all be
computed exactly.  All functions are pure given their inputs.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12


class CoverageError(ValueError):
    """The data distribution misses state-action pairs the comparator policy visits."""


class BoundConfigError(ValueError):
    pass


# ----------------------------------------------------------------- MDPs


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    mu0: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        s, a, s2 = self.P.shape
        if s != s2 or self.R.shape != (s, a) or self.mu0.shape != (s,):
            raise ValueError("inconsistent MDP shapes")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        check_distribution(self.P, "transition rows")
        check_distribution(self.mu0, "initial distribution")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.R)))

    def with_transition(self, P) -> "TabularMDP":
        return TabularMDP(P, self.R, self.mu0, self.gamma)


def check_distribution(p, what="distribution"):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > ROW_TOL * max(1, p.shape[-1])):
        raise ValueError(f"{what} must be non-negative and sum to 1")
    return p


def random_simplex(rng, shape, concentration=1.0):
    return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])


def random_mdp(rng, n_states=4, n_actions=2, gamma=0.9, r_max=1.0, uniform_start=True) -> TabularMDP:
    rng = np.random.default_rng(rng)
    P = random_simplex(rng, (n_states, n_actions, n_states))
    R = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    mu0 = np.full(n_states, 1.0 / n_states) if uniform_start else random_simplex(rng, (n_states,))
    return TabularMDP(P, R, mu0, gamma)


def random_policy(rng, n_states, n_actions) -> np.ndarray:
    return random_simplex(np.random.default_rng(rng), (n_states, n_actions))


def deterministic_policy(actions, n_actions) -> np.ndarray:
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


# ----------------------------------------------------------------- evaluation


def _policy_matrices(mdp: TabularMDP, pi):
    pi = check_distribution(pi, "policy rows")
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy shape does not match the MDP")
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    R_pi = (pi * mdp.R).sum(axis=1)
    return P_pi, R_pi


def value_iteration(mdp: TabularMDP, pi):
    """Exact policy evaluation; returns (V (S,), Q (S, A))."""
    P_pi, R_pi = _policy_matrices(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    try:
        V = np.linalg.solve(A, R_pi)
    except np.linalg.LinAlgError as exc:
        raise ValueError("policy evaluation system is singular") from exc
    Q = mdp.R + mdp.gamma * mdp.P @ V
    return V, Q


def policy_value(mdp: TabularMDP, pi) -> float:
    V, _ = value_iteration(mdp, pi)
    return float(mdp.mu0 @ V)


def state_occupancy(mdp: TabularMDP, pi) -> np.ndarray:
    P_pi, _ = _policy_matrices(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    return (1.0 - mdp.gamma) * np.linalg.solve(A, mdp.mu0)


def occupancy(mdp: TabularMDP, pi) -> np.ndarray:
    """Normalized discounted state-action visitation d(s, a)."""
    d = state_occupancy(mdp, pi)[:, None] * np.asarray(pi)
    return np.clip(d, 0.0, None)


def optimal_policy(mdp: TabularMDP, max_iter=1000) -> np.ndarray:
    """Deterministic optimal policy by policy iteration."""
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iter):
        pi = deterministic_policy(actions, mdp.n_actions)
        _, Q = value_iteration(mdp, pi)
        current = Q[np.arange(mdp.n_states), actions]
        best = Q.argmax(axis=1)
        improve = Q[np.arange(mdp.n_states), best] > current + 1e-12
        if not improve.any():
            return pi
        actions = np.where(improve, best, actions)
    return deterministic_policy(actions, mdp.n_actions)


def monte_carlo_value(mdp: TabularMDP, pi, n_episodes, horizon, rng):
    """Discounted returns of ``n_episodes`` truncated rollouts; returns (mean, standard error)."""
    rng = np.random.default_rng(rng)
    S, A = mdp.n_states, mdp.n_actions
    s = rng.choice(S, size=n_episodes, p=mdp.mu0)
    ret = np.zeros(n_episodes)
    disc = 1.0
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for _ in range(horizon):
        a = np.minimum((rng.random(n_episodes)[:, None] > cum_pi[s]).sum(axis=1), A - 1)
        ret += disc * mdp.R[s, a]
        s = np.minimum((rng.random(n_episodes)[:, None] > cum_P[s, a]).sum(axis=1), S - 1)
        disc *= mdp.gamma
    return float(ret.mean()), float(ret.std(ddof=1) / math.sqrt(n_episodes))


def monte_carlo_occupancy(mdp: TabularMDP, pi, n_samples, rng):
    """Sample (s, a) from the discounted visitation by geometric stopping; returns empirical frequencies."""
    rng = np.random.default_rng(rng)
    S, A = mdp.n_states, mdp.n_actions
    s = rng.choice(S, size=n_samples, p=mdp.mu0)
    stop = rng.geometric(1.0 - mdp.gamma, size=n_samples) - 1
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    out_s = np.empty(n_samples, dtype=int)
    out_a = np.empty(n_samples, dtype=int)
    active = np.ones(n_samples, dtype=bool)
    t = 0
    while active.any():
        a = np.minimum((rng.random(n_samples)[:, None] > cum_pi[s]).sum(axis=1), A - 1)
        hit = active & (stop == t)
        out_s[hit], out_a[hit] = s[hit], a[hit]
        active &= ~hit
        s = np.minimum((rng.random(n_samples)[:, None] > cum_P[s, a]).sum(axis=1), S - 1)
        t += 1
    freq = np.zeros((S, A))
    np.add.at(freq, (out_s, out_a), 1.0)
    return freq / n_samples


# ----------------------------------------------------------------- divergences


def tv_distance(p, q):
    """Half L1 distance along the last axis."""
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise ValueError("distributions must share a shape")
    out = 0.5 * np.abs(p - q).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def tv_by_events(p, q) -> float:
    """max_E |p(E) - q(E)| by enumerating every event."""
    p, q = np.asarray(p), np.asarray(q)
    best = 0.0
    for mask in itertools.product((False, True), repeat=len(p)):
        m = np.array(mask)
        best = max(best, abs(p[m].sum() - q[m].sum()))
    return float(best)


def kl_rows(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def expected_tv2(P1, P2, weight) -> float:
    return float((np.asarray(weight) * tv_distance(P1, P2) ** 2).sum())


# ----------------------------------------------------------------- model classes


@dataclass
class ModelClass:
    """Finite set of transition tensors; ``members()`` keeps those within ``xi`` of the reference."""

    models: list
    reference: np.ndarray
    rho: np.ndarray  # (S, A) weights of the data distribution
    xi: float = math.inf
    divergence: str = "tv2"

    def divergence_to_reference(self, P) -> float:
        if self.divergence == "tv2":
            return expected_tv2(P, self.reference, self.rho)
        if self.divergence == "kl":
            return float((self.rho * kl_rows(self.reference, P)).sum())
        raise ValueError(f"unknown divergence {self.divergence!r}")

    def members(self) -> list:
        return [P for P in self.models if self.divergence_to_reference(P) <= self.xi]

    def __len__(self):
        return len(self.members())


def perturbed_class(P, rng, size, max_mix=0.5) -> list:
    """``P`` followed by ``size - 1`` random mixtures of its rows with fresh random rows."""
    rng = np.random.default_rng(rng)
    out = [np.array(P)]
    for _ in range(size - 1):
        eps = rng.uniform(0.0, max_mix, size=P.shape[:2] + (1,))
        noise = random_simplex(rng, P.shape)
        out.append((1 - eps) * P + eps * noise)
    return out


def inner_min(mdp: TabularMDP, models, pi):
    """Smallest value of ``pi`` over the given transition tensors; returns (value, index)."""
    if not models:
        raise ValueError("model class is empty")
    vals = [policy_value(mdp.with_transition(P), pi) for P in models]
    k = int(np.argmin(vals))
    return float(vals[k]), k


@dataclass
class PessimisticSolution:
    policy: np.ndarray
    model_index: int
    value: float


def pessimistic_solve(mdp: TabularMDP, models, policies=None, max_enumeration=4096) -> PessimisticSolution:
    """max over policies of the inner-min value; deterministic policies are enumerated when none are given."""
    if not models:
        raise ValueError("model class is empty")
    if policies is None:
        S, A = mdp.n_states, mdp.n_actions
        if A**S > max_enumeration:
            raise ValueError("too many deterministic policies to enumerate")
        policies = [deterministic_policy(np.array(acts), A) for acts in itertools.product(range(A), repeat=S)]
    best = None
    for pi in policies:
        v, k = inner_min(mdp, models, pi)
        if best is None or v > best.value:
            best = PessimisticSolution(np.asarray(pi), k, v)
    return best


def concentrability(models, P_true, d_star, rho) -> float:
    """max over models of E_{d*}[TV^2] / E_rho[TV^2] against the true transitions.

    Models with zero error under both measures are skipped; if every model is
    skipped the coefficient is 1.
    """
    best = None
    for P in models:
        tv2 = tv_distance(P, P_true) ** 2
        num = float((d_star * tv2).sum())
        den = float((rho * tv2).sum())
        if den == 0.0:
            if num == 0.0:
                continue
            raise CoverageError("data distribution has no mass where the comparator policy differs")
        ratio = num / den
        best = ratio if best is None else max(best, ratio)
    return 1.0 if best is None else best


# ----------------------------------------------------------------- log-linear policies


@dataclass
class LogLinearPolicy:
    features: np.ndarray  # (S, A, d)
    psi: np.ndarray  # (d,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)

    @property
    def phi_max(self) -> float:
        return float(np.max(np.linalg.norm(self.features, axis=-1)))

    def with_psi(self, psi) -> "LogLinearPolicy":
        return LogLinearPolicy(self.features, psi)

    def logits(self) -> np.ndarray:
        return self.features @ self.psi

    def probs(self) -> np.ndarray:
        z = self.logits()
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs(self) -> np.ndarray:
        z = self.logits()
        m = z.max(axis=1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))

    def grad_log(self) -> np.ndarray:
        """(S, A, d) array of score vectors: features minus their policy mean."""
        mean = np.einsum("sa,sad->sd", self.probs(), self.features)
        return self.features - mean[:, None, :]


def random_features(rng, n_states, n_actions, dim, phi_max=1.0) -> np.ndarray:
    rng = np.random.default_rng(rng)
    f = rng.normal(size=(n_states, n_actions, dim))
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    return f / np.maximum(norms, 1e-12) * phi_max * rng.uniform(0.2, 1.0, size=norms.shape)


def clip_norm(w, bound):
    n = np.linalg.norm(w)
    return w if n <= bound else w * (bound / n)


def fit_advantage_weights(advantage, scores, weight, bound=math.inf) -> np.ndarray:
    """Weighted least squares of the advantage on the score vectors, clipped to norm ``bound``."""
    sw = np.sqrt(np.asarray(weight).ravel())
    X = scores.reshape(-1, scores.shape[-1]) * sw[:, None]
    y = np.asarray(advantage).ravel() * sw
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    return clip_norm(w, bound)


# ----------------------------------------------------------------- decompositions


@dataclass
class DeltaTerms:
    a: float
    b: float
    c: float
    gap: float  # mean over t of V_T(pi*) - V_T(pi_t)

    @property
    def total(self) -> float:
        return self.a + self.b + self.c


def delta_decomposition(mdp: TabularMDP, models, pi_star, policies) -> DeltaTerms:
    """Split the average value gap of ``policies`` against ``pi_star`` into model error,
    pessimistic-value gap and pessimism slack."""
    if not policies:
        raise ValueError("need at least one policy")
    v_true_star = policy_value(mdp, pi_star)
    v_min_star, _ = inner_min(mdp, models, pi_star)
    a = b = c = gap = 0.0
    for pi in policies:
        v_min_t, _ = inner_min(mdp, models, pi)
        v_true_t = policy_value(mdp, pi)
        a += v_true_star - v_min_star
        b += v_min_star - v_min_t
        c += v_min_t - v_true_t
        gap += v_true_star - v_true_t
    n = len(policies)
    return DeltaTerms(a / n, b / n, c / n, gap / n)


@dataclass
class GammaTerms:
    a: float
    b: float
    c: float

    @property
    def total(self) -> float:
        return self.a + self.b + self.c


def gamma_decomposition(mdp: TabularMDP, P_tilde, pi_star, policy: LogLinearPolicy, w) -> GammaTerms:
    """Split the expected advantage of ``pi_star`` over ``policy`` under model ``P_tilde``.

    The three parts are the residual of the advantage after the linear
    score fit, the change of that fit's expectation between the model and the
    true transitions, and the fit's expectation under the true transitions.
    """
    model = mdp.with_transition(P_tilde)
    pi_t = policy.probs()
    V, Q = value_iteration(model, pi_t)
    adv = Q - V[:, None]
    lin = policy.grad_log() @ np.asarray(w)
    d_model = occupancy(model, pi_star)
    d_true = occupancy(mdp, pi_star)
    ga = float((d_model * (adv - lin)).sum())
    gb = float((d_model * lin).sum() - (d_true * lin).sum())
    gc = float((d_true * lin).sum())
    return GammaTerms(ga, gb, gc)


def performance_difference(mdp: TabularMDP, pi, pi_ref):
    """Returns (V(pi) - V(pi_ref), expected advantage of pi_ref's Q under d^pi divided by 1 - gamma)."""
    V, Q = value_iteration(mdp, pi_ref)
    d = occupancy(mdp, pi)
    adv = (d * (Q - V[:, None])).sum() / (1.0 - mdp.gamma)
    return policy_value(mdp, pi) - policy_value(mdp, pi_ref), float(adv)


# ----------------------------------------------------------------- lemma checks


@dataclass
class LemmaResult:
    name: str
    passed: bool
    detail: str


@dataclass
class LemmaReport:
    seed: int
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[str]:
        return [f"{r.name} (seed {self.seed}): {r.detail}" for r in self.results if not r.passed]


def simulation_lemma_bound(mdp: TabularMDP, P_other, pi):
    """Returns (|V_T - V_other|, 2 C gamma / (1 - gamma) E_{d_T}[TV]) with C = max |V_other|."""
    other = mdp.with_transition(P_other)
    V_o, _ = value_iteration(other, pi)
    C = float(np.max(np.abs(V_o)))
    lhs = abs(policy_value(mdp, pi) - float(mdp.mu0 @ V_o))
    tv = tv_distance(mdp.P, other.P)
    rhs = 2 * C * mdp.gamma / (1 - mdp.gamma) * float((occupancy(mdp, pi) * tv).sum())
    return lhs, rhs


def smoothness_ratio(policy: LogLinearPolicy, psi1, psi2) -> float:
    """max over (s, a) of ||grad log pi_1 - grad log pi_2|| / ||psi1 - psi2||."""
    g1 = policy.with_psi(psi1).grad_log()
    g2 = policy.with_psi(psi2).grad_log()
    return float(np.max(np.linalg.norm(g1 - g2, axis=-1)) / np.linalg.norm(np.asarray(psi1) - psi2))


def first_order_gap(policy: LogLinearPolicy, psi1, psi2) -> float:
    """max over (s, a) of |f(psi2) - f(psi1) - grad f(psi1).(psi2 - psi1)| for f = log pi(a|s)."""
    p1, p2 = policy.with_psi(psi1), policy.with_psi(psi2)
    lin = p1.grad_log() @ (np.asarray(psi2) - psi1)
    return float(np.max(np.abs(p2.log_probs() - p1.log_probs() - lin)))


def lemma_checks(seed, n_states=4, n_actions=3, dim=3, gamma=0.9, tol=1e-10) -> LemmaReport:
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n_states, n_actions, gamma)
    rep = LemmaReport(seed)
    pi, pi_ref = random_policy(rng, n_states, n_actions), random_policy(rng, n_states, n_actions)

    diff, adv = performance_difference(mdp, pi, pi_ref)
    rep.results.append(LemmaResult("performance-difference", abs(diff - adv) <= tol, f"{diff!r} vs {adv!r}"))

    P_other = perturbed_class(mdp.P, rng, 2)[1]
    lhs, rhs = simulation_lemma_bound(mdp, P_other, pi)
    rep.results.append(LemmaResult("simulation", lhs <= rhs + tol, f"{lhs:.6g} <= {rhs:.6g}"))

    _, Q = value_iteration(mdp, pi)
    qmax, bound = float(np.max(np.abs(Q))), mdp.r_max / (1 - gamma)
    rep.results.append(LemmaResult("q-bound", qmax <= bound + tol, f"{qmax:.6g} <= {bound:.6g}"))

    d1, d2 = state_occupancy(mdp, pi), state_occupancy(mdp, pi_ref)
    f = rng.normal(size=n_states)
    direct, weighted = float(d1 @ f), float(d2 @ (f * d1 / d2))
    rep.results.append(LemmaResult("change-of-measure", abs(direct - weighted) <= tol, f"{direct!r} vs {weighted!r}"))

    feats = random_features(rng, n_states, n_actions, dim)
    pol = LogLinearPolicy(feats, rng.normal(size=dim))
    analytic = pol.grad_log()
    h = 1e-6
    fd = np.zeros_like(analytic)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        fd[..., k] = (pol.with_psi(pol.psi + e).log_probs() - pol.with_psi(pol.psi - e).log_probs()) / (2 * h)
    rel = float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic) + np.abs(fd), 1e-8)))
    rep.results.append(LemmaResult("log-linear-gradient", rel < 1e-6, f"max rel err {rel:.2e}"))

    beta = pol.phi_max**2
    worst_ratio, worst_gap = 0.0, 0.0
    for _ in range(20):
        psi1, psi2 = rng.normal(size=dim) * 2, rng.normal(size=dim) * 2
        worst_ratio = max(worst_ratio, smoothness_ratio(pol, psi1, psi2))
        gap = first_order_gap(pol, psi1, psi2)
        worst_gap = max(worst_gap, gap / (0.5 * np.sum((psi1 - psi2) ** 2)))
    rep.results.append(LemmaResult("smoothness", worst_ratio <= beta + tol, f"{worst_ratio:.6g} <= {beta:.6g}"))
    rep.results.append(LemmaResult("first-order-deviation", worst_gap <= beta + tol,
                                   f"gap/(|dpsi|^2/2) {worst_gap:.6g} <= {beta:.6g}"))
    return rep


def sample_counts(mdp: TabularMDP, rho, n, rng) -> np.ndarray:
    """Transition counts (S, A, S) from ``n`` draws of (s, a) ~ rho, s' ~ P."""
    rng = np.random.default_rng(rng)
    S, A = mdp.n_states, mdp.n_actions
    flat = rng.choice(S * A, size=n, p=np.asarray(rho).ravel())
    s, a = np.divmod(flat, A)
    cum = np.cumsum(mdp.P[s, a], axis=1)
    nxt = np.minimum((rng.random(n)[:, None] > cum).sum(axis=1), S - 1)
    counts = np.zeros((S, A, S))
    np.add.at(counts, (s, a, nxt), 1.0)
    return counts


def mle_transitions(mdp: TabularMDP, rho, n, rng) -> np.ndarray:
    """Count-based maximum-likelihood transitions; unseen pairs get uniform rows."""
    counts = sample_counts(mdp, rho, n, rng)
    tot = counts.sum(axis=2, keepdims=True)
    return np.where(tot > 0, counts / np.maximum(tot, 1), 1.0 / mdp.n_states)


def log_likelihood(P, counts) -> float:
    with np.errstate(divide="ignore"):
        return float(np.where(counts > 0, counts * np.log(P), 0.0).sum())


def mle_tv2_curve(mdp: TabularMDP, rho, ns=(100, 1000, 10000), repeats=200, rng=None):
    """Mean E_rho[TV^2] of the count estimate for each sample size and the log-log slope."""
    rng = np.random.default_rng(rng)
    means = []
    for n in ns:
        vals = [expected_tv2(mle_transitions(mdp, rho, n, rng), mdp.P, rho) for _ in range(repeats)]
        means.append(float(np.mean(vals)))
    slope = float(np.polyfit(np.log(ns), np.log(means), 1)[0])
    return np.array(means), slope


# ----------------------------------------------------------------- group bound


@dataclass
class BoundConstants:
    gamma: float
    n_actions: int
    r_max: float
    conc: float  # concentrability of the comparator policy
    class_size: int
    chi_bar: int
    n_agents: int
    eta: float
    W: float
    phi_max: float
    occupancy_ratio: float  # sup over states of d_T^{pi*}(s) / mu0(s)
    delta: float
    c1: float = 1.0
    c2: float = 1.0

    @property
    def c3(self) -> float:
        return self.W * self.phi_max

    def check(self):
        missing = [k for k, v in vars(self).items() if v is None]
        if missing:
            raise BoundConfigError(f"missing constants: {', '.join(missing)}")
        if not 0 < self.delta < 1:
            raise BoundConfigError("delta must lie in (0, 1)")


def group_bound_terms(c: BoundConstants, k: int, H: int) -> dict:
    """Individual terms of the group sub-optimality bound for ``k`` episodes of length ``H``."""
    c.check()
    g, A, Rm, I = c.gamma, c.n_actions, c.r_max, c.n_agents
    lead = c.c1 / (1 - g) ** 2 + 4 * c.c3 * g * (A + 1) / (1 - g) ** 3 + 4 * g * A * Rm / (1 - g) ** 4
    stat = math.sqrt(c.conc * c.chi_bar * I * math.log(c.c2 * c.class_size / c.delta) / (k * H))
    outer = 2 * math.sqrt(2) * A / (1 - g) ** 2 * math.sqrt(c.occupancy_ratio)
    inner = (Rm / (1 - g) * (math.log(2 / c.delta) * c.chi_bar * I / (2 * k * H)) ** 0.25
             + I * Rm / (1 - g) + c.c3 * I)
    return {
        "statistical": lead * stat,
        "transfer": outer * inner,
        "step_size": c.c3**2 * c.eta * I / (2 * (1 - g)),
        "optimization": I * math.log(A) / (c.eta * (H + 1) * (1 - g)),
    }


def group_bound_rhs(c: BoundConstants, k: int, H: int) -> float:
    return float(sum(group_bound_terms(c, k, H).values()))


def npg_run(mdp: TabularMDP, models, policy: LogLinearPolicy, steps: int, eta: float, W: float):
    """Natural policy gradient against the pessimistic model; returns the list of iterate policies."""
    out = []
    psi = policy.psi.copy()
    for _ in range(steps + 1):
        pol = policy.with_psi(psi)
        pi = pol.probs()
        out.append(pi)
        _, k = inner_min(mdp, models, pi)
        model = mdp.with_transition(models[k])
        V, Q = value_iteration(model, pi)
        w = fit_advantage_weights(Q - V[:, None], pol.grad_log(), occupancy(model, pi), W)
        psi = psi + eta * w
    return out


@dataclass
class GroupBoundRow:
    seed: int
    lhs: float
    rhs: float
    class_size: int
    conc: float
    true_in_class: bool

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def group_bound_instance(seed, delta=0.1, n_agents=4, cliques=None, k=4, H=50, n_states=4, n_actions=2,
                      gamma=0.9, dim=3, class_size=16, eta=0.5, W=10.0) -> GroupBoundRow:
    """One replication: data per agent from its clique, a pessimistic NPG run per agent, LHS vs RHS."""
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n_states, n_actions, gamma)
    cliques = cliques or [[i] for i in range(n_agents)]
    rho = random_simplex(rng, (n_states * n_actions,)).reshape(n_states, n_actions) * 0.5 + 0.5 / (
        n_states * n_actions)
    feats = random_features(rng, n_states, n_actions, dim)
    candidates = perturbed_class(mdp.P, rng, class_size)
    pi_star = optimal_policy(mdp)
    v_star = policy_value(mdp, pi_star)
    lhs = 0.0
    sizes, concs, contains = [], [], True
    clique_of = {i: c for c in cliques for i in c}
    for i in range(n_agents):
        n = len(clique_of[i]) * k * H
        counts = sample_counts(mdp, rho, n, rng)
        # likelihood-best member of the finite class, then the xi-ball around it
        ref = candidates[int(np.argmax([log_likelihood(P, counts) for P in candidates]))]
        xi = math.log(class_size / delta) / n
        mc = ModelClass(candidates, ref, rho, xi)
        members = mc.members()
        contains &= any(P is candidates[0] for P in members)
        sizes.append(len(members))
        concs.append(concentrability(members, mdp.P, occupancy(mdp, pi_star), rho))
        iters = npg_run(mdp, members, LogLinearPolicy(feats, np.zeros(dim)), H, eta, W)
        lhs += float(np.mean([v_star - policy_value(mdp, pi) for pi in iters]))
    d_state = state_occupancy(mdp, pi_star)
    consts = BoundConstants(gamma, n_actions, mdp.r_max, max(concs), max(sizes), len(cliques), n_agents, eta, W,
                            float(np.max(np.linalg.norm(feats, axis=-1))), float(np.max(d_state / mdp.mu0)), delta)
    return GroupBoundRow(int(seed), lhs, group_bound_rhs(consts, k, H), max(sizes), max(concs), bool(contains))


def write_group_bound_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "lhs", "rhs", "holds", "class_size", "concentrability", "true_model_in_class"])
        for r in rows:
            w.writerow([r.seed, repr(r.lhs), repr(r.rhs), int(r.holds), r.class_size, repr(r.conc),
                        int(r.true_in_class)])


def write_summary(rows, delta, path) -> str:
    held = sum(r.holds for r in rows)
    frac = held / len(rows) if rows else 0.0
    lines = [
        f"instances: {len(rows)}",
        f"bound held: {held} ({frac:.3f}); required fraction {1 - delta:.3f}",
        f"verdict: {'PASS' if frac >= 1 - delta else 'FAIL'}",
        f"true model kept in the constraint set: {sum(r.true_in_class for r in rows)}",
        f"median lhs / rhs: {np.median([r.lhs / r.rhs for r in rows]) if rows else float('nan'):.3e}",
    ]
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


# ----------------------------------------------------------------- instance files


def write_instance(mdp: TabularMDP, path) -> None:
    S, A = mdp.n_states, mdp.n_actions
    lines = [f"dims {S} {A}", f"gamma {mdp.gamma!r}", "P"]
    lines += [" ".join(repr(float(x)) for x in mdp.P[s, a]) for s in range(S) for a in range(A)]
    lines.append("R")
    lines += [" ".join(repr(float(x)) for x in mdp.R[s]) for s in range(S)]
    lines.append("mu0")
    lines.append(" ".join(repr(float(x)) for x in mdp.mu0))
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path) -> TabularMDP:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    _, S, A = lines[0].split()
    S, A = int(S), int(A)
    gamma = float(lines[1].split()[1])
    i = lines.index("P") + 1
    P = np.array([[float(x) for x in ln.split()] for ln in lines[i:i + S * A]]).reshape(S, A, S)
    i = lines.index("R") + 1
    R = np.array([[float(x) for x in ln.split()] for ln in lines[i:i + S]])
    mu0 = np.array([float(x) for x in lines[lines.index("mu0") + 1].split()])
    return TabularMDP(P, R, mu0, gamma)


def boundlab_report(n_instances: int, delta: float, out_dir, lemma_seeds: int | None = None):
    """Lemma checks and group-bound replications over seeds ``0..n_instances-1``.

    Writes ``lemmas.txt``, ``group_bound.csv`` and ``summary.txt`` into ``out_dir``.
    Returns (ok, summary text); ``ok`` requires every lemma check to pass and the
    bound to hold on at least a ``1 - delta`` fraction of instances.
    """
    if n_instances < 1:
        raise BoundConfigError("need at least one instance")
    if not 0.0 < delta < 1.0:
        raise BoundConfigError("delta must lie in (0, 1)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = [lemma_checks(s) for s in range(lemma_seeds or n_instances)]
    failures = [f for r in reports for f in r.failures()]
    lemma_lines = [f"{r.seed} {x.name} {'pass' if x.passed else 'FAIL'} {x.detail}" for r in reports for x in r.results]
    (out / "lemmas.txt").write_text("\n".join(lemma_lines) + "\n")
    rows = [group_bound_instance(s, delta=delta) for s in range(n_instances)]
    write_group_bound_csv(rows, out / "group_bound.csv")
    text = write_summary(rows, delta, out / "summary.txt")
    text += f"lemma checks: {len(lemma_lines) - len(failures)}/{len(lemma_lines)} passed\n"
    for f in failures:
        text += f"lemma failure: {f}\n"
    (out / "summary.txt").write_text(text)
    frac = sum(r.holds for r in rows) / len(rows)
    return (not failures) and frac >= 1 - delta, text
