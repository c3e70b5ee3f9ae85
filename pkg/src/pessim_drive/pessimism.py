"""Inner minimization over dynamics models: pathwise value estimate and projected descent."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .agent import AgentNets, min_q, min_q_vjp, policy_sample, policy_sample_vjp
from .dynamics import ConstraintSpec, DynamicsModel, empirical_kl
from .nn import AdamState, adam_step, split_gaussian

log = logging.getLogger(__name__)

PGD_STEP = 1e-3
DEFAULT_ITERS = 10
MAX_HALVINGS = 20


class CandidateMode(str, Enum):
    BEST = "best"
    AVERAGE = "average"
    FINAL = "final"

    @classmethod
    def parse(cls, name) -> "CandidateMode":
        if isinstance(name, cls):
            return name
        aliases = {"avg": "average", "last": "final"}
        return cls(aliases.get(name, name))


@dataclass
class Objective:
    value: float
    grad: np.ndarray
    valid: bool = True


def pessimism_objective(model: DynamicsModel, nets: AgentNets, start_states, horizon: int, seed=None,
                        gamma=None, reward_scale=None, terminal_fn=None, deterministic=False) -> Objective:
    """Value of the agent's policy under ``model`` from ``start_states`` and its gradient in the model params.

    Estimates mean_i [ sum_{j<h} gamma^j r_j + gamma^h min(Q1, Q2)(s_h, pi(s_h)) ] with
    model transitions and policy actions drawn by reparameterization from a
    noise stream fixed by ``seed``; rewards are multiplied by ``reward_scale`` so
    they share units with the critics.  Trajectories whose predicted state is
    flagged by ``terminal_fn`` stop collecting reward and are not bootstrapped.
    ``deterministic`` replaces the model noise (not the policy noise) by zeros.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    gamma = nets.cfg.gamma if gamma is None else gamma
    scale = nets.cfg.reward_scale if reward_scale is None else reward_scale
    rng = np.random.default_rng(seed)
    s = np.array(np.atleast_2d(start_states), dtype=np.float64)
    n, sd = s.shape
    net, norm = model.net, model.norm
    tape = []
    value = np.zeros(n)
    alive = np.ones(n)
    with np.errstate(all="ignore"):
        for j in range(horizon):
            a, _, pcache = policy_sample(nets, s, rng.standard_normal((n, 1)))
            out, acts = net.forward_cached(model.inputs(s, a))
            mean, lv, mask = split_gaussian(out)
            std = np.exp(0.5 * lv)
            noise = rng.standard_normal(mean.shape)
            if deterministic:
                noise[:] = 0.0
            e = norm.tgt_mean + norm.tgt_std * (mean + std * noise)
            value += alive * gamma**j * scale * e[:, sd]
            tape.append((pcache, acts, mask, std, noise, alive))
            s = s + e[:, :sd]
            if terminal_fn is not None:
                alive = alive * ~np.asarray(terminal_fn(s), dtype=bool)
        a, _, pcache = policy_sample(nets, s, rng.standard_normal((n, 1)))
        q, qcache = min_q(nets, s, a)
        value += alive * gamma**horizon * q
        total = float(np.mean(value))
    if not np.isfinite(total):
        return Objective(float("nan"), np.zeros_like(model.params), False)

    grad = np.zeros_like(model.params)
    g_s, g_a = min_q_vjp(nets, qcache, alive * gamma**horizon / n)
    _, g_sp = policy_sample_vjp(nets, pcache, g_a, None)
    g_s = g_s + g_sp
    for j in range(horizon - 1, -1, -1):
        pcache, acts, mask, std, noise, live = tape[j]
        g_e = np.hstack([g_s, (live * gamma**j * scale / n)[:, None]])
        g_z = g_e * norm.tgt_std
        g_out = np.hstack([g_z, g_z * noise * 0.5 * std * mask])
        g_p, g_x = net.vjp(acts, g_out)
        grad += g_p
        g_in = g_x / norm.in_std
        _, g_sp = policy_sample_vjp(nets, pcache, g_in[:, sd:], None)
        g_s = g_s + g_in[:, :sd] + g_sp
    if not np.all(np.isfinite(grad)):
        return Objective(total, np.zeros_like(grad), False)
    return Objective(total, grad, True)


def pgd_step(phi, grad, step_size, spec: ConstraintSpec, phi_prev_feasible):
    """Descent step followed by backtracking toward the last feasible point.

    Returns (next params, kl at the returned point, number of halvings); the
    result always passes a fresh membership check.  After ``MAX_HALVINGS``
    failed halvings the previous feasible point is returned unchanged.
    """
    phi = np.asarray(phi, dtype=np.float64)
    anchor = np.asarray(phi_prev_feasible, dtype=np.float64)
    raw = phi - step_size * np.asarray(grad)
    cand = raw
    for k in range(MAX_HALVINGS + 1):
        kl = empirical_kl(spec.mle_model.with_params(cand), spec)
        if np.isfinite(kl) and kl <= spec.xi:
            return cand, kl, k
        cand = anchor + (raw - anchor) / 2.0 ** (k + 1)
    log.info("pgd: backtracking stalled after %d halvings", MAX_HALVINGS)
    return anchor.copy(), empirical_kl(spec.mle_model.with_params(anchor), spec), MAX_HALVINGS + 1


@dataclass
class Candidate:
    phi: np.ndarray
    objective: float
    feasible: bool
    kl: float


@dataclass
class PgdTrace:
    step_size: float
    max_iters: int
    candidates: list = field(default_factory=list)
    selected: int = -1
    stalls: int = 0

    def objectives(self) -> np.ndarray:
        return np.array([c.objective for c in self.candidates])

    def best_index(self) -> int:
        return int(np.argmin(self.objectives()))

    def rows(self):
        return [(k + 1, c.objective, int(c.feasible), c.kl) for k, c in enumerate(self.candidates)]


def write_trace_csv(trace: PgdTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "feasible", "kl"])
        for it, obj, feas, kl in trace.rows():
            w.writerow([it, repr(float(obj)), feas, repr(float(kl))])


def _restore_toward(phi, target, spec: ConstraintSpec):
    """Halve the segment from ``target`` (feasible) to ``phi`` until feasible."""
    for k in range(MAX_HALVINGS + 1):
        cand = target + (phi - target) / 2.0**k
        kl = empirical_kl(spec.mle_model.with_params(cand), spec)
        if np.isfinite(kl) and kl <= spec.xi:
            return cand
    return np.array(target, copy=True)


def run_pgd(spec: ConstraintSpec, nets: AgentNets | None, start_states, iters: int = DEFAULT_ITERS,
            mode=CandidateMode.BEST, seed=None, step_size: float = PGD_STEP, horizon: int = 8,
            objective=None, terminal_fn=None, preconditioner: str = "adam"):
    """Projected descent from the MLE parameters; returns (selected model, trace).

    ``objective(model) -> Objective`` replaces the default pathwise value
    estimate when given.  Every iterate is evaluated under the same noise stream.
    With ``preconditioner="adam"`` the descent direction is the bias-corrected
    Adam ratio m/(sqrt(v)+eps) with fresh moments per run; ``"none"`` uses the
    raw gradient.  Projection is the same in both cases.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if preconditioner not in ("adam", "none"):
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    mode = CandidateMode.parse(mode)
    if objective is None:
        def objective(m):
            return pessimism_objective(m, nets, start_states, horizon, seed=seed, terminal_fn=terminal_fn)
    mle = spec.mle_model
    trace = PgdTrace(step_size, iters)
    phi = mle.params.copy()
    cur = objective(mle)
    moments = AdamState.zeros(phi.size)
    for _ in range(iters):
        if not cur.valid:
            break
        direction = cur.grad
        if preconditioner == "adam":
            neg, moments = adam_step(np.zeros_like(phi), cur.grad, moments, 1.0)
            direction = -neg
        nxt, kl, halvings = pgd_step(phi, direction, step_size, spec, phi)
        if halvings > MAX_HALVINGS:
            trace.stalls += 1
        model = mle.with_params(nxt)
        res = objective(model)
        if not res.valid or not np.isfinite(res.value):
            log.info("pgd: skipping iterate with invalid objective")
            continue
        feasible = bool(np.isfinite(kl) and kl <= spec.xi)
        trace.candidates.append(Candidate(nxt, float(res.value), feasible, float(kl)))
        phi, cur = nxt, res
    if not trace.candidates:
        log.warning("pgd: no valid iterate, falling back to the MLE model")
        return mle.with_params(mle.params), trace
    best = trace.best_index()
    if mode is CandidateMode.BEST:
        trace.selected = best
        chosen = trace.candidates[best].phi
    elif mode is CandidateMode.FINAL:
        trace.selected = len(trace.candidates) - 1
        chosen = trace.candidates[-1].phi
    else:
        avg = np.mean([c.phi for c in trace.candidates], axis=0)
        chosen = _restore_toward(avg, trace.candidates[best].phi, spec)
    return mle.with_params(chosen), trace
