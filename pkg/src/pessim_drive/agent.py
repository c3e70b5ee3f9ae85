"""Per-agent soft actor-critic: twin critics, tanh-Gaussian actor, auto-tuned temperature."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Batch, ReplayBuffer
from .nn import AdamState, Mlp, Trainable, adam_step, split_gaussian
from .traffic import ACTION_DIM, STATE_DIM, TrafficConfig

log = logging.getLogger(__name__)

V_MAX = 13.89
R_MAX = 45.0
GAMMA = 0.98
TAU = 0.01
LR_ACTOR = 1e-4
LR_CRITIC = 1e-3
LR_TEMP = 1e-3
REAL_RATIO = 0.7
LOG_TEMP_MIN, LOG_TEMP_MAX = -10.0, 2.0
_LOG2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def observation_scaling(cfg: TrafficConfig | None = None):
    """Fixed affine map of raw observations to roughly [-1, 1]."""
    cfg = cfg or TrafficConfig()
    r = cfg.radius
    half_v = cfg.v_max / 2
    half_l = cfg.sensor_range / 2
    center = np.array([half_v, 0.0, 0.0, half_v, half_l, half_v, half_l, cfg.half / 2, 0.5])
    scale = np.array([half_v, 2 * r, r, half_v, half_l, half_v, half_l, cfg.half / 2, 0.5])
    return center, scale


@dataclass
class AgentConfig:
    hidden: tuple = (256, 256, 256)
    gamma: float = GAMMA
    tau: float = TAU
    lr_actor: float = LR_ACTOR
    lr_critic: float = LR_CRITIC
    lr_temp: float = LR_TEMP
    init_temperature: float = 0.1
    fixed_temperature: float | None = None
    reward_scale: float = 0.02
    v_max: float = V_MAX
    r_max: float = R_MAX


class AgentNets:
    def __init__(self, cfg: AgentConfig | None = None, rng=None, state_dim=STATE_DIM, action_dim=ACTION_DIM):
        cfg = cfg or AgentConfig()
        rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        self.policy = Trainable(Mlp((state_dim, *cfg.hidden, 2), rng=rng), cfg.lr_actor)
        self.q1 = Trainable(Mlp((state_dim + action_dim, *cfg.hidden, 1), rng=rng), cfg.lr_critic)
        self.q2 = Trainable(Mlp((state_dim + action_dim, *cfg.hidden, 1), rng=rng), cfg.lr_critic)
        self.q1_target = self.q1.net.copy()
        self.q2_target = self.q2.net.copy()
        temp = cfg.fixed_temperature if cfg.fixed_temperature is not None else cfg.init_temperature
        self.log_temperature = float(np.clip(np.log(max(temp, 1e-300)), LOG_TEMP_MIN, LOG_TEMP_MAX))
        self.temp_adam = AdamState.zeros(1)
        self.obs_center, self.obs_scale = observation_scaling()
        self.target_entropy = -1.0  # one active action dimension

    @property
    def temperature(self) -> float:
        if self.cfg.fixed_temperature is not None:
            return self.cfg.fixed_temperature
        return math.exp(self.log_temperature)

    def norm_obs(self, s):
        return (np.asarray(s, dtype=np.float64) - self.obs_center) / self.obs_scale

    def norm_action(self, a):
        a = np.atleast_2d(a)
        return np.hstack([2.0 * a[:, :1] / self.cfg.v_max - 1.0, a[:, 1:]])


# ----------------------------------------------------------- differentiable pieces


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def policy_sample(nets: AgentNets, s, eps):
    """Reparameterized action for each row of ``s``.

    Returns (physical actions (n, action_dim), log-prob in squashed space, cache).
    """
    s = np.atleast_2d(s)
    out, acts = nets.policy.net.forward_cached(nets.norm_obs(s))
    mean, lv, mask = split_gaussian(out)
    std = np.exp(0.5 * lv)
    eps = np.asarray(eps, dtype=np.float64).reshape(mean.shape)
    u = mean + std * eps
    t = np.tanh(u)
    logp = (-0.5 * eps**2 - 0.5 * lv - _HALF_LOG_2PI - _log1m_tanh2(u)).sum(axis=1)
    a = np.zeros((len(s), nets.action_dim))
    a[:, 0] = nets.cfg.v_max * (t[:, 0] + 1.0) / 2.0
    return a, logp, (acts, lv, mask, std, eps, u, t)


def policy_sample_vjp(nets: AgentNets, cache, g_a, g_logp):
    """Pull cotangents of (actions, log-prob) back to (policy params, raw state)."""
    acts, lv, mask, std, eps, u, t = cache
    g_t = np.zeros_like(t)
    if g_a is not None:
        g_t[:, 0] = np.asarray(g_a)[:, 0] * nets.cfg.v_max / 2.0
    g_u = g_t * (1.0 - t**2)
    g_lv = np.zeros_like(lv)
    if g_logp is not None:
        g_logp = np.asarray(g_logp)[:, None]
        g_u = g_u + g_logp * 2.0 * t
        g_lv = g_logp * (-0.5)
    g_mean = g_u
    g_lv = (g_lv + g_u * eps * 0.5 * std) * mask
    g_params, g_in = nets.policy.net.vjp(acts, np.hstack([g_mean, g_lv]))
    return g_params, g_in / nets.obs_scale


def q_forward(net: Mlp, nets: AgentNets, s, a):
    x = np.hstack([nets.norm_obs(np.atleast_2d(s)), nets.norm_action(a)])
    out, acts = net.forward_cached(x)
    return out[:, 0], acts


def q_vjp(net: Mlp, nets: AgentNets, acts, g_q):
    """Returns (param grad, grad w.r.t. raw state, grad w.r.t. physical action)."""
    g_params, g_in = net.vjp(acts, np.asarray(g_q)[:, None])
    sd = nets.state_dim
    g_s = g_in[:, :sd] / nets.obs_scale
    g_a = g_in[:, sd:].copy()
    g_a[:, 0] *= 2.0 / nets.cfg.v_max
    return g_params, g_s, g_a


def min_q(nets: AgentNets, s, a, target=False):
    n1, n2 = (nets.q1_target, nets.q2_target) if target else (nets.q1.net, nets.q2.net)
    v1, c1 = q_forward(n1, nets, s, a)
    v2, c2 = q_forward(n2, nets, s, a)
    first = v1 <= v2
    return np.where(first, v1, v2), (n1, n2, c1, c2, first)


def min_q_vjp(nets: AgentNets, cache, g_q):
    """Cotangent of min(Q1, Q2) pulled back to (raw state, physical action)."""
    n1, n2, c1, c2, first = cache
    g_q = np.asarray(g_q)
    _, s1, a1 = q_vjp(n1, nets, c1, np.where(first, g_q, 0.0))
    _, s2, a2 = q_vjp(n2, nets, c2, np.where(first, 0.0, g_q))
    return s1 + s2, a1 + a2


# ----------------------------------------------------------- acting and updates


def act(nets: AgentNets, s, deterministic=False, seed=None, rng=None):
    """Action(s) for observation(s) ``s``; single observations give a 1-d result."""
    single = np.ndim(s) == 1
    s2 = np.atleast_2d(s)
    if deterministic:
        eps = np.zeros((len(s2), 1))
    else:
        rng = rng if rng is not None else np.random.default_rng(seed)
        eps = rng.standard_normal((len(s2), 1))
    a, _, _ = policy_sample(nets, s2, eps)
    return a[0] if single else a


def policy_fn(nets: AgentNets):
    """Adapter for :func:`dynamics.rollout`."""
    return lambda states, rng: act(nets, states, rng=rng)


def critic_targets(nets: AgentNets, batch: Batch, rng, gamma=None):
    gamma = nets.cfg.gamma if gamma is None else gamma
    eps = rng.standard_normal((len(batch), 1))
    a2, logp2, _ = policy_sample(nets, batch.s_next, eps)
    q_next, _ = min_q(nets, batch.s_next, a2, target=True)
    r = np.clip(batch.r, -nets.cfg.r_max, nets.cfg.r_max) * nets.cfg.reward_scale
    soft = q_next - nets.temperature * logp2
    return r + gamma * (1.0 - batch.done) * soft


def critic_loss(nets: AgentNets, batch: Batch, y):
    """Sum of both critics' mean squared TD errors and their parameter gradients."""
    loss = 0.0
    grads = []
    for q in (nets.q1, nets.q2):
        v, acts = q_forward(q.net, nets, batch.s, batch.a)
        d = v - y
        loss += float(np.mean(d * d))
        g, _, _ = q_vjp(q.net, nets, acts, 2.0 * d / len(d))
        grads.append(g)
    return loss, grads


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    target.params.values = (1.0 - tau) * target.params.values + tau * online.params.values


def critic_update(nets: AgentNets, batch: Batch, rng, gamma=None, tau=None) -> float:
    """One gradient step on both critics followed by a soft target update.

    Returns the TD loss, or NaN if the batch was rejected for non-finite targets.
    """
    y = critic_targets(nets, batch, rng, gamma)
    if not np.all(np.isfinite(y)):
        log.warning("critic update skipped: non-finite targets")
        return float("nan")
    loss, (g1, g2) = critic_loss(nets, batch, y)
    nets.q1.step(g1)
    nets.q2.step(g2)
    tau = nets.cfg.tau if tau is None else tau
    soft_update(nets.q1_target, nets.q1.net, tau)
    soft_update(nets.q2_target, nets.q2.net, tau)
    return loss


def actor_loss(nets: AgentNets, states, eps, temperature=None, critic=None):
    """Entropy-regularized actor objective ``mean(alpha * log pi - min Q)`` and its gradient.

    ``critic(states, actions) -> (q, dq/da)`` replaces the twin critics when given.
    """
    alpha = nets.temperature if temperature is None else temperature
    a, logp, pcache = policy_sample(nets, states, eps)
    n = len(logp)
    if critic is None:
        q, qcache = min_q(nets, states, a)
        _, g_a = min_q_vjp(nets, qcache, -np.ones(n) / n)
    else:
        q, dq = critic(np.atleast_2d(states), a)
        g_a = -np.asarray(dq) / n
    loss = float(np.mean(alpha * logp - q))
    grad, _ = policy_sample_vjp(nets, pcache, g_a, np.full(n, alpha / n))
    return loss, grad, logp


def actor_update(nets: AgentNets, batch: Batch, rng, temperature=None):
    """One Adam step on the actor. Returns (loss, log-probs of the sampled actions)."""
    eps = rng.standard_normal((len(batch), 1))
    loss, grad, logp = actor_loss(nets, batch.s, eps, temperature)
    if not np.isfinite(loss):
        log.warning("actor update skipped: non-finite loss")
        return float("nan"), logp
    nets.policy.step(grad)
    return loss, logp


def temperature_grad(nets: AgentNets, logp) -> float:
    """d/d(log alpha) of ``-alpha * mean(log pi + target_entropy)``."""
    return float(-nets.temperature * np.mean(logp + nets.target_entropy))


def temperature_update(nets: AgentNets, logp) -> float:
    if nets.cfg.fixed_temperature is not None:
        return nets.temperature
    g = np.array([temperature_grad(nets, logp)])
    new, nets.temp_adam = adam_step(np.array([nets.log_temperature]), g, nets.temp_adam, nets.cfg.lr_temp)
    nets.log_temperature = float(np.clip(new[0], LOG_TEMP_MIN, LOG_TEMP_MAX))
    return nets.temperature


@dataclass
class MixedBatch:
    real: Batch
    synthetic: Batch
    ratio: float
    warning: str = ""

    def combined(self) -> Batch:
        return Batch.concat([self.real, self.synthetic])

    def __len__(self):
        return len(self.real) + len(self.synthetic)


def mix_batches(real_buf: ReplayBuffer, model_buf: ReplayBuffer | None, ratio: float, size: int, rng) -> MixedBatch:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    warning = ""
    if model_buf is None or len(model_buf) == 0:
        if ratio < 1.0:
            warning = "model buffer empty; batch is all real"
        n_real, n_syn = size, 0
    else:
        n_real = int(round(ratio * size))
        n_syn = size - n_real
    if n_real > len(real_buf) or (model_buf is not None and n_syn > len(model_buf)):
        warning = warning or f"requested {size} samples but fewer are available"
    real = real_buf.sample(n_real, rng) if len(real_buf) else Batch.empty()
    syn = model_buf.sample(n_syn, rng) if n_syn else Batch.empty()
    return MixedBatch(real, syn, ratio, warning)


def q_bound(nets: AgentNets, slack=0.1) -> float:
    return nets.cfg.r_max * nets.cfg.reward_scale / (1.0 - nets.cfg.gamma) * (1.0 + slack)


@dataclass
class UpdateStats:
    critic_loss: float
    actor_loss: float
    entropy: float
    temperature: float
    q_mean: float
    diverged: bool


def agent_update(nets: AgentNets, batch: Batch, rng) -> UpdateStats:
    """Critic, actor and temperature step on one mixed batch."""
    c_loss = critic_update(nets, batch, rng)
    a_loss, logp = actor_update(nets, batch, rng)
    temp = temperature_update(nets, logp)
    q, _ = min_q(nets, batch.s, batch.a)
    q_mean = float(np.mean(q))
    diverged = bool(np.max(np.abs(q)) > q_bound(nets))
    if diverged:
        log.warning("Q estimates outside the return bound: max |Q| = %.3f", np.max(np.abs(q)))
    return UpdateStats(c_loss, a_loss, float(-np.mean(logp)), temp, q_mean, diverged)
