"""Replay buffers, the Gaussian dynamics/reward model and its KL constraint set."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import DiagGaussian, Mlp, ShapeError, Trainable, split_gaussian
from .traffic import ACTION_DIM, STATE_DIM

log = logging.getLogger(__name__)

REAL_CAPACITY = 20_000
MODEL_CAPACITY = 7_000
DEFAULT_XI = 0.1


class NotReadyError(RuntimeError):
    """Raised when a buffer holds too little data to fit a model."""


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    episode_id: int = 0
    step_id: int = 0
    source_agent: int = 1
    done: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    episode: np.ndarray = None
    step: np.ndarray = None
    agent: np.ndarray = None

    def __post_init__(self):
        n = len(self.r)
        for name in ("episode", "step", "agent"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(n, dtype=np.int64))

    def __len__(self):
        return len(self.r)

    @classmethod
    def empty(cls) -> "Batch":
        return cls(np.zeros((0, STATE_DIM)), np.zeros((0, ACTION_DIM)), np.zeros(0), np.zeros((0, STATE_DIM)),
                   np.zeros(0, dtype=bool))

    @classmethod
    def from_transitions(cls, items) -> "Batch":
        items = list(items)
        if not items:
            return cls.empty()
        return cls(
            np.array([t.s for t in items], dtype=np.float64),
            np.array([t.a for t in items], dtype=np.float64),
            np.array([t.r for t in items], dtype=np.float64),
            np.array([t.s_next for t in items], dtype=np.float64),
            np.array([t.done for t in items], dtype=bool),
            np.array([t.episode_id for t in items], dtype=np.int64),
            np.array([t.step_id for t in items], dtype=np.int64),
            np.array([t.source_agent for t in items], dtype=np.int64),
        )

    def transitions(self):
        for k in range(len(self)):
            yield Transition(self.s[k], self.a[k], float(self.r[k]), self.s_next[k], int(self.episode[k]),
                             int(self.step[k]), int(self.agent[k]), bool(self.done[k]))

    def take(self, idx) -> "Batch":
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx],
                     self.episode[idx], self.step[idx], self.agent[idx])

    @staticmethod
    def concat(parts) -> "Batch":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Batch.empty()
        return Batch(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("s", "a", "r", "s_next", "done", "episode", "step", "agent")))


class ReplayBuffer:
    """FIFO ring buffer of transitions, keyed by (episode, step, source agent)."""

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, action_dim: int = ACTION_DIM):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.agent = np.zeros(capacity, dtype=np.int64)
        self._head = 0
        self._size = 0
        self._keys: dict[tuple, int] = {}

    def __len__(self):
        return self._size

    def __contains__(self, key) -> bool:
        return tuple(key) in self._keys

    def add(self, t: Transition, keyed: bool = True) -> bool:
        return self.add_batch(Batch.from_transitions([t]), keyed) == 1

    def add_batch(self, batch: Batch, keyed: bool = True) -> int:
        """Append a batch, skipping already-present keys when ``keyed``. Returns count added."""
        added = 0
        for k in range(len(batch)):
            key = (int(batch.episode[k]), int(batch.step[k]), int(batch.agent[k]))
            if keyed and key in self._keys:
                continue
            i = self._head
            if self._size == self.capacity:
                old = (int(self.episode[i]), int(self.step[i]), int(self.agent[i]))
                if self._keys.get(old) == i:
                    del self._keys[old]
            self.s[i], self.a[i], self.r[i] = batch.s[k], batch.a[k], batch.r[k]
            self.s_next[i], self.done[i] = batch.s_next[k], batch.done[k]
            self.episode[i], self.step[i], self.agent[i] = key
            if keyed:
                self._keys[key] = i
            self._head = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            added += 1
        return added

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def all(self) -> Batch:
        """Contents oldest first."""
        return self._view(self._order())

    def _view(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx],
                     self.episode[idx], self.step[idx], self.agent[idx])

    def sample(self, n: int, rng) -> Batch:
        """Uniform sample without replacement (``n`` capped at the buffer size)."""
        n = min(int(n), self._size)
        idx = rng.choice(self._size, size=n, replace=False)
        return self._view(self._order()[idx])

    def select(self, mask_fn) -> Batch:
        b = self.all()
        return b.take(mask_fn(b))


def _csv_header():
    return (["episode", "step", "agent"] + [f"s{k}" for k in range(STATE_DIM)]
            + [f"a{k}" for k in range(ACTION_DIM)] + ["r"] + [f"sn{k}" for k in range(STATE_DIM)] + ["done"])


def dump_buffer_csv(buffer: ReplayBuffer, path) -> None:
    b = buffer.all()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_csv_header())
        for k in range(len(b)):
            w.writerow([int(b.episode[k]), int(b.step[k]), int(b.agent[k])]
                       + [repr(float(x)) for x in b.s[k]] + [repr(float(x)) for x in b.a[k]]
                       + [repr(float(b.r[k]))] + [repr(float(x)) for x in b.s_next[k]] + [int(b.done[k])])


def load_buffer_csv(path, capacity: int = REAL_CAPACITY) -> ReplayBuffer:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[: len(_csv_header()) - 1] != _csv_header()[:-1]:
        raise ValueError(f"{path}: unexpected header")
    has_done = header[-1] == "done"
    buf = ReplayBuffer(capacity)
    S, A = STATE_DIM, ACTION_DIM
    for row in body:
        vals = [float(x) for x in row[3:]]
        buf.add(Transition(np.array(vals[:S]), np.array(vals[S:S + A]), vals[S + A],
                           np.array(vals[S + A + 1:S + A + 1 + S]), int(row[0]), int(row[1]), int(row[2]),
                           bool(int(row[-1])) if has_done else False))
    return buf


# ---------------------------------------------------------------- model


@dataclass
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    tgt_mean: np.ndarray
    tgt_std: np.ndarray

    @staticmethod
    def _std(x):
        sd = x.std(axis=0)
        return np.where(sd > 1e-8, sd, 1.0)

    @classmethod
    def fit(cls, batch: Batch) -> "Normalizer":
        x = np.hstack([batch.s, batch.a])
        t = targets(batch)
        return cls(x.mean(axis=0), cls._std(x), t.mean(axis=0), cls._std(t))

    @classmethod
    def identity(cls, in_dim: int, tgt_dim: int) -> "Normalizer":
        return cls(np.zeros(in_dim), np.ones(in_dim), np.zeros(tgt_dim), np.ones(tgt_dim))


def targets(batch: Batch) -> np.ndarray:
    """Regression target: state increment and reward."""
    return np.hstack([batch.s_next - batch.s, batch.r[:, None]])


class DynamicsModel:
    """Diagonal Gaussian over (next state, reward) given (state, action).

    The network works in normalized units: it reads standardized (s, a) and
    emits mean / log-variance of the standardized target ``(s' - s, r)``.  KL
    divergences between two models sharing a normalizer are the same in
    normalized and raw units.
    """

    def __init__(self, net: Mlp, norm: Normalizer, state_dim: int = STATE_DIM):
        if net.output_dim != 2 * (state_dim + 1):
            raise ShapeError("dynamics net must emit mean and log-variance for state_dim + 1 targets")
        self.net = net
        self.norm = norm
        self.state_dim = state_dim

    @classmethod
    def create(cls, hidden=(256, 256, 256), rng=None, norm=None, state_dim=STATE_DIM, action_dim=ACTION_DIM):
        net = Mlp((state_dim + action_dim, *hidden, 2 * (state_dim + 1)), rng=rng)
        norm = norm or Normalizer.identity(state_dim + action_dim, state_dim + 1)
        return cls(net, norm, state_dim)

    def with_params(self, values) -> "DynamicsModel":
        return DynamicsModel(self.net.with_params(values), self.norm, self.state_dim)

    @property
    def params(self) -> np.ndarray:
        return self.net.params.values

    def inputs(self, s, a) -> np.ndarray:
        return (np.hstack([s, a]) - self.norm.in_mean) / self.norm.in_std

    def predict(self, s, a) -> DiagGaussian:
        """Distribution of the standardized target."""
        out = self.net(self.inputs(np.atleast_2d(s), np.atleast_2d(a)))
        mean, lv, _ = split_gaussian(out)
        return DiagGaussian(mean, lv)

    def decode(self, s, z) -> tuple[np.ndarray, np.ndarray]:
        """Map a standardized target sample back to (next state, reward)."""
        e = self.norm.tgt_mean + self.norm.tgt_std * z
        return s + e[:, : self.state_dim], e[:, self.state_dim]

    def predict_raw(self, s, a) -> DiagGaussian:
        """Distribution of the concatenated (next state, reward) in physical units."""
        s = np.atleast_2d(s)
        g = self.predict(s, a)
        nxt, r = self.decode(s, g.mean)
        return DiagGaussian(np.hstack([nxt, r[:, None]]), g.log_var + 2 * np.log(self.norm.tgt_std))

    def sample(self, s, a, noise) -> tuple[np.ndarray, np.ndarray]:
        g = self.predict(s, a)
        return self.decode(np.atleast_2d(s), g.mean + g.std * noise)


_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def nll_loss(model: DynamicsModel, batch: Batch):
    """Mean Gaussian NLL of the standardized target and its gradient w.r.t. model params.

    Averaged over samples and target dimensions, so a perfect unit-variance
    prediction scores ln(2*pi)/2.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    z = (targets(batch) - model.norm.tgt_mean) / model.norm.tgt_std
    out, acts = model.net.forward_cached(model.inputs(batch.s, batch.a))
    mean, lv, mask = split_gaussian(out)
    inv_var = np.exp(-lv)
    resid = z - mean
    sq = resid * resid * inv_var
    loss = float(np.mean(0.5 * sq + 0.5 * lv) + _HALF_LOG_2PI)
    scale = 1.0 / z.size
    g_mean = -resid * inv_var * scale
    g_lv = 0.5 * (1.0 - sq) * mask * scale
    grad, _ = model.net.vjp(acts, np.hstack([g_mean, g_lv]))
    return loss, grad


@dataclass
class FitConfig:
    hidden: tuple = (256, 256, 256)
    iters: int = 50
    train_batch: int = 1000
    minibatch: int = 512
    lr: float = 1e-3


def fit_mle(buffer: ReplayBuffer, cfg: FitConfig, seed=0, init: DynamicsModel | None = None) -> DynamicsModel:
    """Maximum-likelihood fit by Adam on mini-batches drawn from the buffer.

    Each iteration draws a training batch and takes one Adam step per
    mini-batch of it.  The parameters with the lowest NLL on a fixed
    evaluation batch are returned, so the result is never worse than the start.
    """
    if len(buffer) < cfg.minibatch:
        raise NotReadyError(f"buffer holds {len(buffer)} < {cfg.minibatch} transitions")
    rng = np.random.default_rng(seed)
    data = buffer.all()
    norm = Normalizer.fit(data)
    if init is None:
        model = DynamicsModel.create(cfg.hidden, rng=rng, norm=norm)
    else:
        model = DynamicsModel(init.net.copy(), norm, init.state_dim)
    trainer = Trainable(model.net, cfg.lr)
    eval_batch = data.take(rng.choice(len(data), size=min(cfg.train_batch, len(data)), replace=False))
    best_loss, _ = nll_loss(model, eval_batch)
    best = model.params.copy()
    for _ in range(cfg.iters):
        idx = rng.choice(len(data), size=min(cfg.train_batch, len(data)), replace=False)
        for start in range(0, len(idx), cfg.minibatch):
            _, grad = nll_loss(model, data.take(idx[start:start + cfg.minibatch]))
            trainer.step(grad)
        loss, _ = nll_loss(model, eval_batch)
        if loss < best_loss:
            best_loss, best = loss, model.params.copy()
    model.net.params.values = best
    return model


def kl_gaussian(p: DiagGaussian, q: DiagGaussian):
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"dimension mismatch {p.mean.shape} vs {q.mean.shape}")
    d_lv = p.log_var - q.log_var
    per_dim = 0.5 * (np.exp(d_lv) + (p.mean - q.mean) ** 2 * np.exp(-q.log_var)) - 0.5 * d_lv - 0.5
    out = per_dim.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ConstraintSpec:
    """The KL ball of radius ``xi`` around the frozen MLE model, measured on ``anchor_batch``."""

    mle_model: DynamicsModel
    anchor_batch: Batch
    xi: float = DEFAULT_XI
    _mle_pred: DiagGaussian = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.anchor_batch) == 0:
            raise ValueError("anchor batch must be non-empty")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        self._mle_pred = self.mle_model.predict(self.anchor_batch.s, self.anchor_batch.a)

    @classmethod
    def from_buffer(cls, mle_model, buffer: ReplayBuffer, xi=DEFAULT_XI, n_anchor=512, rng=None):
        rng = np.random.default_rng(rng)
        return cls(mle_model, buffer.sample(n_anchor, rng), xi)


def empirical_kl(model: DynamicsModel, spec: ConstraintSpec) -> float:
    p = model.predict(spec.anchor_batch.s, spec.anchor_batch.a)
    return float(np.mean(kl_gaussian(p, spec._mle_pred)))


def in_constraint_set(model: DynamicsModel, spec: ConstraintSpec) -> bool:
    kl = empirical_kl(model, spec)
    return bool(np.isfinite(kl) and kl <= spec.xi)


def rollout(model: DynamicsModel, policy, start_states, length: int, seed=None, deterministic=False,
            reward_limit: float | None = None, terminal_fn=None):
    """Branch ``length``-step synthetic trajectories from each start state.

    ``policy(states, rng)`` returns an (n, action_dim) array.  ``terminal_fn``
    maps predicted next states to a boolean mask; flagged transitions are
    stored with ``done`` set and their trajectories stop.  Returns the batch
    (step-major order) and the number of trajectories cut short by a
    non-finite prediction.
    """
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    rng = np.random.default_rng(seed)
    s = np.array(np.atleast_2d(start_states), dtype=np.float64)
    parts = []
    truncated = 0
    for j in range(length):
        if len(s) == 0:
            break
        a = np.asarray(policy(s, rng), dtype=np.float64)
        noise = np.zeros((len(s), model.state_dim + 1)) if deterministic else rng.standard_normal(
            (len(s), model.state_dim + 1))
        nxt, r = model.sample(s, a, noise)
        if reward_limit is not None:
            r = np.clip(r, -reward_limit, reward_limit)
        ok = np.all(np.isfinite(nxt), axis=1) & np.isfinite(r)
        if not ok.all():
            truncated += int((~ok).sum())
            log.warning("rollout: %d trajectories produced non-finite predictions at step %d", (~ok).sum(), j)
        done = np.zeros(len(s), dtype=bool)
        if terminal_fn is not None:
            done[ok] = terminal_fn(nxt[ok])
        n = int(ok.sum())
        parts.append(Batch(s[ok], a[ok], r[ok], nxt[ok], done[ok], np.full(n, -1),
                           np.full(n, j), np.zeros(n, dtype=np.int64)))
        s = nxt[ok & ~done]
    return Batch.concat(parts), truncated
