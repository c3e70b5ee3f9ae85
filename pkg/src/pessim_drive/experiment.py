"""Training loop, ablation sweeps and run artifacts for the traffic experiments."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agent import AgentConfig, AgentNets, agent_update, act, mix_batches, policy_fn
from .comms import OverheadLog, build_graph, exchange, min_clique_cover, write_edge_list
from .dynamics import (Batch, ConstraintSpec, DynamicsModel, FitConfig, NotReadyError, ReplayBuffer, fit_mle,
                       rollout)
from .pessimism import CandidateMode, run_pgd
from .traffic import ACTION_DIM, TrafficConfig, contact_terminal, observe_cavs, reset, step_world, utility

log = logging.getLogger(__name__)

ALGORITHMS = ("ma-pmbrl", "sac-only", "mbrl-nopess")


class ExperimentError(RuntimeError):
    """A run failed; ``stage`` names the part of the loop that raised."""

    def __init__(self, stage, message, partial=None):
        super().__init__(stage, str(message))
        self.stage = stage
        self.partial = partial  # RunResult up to the failure, when available

    def __str__(self):
        return f"[{self.args[0]}] {self.args[1]}"


@dataclass
class ExperimentConfig:
    # simulator
    dt: float = 0.1
    n_cav: int = 8
    n_hv: int = 6
    track_length: float = 480.0
    v_max: float = 13.89
    # learning setup
    episodes: int = 20
    horizon: int = 1500
    d: float = 100.0
    rollout_len: int = 8
    reward_weight: float = 0.85
    safety_penalty: float = 7.5
    lr_pgd: float = 1e-3
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    lr_temp: float = 1e-3
    real_ratio: float = 0.7
    gamma: float = 0.98
    tau: float = 0.01
    n_seeds: int = 5
    replay_size: int = 20_000
    model_buffer_size: int = 7_000
    hidden_layers: int = 3
    hidden_units: int = 256
    train_batch: int = 1000
    minibatch: int = 512
    # choices not fixed by the parameter table
    algo: str = "ma-pmbrl"
    pgd_mode: str = "best"
    pgd_iters: int = 10
    xi: float = 0.1
    agent_hidden_layers: int = 2
    agent_hidden_units: int = 256
    mle_iters: int = 50
    anchor_size: int = 512
    rollout_starts: int = 16
    pgd_starts: int = 32
    update_every: int = 5
    pgd_every: int = 25
    pgd_precondition: str = "adam"
    fixed_temp: float | None = None
    init_temp: float = 0.1
    reward_scale: float = 0.02
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}")
        CandidateMode.parse(self.pgd_mode)
        if not 0.0 <= self.d <= 200.0:
            raise ValueError("communication range d must lie in [0, 200]")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ValueError("real_ratio must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("episodes", "horizon", "rollout_len", "pgd_iters", "update_every", "pgd_every", "minibatch",
                     "n_seeds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pgd_precondition not in ("adam", "none"):
            raise ValueError("pgd_precondition must be 'adam' or 'none'")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        self.traffic().validate()
        return self

    def traffic(self) -> TrafficConfig:
        return TrafficConfig(n_cav=self.n_cav, n_hv=self.n_hv, track_length=self.track_length, dt=self.dt,
                             v_max=self.v_max, horizon=self.horizon, reward_weight=self.reward_weight,
                             safety_penalty=self.safety_penalty)

    def agent(self) -> AgentConfig:
        return AgentConfig(hidden=(self.agent_hidden_units,) * self.agent_hidden_layers, gamma=self.gamma,
                           tau=self.tau, lr_actor=self.lr_actor, lr_critic=self.lr_critic, lr_temp=self.lr_temp,
                           init_temperature=self.init_temp, fixed_temperature=self.fixed_temp,
                           reward_scale=self.reward_scale, v_max=self.v_max)

    def fit(self) -> FitConfig:
        return FitConfig(hidden=(self.hidden_units,) * self.hidden_layers, iters=self.mle_iters,
                         train_batch=self.train_batch, minibatch=self.minibatch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of every field except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def desk_config(**kw) -> ExperimentConfig:
    """Small networks and a short horizon that fit a laptop-scale budget."""
    base = dict(horizon=300, hidden_layers=2, hidden_units=32, agent_hidden_units=32, mle_iters=20,
                train_batch=512, minibatch=256, anchor_size=256, update_every=1, pgd_every=50, pgd_starts=16,
                rollout_starts=8)
    base.update(kw)
    return ExperimentConfig(**base)


def _coerce(field_type, text: str):
    t = str(field_type)
    if text.lower() in ("none", "") and "None" in t:
        return None
    if "int" in t and "float" not in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def apply_overrides(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    kw = {}
    for k, v in pairs.items():
        key = k.strip().replace("-", "_")
        if key not in types:
            raise ValueError(f"unknown config key {k!r}")
        kw[key] = _coerce(types[key], str(v).strip()) if isinstance(v, str) else v
    return cfg.replace(**kw)


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k] = v
    return apply_overrides(base or ExperimentConfig(), pairs)


# ----------------------------------------------------------------- the run


@dataclass
class AgentSlot:
    nets: AgentNets | None
    real: ReplayBuffer
    synthetic: ReplayBuffer
    rng: np.random.Generator
    mle: DynamicsModel | None = None
    spec: ConstraintSpec | None = None
    model: DynamicsModel | None = None
    stats: list = field(default_factory=list)


@dataclass
class RunResult:
    config: ExperimentConfig
    utilities: list = field(default_factory=list)  # (episode, utility, steps, collision)
    training: list = field(default_factory=list)  # (episode, agent, critic, actor, entropy, temp, q_mean)
    overhead: OverheadLog = field(default_factory=OverheadLog)
    pgd_rows: list = field(default_factory=list)  # (episode, step, agent, iter, objective, feasible, kl)
    graphs: list = field(default_factory=list)
    diverged: bool = False

    def final_utility(self, last=5) -> float:
        return float(np.mean([u for _, u, _, _ in self.utilities[-last:]]))


def _episode_seed(seed, episode, salt):
    return int(np.random.SeedSequence([seed, episode, salt]).generate_state(1)[0])


def _uses_model(cfg):
    return cfg.algo in ("ma-pmbrl", "mbrl-nopess")


def run(cfg: ExperimentConfig, collect_graphs=False) -> RunResult:
    cfg.validate()
    tcfg = cfg.traffic()
    acfg = cfg.agent()
    res = RunResult(cfg)
    root = np.random.SeedSequence([cfg.seed, 7919])
    seeds = root.spawn(cfg.n_cav)
    slots = []
    for i in range(cfg.n_cav):
        rng = np.random.default_rng(seeds[i])
        slots.append(AgentSlot(AgentNets(acfg, rng), ReplayBuffer(cfg.replay_size),
                               ReplayBuffer(cfg.model_buffer_size), rng))
    mode = CandidateMode.parse(cfg.pgd_mode)
    try:
        _train(cfg, tcfg, slots, mode, res, collect_graphs)
    except ExperimentError as exc:
        exc.partial = res
        raise
    return res


def _train(cfg, tcfg, slots, mode, res, collect_graphs):
    for ep in range(cfg.episodes):
        if ep > 0 and _uses_model(cfg):
            for i, sl in enumerate(slots):
                try:
                    sl.mle = fit_mle(sl.real, cfg.fit(), seed=_episode_seed(cfg.seed, ep, 100 + i), init=sl.mle)
                    sl.spec = ConstraintSpec.from_buffer(sl.mle, sl.real, cfg.xi, cfg.anchor_size,
                                                         _episode_seed(cfg.seed, ep, 200 + i))
                    sl.model = sl.mle
                except NotReadyError:
                    log.info("agent %d: too little data for a model fit in episode %d", i, ep)
                except Exception as exc:  # noqa: BLE001
                    raise ExperimentError("model-fit", exc) from exc
        world = reset(tcfg, _episode_seed(cfg.seed, ep, 1))
        obs = observe_cavs(world)
        act_rng = np.random.default_rng(_episode_seed(cfg.seed, ep, 2))
        speeds, tails = [], [[] for _ in slots]
        collision = False
        for t in range(cfg.horizon):
            if ep > 0 and t % cfg.update_every == 0:
                try:
                    _update_agents(cfg, slots, obs, ep, t, mode, res)
                except ExperimentError:
                    raise
                except Exception as exc:  # noqa: BLE001
                    raise ExperimentError("agent-update", exc) from exc
            if ep == 0:
                actions = np.zeros((cfg.n_cav, ACTION_DIM))
                actions[:, 0] = act_rng.uniform(0.0, cfg.v_max, size=cfg.n_cav)
            else:
                actions = np.vstack([act(sl.nets, obs[i], rng=act_rng) for i, sl in enumerate(slots)])
            out = step_world(world, actions)
            for i, sl in enumerate(slots):
                b = Batch(obs[i:i + 1], actions[i:i + 1], out.rewards[i:i + 1], out.observations[i:i + 1],
                          np.array([out.involved[i]]), np.array([ep]), np.array([t]), np.array([i]))
                sl.real.add_batch(b)
                tails[i].append(b)
            world, obs = out.world, out.observations
            speeds.append(world.speed[world.cav_ids].copy())
            if out.done:
                collision = out.collision
                break
        res.utilities.append((ep, utility(np.array(speeds), cfg.horizon, cfg.dt), len(speeds), int(collision)))

        graph = build_graph(world, cfg.d)
        tail_batches = [Batch.concat(tl) for tl in tails]
        tx = exchange([sl.real for sl in slots], graph, tail_batches)
        res.overhead.record(cfg.d, ep, tx, min_clique_cover(graph).size)
        if collect_graphs:
            res.graphs.append(graph)
        for i, sl in enumerate(slots):
            if sl.stats:
                s = np.array([[u.critic_loss, u.actor_loss, u.entropy, u.temperature, u.q_mean] for u in sl.stats])
                res.training.append((ep, i, *np.nanmean(s, axis=0).tolist()))
                res.diverged |= any(u.diverged for u in sl.stats)
            sl.stats = []
        log.info("episode %d utility %.4f steps %d", ep, res.utilities[-1][1], len(speeds))


def _update_agents(cfg, slots, obs, ep, t, mode, res):
    for i, sl in enumerate(slots):
        if len(sl.real) < cfg.minibatch:
            continue
        if sl.model is not None:
            if cfg.algo == "ma-pmbrl" and t % cfg.pgd_every == 0:
                starts = sl.real.sample(min(cfg.pgd_starts, len(sl.real)), sl.rng).s
                try:
                    sl.model, trace = run_pgd(sl.spec, sl.nets, starts, cfg.pgd_iters, mode,
                                              seed=_episode_seed(cfg.seed, ep * 100003 + t, 300 + i),
                                              step_size=cfg.lr_pgd, horizon=cfg.rollout_len,
                                              terminal_fn=contact_terminal,
                                              preconditioner=cfg.pgd_precondition)
                except Exception as exc:  # noqa: BLE001
                    raise ExperimentError("pgd", exc) from exc
                for it, obj, feas, kl in trace.rows():
                    res.pgd_rows.append((ep, t, i, it, obj, feas, kl))
            extra = sl.real.sample(min(cfg.rollout_starts - 1, len(sl.real)), sl.rng).s
            starts = np.vstack([obs[i:i + 1], extra])
            syn, _ = rollout(sl.model, policy_fn(sl.nets), starts, cfg.rollout_len,
                             seed=_episode_seed(cfg.seed, ep * 100003 + t, 400 + i),
                             reward_limit=sl.nets.cfg.r_max, terminal_fn=contact_terminal)
            sl.synthetic.add_batch(syn, keyed=False)
        model_buf = sl.synthetic if sl.model is not None else None
        ratio = cfg.real_ratio if model_buf is not None else 1.0
        mb = mix_batches(sl.real, model_buf, ratio, cfg.minibatch, sl.rng)
        sl.stats.append(agent_update(sl.nets, mb.combined(), sl.rng))


# ----------------------------------------------------------------- artifacts


def _fmt(x) -> str:
    return repr(float(x))


def write_artifacts(res: RunResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = res.config.config_hash()
    files = {}

    def table(name, header, rows):
        path = out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header + ["config_hash"])
            for r in rows:
                w.writerow(list(r) + [h])
        files[name] = path.name

    table("utility.csv", ["episode", "utility", "steps", "collision"],
          [(e, _fmt(u), n, c) for e, u, n, c in res.utilities])
    table("training_log.csv", ["episode", "agent", "critic_loss", "actor_loss", "entropy", "temperature", "q_mean"],
          [(e, i, *(_fmt(v) for v in vals)) for e, i, *vals in res.training])
    table("overhead.csv", ["d", "episode", "transitions_tx", "chi_bar"],
          [(int(d) if float(d).is_integer() else d, e, tx, chi) for d, e, tx, chi in res.overhead.rows])
    table("pgd_trace.csv", ["episode", "step", "agent", "iter", "objective", "feasible", "kl"],
          [(e, t, i, it, _fmt(o), f, _fmt(k)) for e, t, i, it, o, f, k in res.pgd_rows])
    for k, g in enumerate(res.graphs):
        write_edge_list(g, out / f"graph_ep{k:03d}.txt")
    manifest = {"config": res.config.to_dict(), "config_hash": h, "seed": res.config.seed,
                "version": __version__, "files": files, "diverged": res.diverged}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def max_workers() -> int:
    env = os.environ.get("PESSIM_DRIVE_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, cap)


def _run_one(job):
    cfg, collect_graphs = job
    return run(cfg, collect_graphs)


def run_seeds(configs, workers=None, collect_graphs=False) -> list[RunResult]:
    workers = workers or max_workers()
    jobs = [(c, collect_graphs) for c in configs]
    if workers <= 1 or len(configs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
        return list(pool.map(_run_one, jobs))


def sweep(cfg: ExperimentConfig, param: str, values, seeds, out_dir=None, workers=None):
    """One run per (value, seed); returns rows (param value, episode, mean utility, std, n)."""
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    param = param.replace("-", "_")
    if param not in names or param == "seed":
        raise ValueError(f"unknown sweep parameter {param!r}")
    configs = [apply_overrides(cfg, {param: v}).replace(seed=s) for v in values for s in seeds]
    for c in configs:
        c.validate()
    results = run_seeds(configs, workers)
    rows = []
    by_value: dict = {}
    for c, r in zip(configs, results):
        by_value.setdefault(getattr(c, param), []).append(r)
        if out_dir is not None:
            write_artifacts(r, Path(out_dir) / f"{param}={getattr(c, param)}" / f"seed{c.seed}")
    for v, rs in by_value.items():
        u = np.array([[x[1] for x in r.utilities] for r in rs])
        for ep in range(u.shape[1]):
            rows.append((v, ep, float(u[:, ep].mean()), float(u[:, ep].std()), len(rs)))
    if out_dir is not None:
        path = Path(out_dir) / "sweep.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([param, "episode", "utility_mean", "utility_std", "n"])
            for v, ep, m, s, n in rows:
                w.writerow([v, ep, _fmt(m), _fmt(s), n])
    return rows, results
