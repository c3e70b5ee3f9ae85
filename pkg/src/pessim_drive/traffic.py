"""Single-lane figure-eight traffic with an unprotected crossing.

The centerline is two tangent circles of equal circumference traversed as an
eight, so the loop passes the tangency point twice (arc 0 and arc L/2).  Two
vehicles whose arc positions differ by L/2 reach the crossing at the same time;
spacing is therefore measured in *crossing phase*, ``arc mod L/2``.  For
vehicles on the same half of the loop this is the ordinary bumper gap, for
vehicles on opposite halves it is the virtual gap they will have at the
crossing.  HVs follow the IDM on that virtual leader and CAVs observe it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

CAV, HV = "CAV", "HV"

OBS_NAMES = ("v", "x", "y", "v_ahead", "l_ahead", "v_behind", "l_behind", "d_cross", "b")
STATE_DIM = len(OBS_NAMES)
ACTION_DIM = 2  # target velocity, lane-change bit (inactive on a single lane)


class ConfigError(ValueError):
    pass


@dataclass
class TrafficConfig:
    n_cav: int = 8
    n_hv: int = 6
    track_length: float = 480.0
    dt: float = 0.1
    v_max: float = 13.89
    horizon: int = 1500
    sensor_range: float = 75.0
    l_safe: float = 5.0
    reward_weight: float = 0.85
    safety_penalty: float = 7.5
    vehicle_length: float = 5.0
    crossing_window: float = 10.0
    cav_gain: float = 2.0
    cav_accel_limit: float = 3.0
    # IDM for human drivers
    idm_v0: float = 13.89
    idm_headway: float = 1.5
    idm_a_max: float = 2.0
    idm_b_comf: float = 3.0
    idm_s0: float = 2.0
    idm_delta: float = 4.0
    hv_brake_limit: float = 9.0

    @property
    def half(self) -> float:
        return self.track_length / 2

    @property
    def radius(self) -> float:
        return self.half / (2 * math.pi)

    def validate(self):
        if self.n_cav < 1:
            raise ConfigError("need at least one CAV")
        if not 4 <= self.n_hv <= 12:
            raise ConfigError(f"n_hv={self.n_hv} outside the supported range [4, 12]")
        n = self.n_cav + self.n_hv
        if self.half / n < self.min_spacing:
            raise ConfigError(f"{n} vehicles do not fit on a {self.track_length} m loop")

    @property
    def min_spacing(self) -> float:
        return max(self.vehicle_length + 2.0, self.crossing_window) + 1.0


def load_scenario(path) -> TrafficConfig:
    """Read a ``key=value`` scenario file; unknown keys are an error."""
    known = {f.name: f.type for f in fields(TrafficConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = int(val) if known[key] in ("int", int) else float(val)
    cfg = TrafficConfig(**values)
    cfg.validate()
    return cfg


def save_scenario(cfg: TrafficConfig, path) -> None:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def arc_to_xy(arc, cfg: TrafficConfig):
    arc = np.mod(np.asarray(arc, dtype=np.float64), cfg.track_length)
    r = cfg.radius
    first = arc < cfg.half
    theta1 = arc / r
    theta2 = math.pi - (arc - cfg.half) / r
    x = np.where(first, -r + r * np.cos(theta1), r + r * np.cos(theta2))
    y = np.where(first, r * np.sin(theta1), r * np.sin(theta2))
    return x, y


@dataclass
class VehicleState:
    id: int
    kind: str
    arc_position: float
    speed: float


@dataclass
class WorldState:
    arc: np.ndarray
    speed: np.ndarray
    is_cav: np.ndarray
    cfg: TrafficConfig
    time_step: int = 0
    collision_flag: bool = False
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    @property
    def cav_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_cav)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [
            VehicleState(i, CAV if c else HV, float(a), float(v))
            for i, (a, v, c) in enumerate(zip(self.arc, self.speed, self.is_cav))
        ]

    def positions(self):
        return arc_to_xy(self.arc, self.cfg)

    def copy(self) -> "WorldState":
        return replace(self, arc=self.arc.copy(), speed=self.speed.copy(), is_cav=self.is_cav.copy())


@dataclass
class Observation:
    v: float
    x: float
    y: float
    v_ahead: float
    l_ahead: float
    v_behind: float
    l_behind: float
    d_cross: float
    b: bool

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in OBS_NAMES], dtype=np.float64)


def reset(cfg: TrafficConfig, seed: int) -> WorldState:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.n_cav + cfg.n_hv
    slot = cfg.half / n
    jitter = max(0.0, (slot - cfg.min_spacing) / 2)
    phases = np.arange(n) * slot + rng.uniform(-jitter, jitter, size=n) + rng.uniform(0, cfg.half)
    arc = np.mod(phases + cfg.half * rng.integers(0, 2, size=n), cfg.track_length)
    is_cav = np.zeros(n, dtype=bool)
    is_cav[: cfg.n_cav] = True  # CAVs form one contiguous platoon
    return WorldState(arc, np.zeros(n), is_cav, cfg, 0, False, seed, rng)


def _phase_gaps(arc, cfg: TrafficConfig):
    """gap[i, j] = center distance from i forward to j in crossing phase."""
    d = np.mod(arc[None, :] - arc[:, None], cfg.half)
    np.fill_diagonal(d, np.inf)
    return d


def _neighbors(world: WorldState):
    cfg = world.cfg
    ahead = _phase_gaps(world.arc, cfg)
    behind = ahead.T
    lead = np.argmin(ahead, axis=1)
    foll = np.argmin(behind, axis=1)
    idx = np.arange(world.arc.size)
    gap_a = ahead[idx, lead] - cfg.vehicle_length
    gap_e = behind[idx, foll] - cfg.vehicle_length
    return lead, gap_a, foll, gap_e


def _observations(world: WorldState) -> np.ndarray:
    cfg = world.cfg
    n = world.arc.size
    out = np.zeros((n, STATE_DIM))
    x, y = world.positions()
    out[:, 0], out[:, 1], out[:, 2] = world.speed, x, y
    if n > 1:
        lead, gap_a, foll, gap_e = _neighbors(world)
        seen_a = gap_a < cfg.sensor_range
        seen_e = gap_e < cfg.sensor_range
        out[:, 3] = np.where(seen_a, world.speed[lead], 0.0)
        out[:, 4] = np.where(seen_a, np.clip(gap_a, 0.0, cfg.sensor_range), cfg.sensor_range)
        out[:, 5] = np.where(seen_e, world.speed[foll], 0.0)
        out[:, 6] = np.where(seen_e, np.clip(gap_e, 0.0, cfg.sensor_range), cfg.sensor_range)
    else:
        out[:, 4] = out[:, 6] = cfg.sensor_range
    out[:, 7] = np.mod(-world.arc, cfg.half)
    out[:, 8] = (out[:, 4] < cfg.l_safe) | (out[:, 6] < cfg.l_safe)
    return out


def assemble_observation(world: WorldState, cav_id: int) -> Observation:
    if not 0 <= cav_id < world.arc.size:
        raise IndexError(f"no vehicle {cav_id}")
    row = _observations(world)[cav_id]
    return Observation(*row[:-1], b=bool(row[-1]))


def observe_cavs(world: WorldState) -> np.ndarray:
    return _observations(world)[world.is_cav]


def contact_terminal(obs) -> np.ndarray:
    """Termination rule for predicted observations: a bumper gap ahead or behind has closed."""
    obs = np.atleast_2d(obs)
    return (obs[:, 4] <= 0.0) | (obs[:, 6] <= 0.0)


def idm_acceleration(v, v_lead, gap, cfg: TrafficConfig):
    """IDM acceleration; ``gap >= sensor_range`` means no leader in view."""
    v = np.asarray(v, dtype=np.float64)
    free = 1.0 - (v / cfg.idm_v0) ** cfg.idm_delta
    s_star = cfg.idm_s0 + np.maximum(
        0.0, v * cfg.idm_headway + v * (v - v_lead) / (2 * math.sqrt(cfg.idm_a_max * cfg.idm_b_comf))
    )
    gap = np.asarray(gap, dtype=np.float64)
    interact = np.where(gap < cfg.sensor_range, (s_star / np.maximum(gap, 1e-3)) ** 2, 0.0)
    acc = cfg.idm_a_max * (free - interact)
    return np.clip(acc, -cfg.hv_brake_limit, cfg.idm_a_max)


def hv_controller(world: WorldState, hv_id: int) -> float:
    lead, gap_a, _, _ = _neighbors(world)
    return float(idm_acceleration(world.speed[hv_id], world.speed[lead[hv_id]], gap_a[hv_id], world.cfg))


def collision_mask(world: WorldState) -> np.ndarray:
    """Vehicles taking part in a collision: bumper overlap or simultaneous occupancy of both crossing windows."""
    cfg = world.cfg
    n = world.arc.size
    hit = np.zeros(n, dtype=bool)
    if n < 2:
        return hit
    order = np.argsort(world.arc)
    a = world.arc[order]
    real_gaps = np.diff(np.append(a, a[0] + cfg.track_length)) - cfg.vehicle_length
    bad = np.flatnonzero(real_gaps <= 0)
    hit[order[bad]] = True
    hit[order[(bad + 1) % n]] = True
    w = cfg.crossing_window / 2
    near0 = np.minimum(world.arc, cfg.track_length - world.arc) < w
    near1 = np.abs(world.arc - cfg.half) < w
    if near0.any() and near1.any():
        hit |= near0 | near1
    return hit


def _collided(world: WorldState) -> bool:
    return bool(collision_mask(world).any())


@dataclass
class StepResult:
    world: WorldState
    rewards: np.ndarray
    observations: np.ndarray
    done: bool
    collision: bool
    clamped: bool
    involved: np.ndarray = None  # per-CAV flag: this CAV took part in the collision


def step_world(world: WorldState, cav_actions) -> StepResult:
    """Advance one tick. ``cav_actions`` holds one target velocity per CAV (extra columns ignored)."""
    cfg = world.cfg
    if world.collision_flag or world.time_step >= cfg.horizon:
        raise RuntimeError("episode already finished")
    acts = np.asarray(cav_actions, dtype=np.float64)
    if acts.ndim == 2:
        acts = acts[:, 0]
    cav = world.cav_ids
    if acts.shape != (cav.size,):
        raise ValueError(f"expected {cav.size} CAV actions, got shape {acts.shape}")
    target = np.clip(acts, 0.0, cfg.v_max)
    clamped = bool(np.any(target != acts))

    acc = np.empty(world.arc.size)
    acc[cav] = np.clip(cfg.cav_gain * (target - world.speed[cav]), -cfg.cav_accel_limit, cfg.cav_accel_limit)
    hv = np.flatnonzero(~world.is_cav)
    if hv.size:
        if world.arc.size > 1:
            lead, gap_a, _, _ = _neighbors(world)
            acc[hv] = idm_acceleration(world.speed[hv], world.speed[lead[hv]], gap_a[hv], cfg)
        else:
            acc[hv] = idm_acceleration(world.speed[hv], 0.0, cfg.sensor_range, cfg)

    new = world.copy()
    new.speed = np.clip(world.speed + acc * cfg.dt, 0.0, cfg.v_max)
    new.arc = np.mod(world.arc + new.speed * cfg.dt, cfg.track_length)
    new.time_step = world.time_step + 1
    hit = collision_mask(new)
    new.collision_flag = bool(hit.any())

    obs = observe_cavs(new)
    rewards = obs[:, 0] + cfg.reward_weight * (obs[:, 3] + obs[:, 5]) - cfg.safety_penalty * obs[:, 8]
    done = new.collision_flag or new.time_step >= cfg.horizon
    return StepResult(new, rewards, obs, done, new.collision_flag, clamped, hit[cav])


def utility(cav_speeds, horizon: int, dt: float) -> float:
    """Mean per-CAV, per-step travel distance.

    ``cav_speeds`` is a (steps, n_cav) array of post-step speeds; steps missing
    after an early termination count as zero displacement.
    """
    speeds = np.asarray(cav_speeds, dtype=np.float64)
    if speeds.size == 0:
        return 0.0
    return float(np.sum(speeds * dt) / (horizon * speeds.shape[1]))


def write_trajectory(path, rows) -> None:
    """rows: iterables of (t, vehicle, kind, arc, x, y, v, b, reward)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "vehicle", "kind", "arc", "x", "y", "v", "b", "reward"])
        w.writerows(rows)


def trajectory_rows(world: WorldState, rewards=None):
    obs = _observations(world)
    x, y = world.positions()
    cav_rank = {v: k for k, v in enumerate(world.cav_ids)}
    for i in range(world.arc.size):
        r = ""
        if rewards is not None and i in cav_rank:
            r = f"{rewards[cav_rank[i]]:.6f}"
        yield (
            world.time_step, i, CAV if world.is_cav[i] else HV,
            f"{world.arc[i]:.6f}", f"{x[i]:.6f}", f"{y[i]:.6f}", f"{world.speed[i]:.6f}", int(obs[i, 8]), r,
        )
