"""Seeded simulators and scripted behaviour policies.

Two environments are provided:

* ``pendulum-het``: the classic torque-limited pendulum with a hidden mode.
  In ``Converse`` mode the applied torque is negated before integration, so
  the mode can only be inferred from the response to past actions.
* ``maze`` / ``two-gates``: a continuous 16x16 maze split by a wall at x=8
  that can only be crossed through gates.

Step functions are pure: they take a state and return a new one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericDivergence


class Mode(str, enum.Enum):
    NORMAL = "Normal"
    CONVERSE = "Converse"


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float
    mode: Mode = Mode.NORMAL


@dataclass(frozen=True)
class PendulumObservation:
    cos_theta: float
    sin_theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cos_theta, self.sin_theta, self.theta_dot])


@dataclass(frozen=True)
class MazeState:
    position: tuple[float, float]


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "pendulum-het"
    dt: float = 0.05
    horizon: int = 200
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    torque_limit: float = 2.0
    max_speed: float = 8.0
    theta_cost: float = 1.0
    theta_dot_cost: float = 0.1
    torque_cost: float = 0.001
    # initial pendulum state is drawn uniformly from these symmetric ranges
    init_theta: float = math.pi
    init_theta_dot: float = 1.0
    size: float = 16.0
    wall_x: float = 8.0
    gates: tuple[tuple[float, float], ...] = ((14.0, 16.0), (7.0, 9.0))
    start: tuple[float, float] = (0.0, 0.0)
    goal: tuple[float, float] = (16.0, 0.0)
    goal_radius: float = 0.5
    step_cost: float = 0.01
    goal_reward: float = 10.0
    contact_margin: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def obs_dim(self) -> int:
        return 3 if self.kind == "pendulum-het" else 2

    @property
    def act_dim(self) -> int:
        return 1 if self.kind == "pendulum-het" else 2

    @property
    def action_low(self) -> np.ndarray:
        if self.kind == "pendulum-het":
            return np.array([-self.torque_limit])
        return -np.ones(2)

    @property
    def action_high(self) -> np.ndarray:
        return -self.action_low


def pendulum_config(**overrides) -> EnvConfig:
    return replace(EnvConfig(kind="pendulum-het"), **overrides)


def maze_config(**overrides) -> EnvConfig:
    return replace(EnvConfig(kind="maze"), **overrides)


def two_gates_config(**overrides) -> EnvConfig:
    base = EnvConfig(
        kind="two-gates",
        gates=((11.0, 13.0), (3.0, 5.0)),
        start=(0.0, 8.0),
        goal=(16.0, 8.0),
    )
    return replace(base, **overrides)


def make_config(kind: str, **overrides) -> EnvConfig:
    factories = {
        "pendulum-het": pendulum_config,
        "maze": maze_config,
        "two-gates": two_gates_config,
    }
    if kind not in factories:
        raise ValueError(f"unknown environment {kind!r}")
    return factories[kind](**overrides)


# --------------------------------------------------------------------------
# Pendulum
# --------------------------------------------------------------------------

def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


def pendulum_step(state: PendulumState, torque: float, cfg: EnvConfig):
    """Advance the pendulum by one semi-implicit Euler step.

    Returns ``(next_state, reward)``. The reward is charged on the pre-step
    angle, velocity and the clipped torque actually commanded.
    """
    u = float(np.clip(torque, -cfg.torque_limit, cfg.torque_limit))
    if not math.isfinite(u):
        raise ValueError("torque must be finite")
    if not (math.isfinite(state.theta) and math.isfinite(state.theta_dot)):
        raise NumericDivergence("numeric divergence")
    applied = -u if state.mode is Mode.CONVERSE else u
    g, m, l, dt = cfg.gravity, cfg.mass, cfg.length, cfg.dt
    th = state.theta
    reward = -(
        cfg.theta_cost * wrap_angle(th) ** 2
        + cfg.theta_dot_cost * state.theta_dot ** 2
        + cfg.torque_cost * u ** 2
    )
    acc = 3.0 * g / (2.0 * l) * math.sin(th) + 3.0 / (m * l * l) * applied
    new_dot = state.theta_dot + dt * acc
    new_dot = min(max(new_dot, -cfg.max_speed), cfg.max_speed)
    new_th = wrap_angle(th + dt * new_dot)
    if not (math.isfinite(new_th) and math.isfinite(new_dot)):
        raise NumericDivergence("numeric divergence")
    return PendulumState(new_th, new_dot, state.mode), reward


def pendulum_observe(state: PendulumState) -> PendulumObservation:
    return PendulumObservation(math.cos(state.theta), math.sin(state.theta), state.theta_dot)


def pendulum_reset(cfg: EnvConfig, mode: Mode, rng: np.random.Generator) -> PendulumState:
    theta = rng.uniform(-cfg.init_theta, cfg.init_theta)
    theta_dot = rng.uniform(-cfg.init_theta_dot, cfg.init_theta_dot)
    return PendulumState(wrap_angle(theta), theta_dot, mode)


def pendulum_controller(obs, cfg: EnvConfig = EnvConfig()) -> float:
    """Noise-free energy-pumping swing-up with a PD balancer near upright."""
    c, s, w = float(obs[0]), float(obs[1]), float(obs[2])
    theta = math.atan2(s, c)
    a = 3.0 * cfg.gravity / (2.0 * cfg.length)
    b = 3.0 / (cfg.mass * cfg.length ** 2)
    energy = 0.5 * w * w + a * (c - 1.0)
    if c > math.cos(0.6) and abs(energy) < 0.35 * a:
        u = -(a * math.sin(theta) + 20.0 * theta + 6.0 * w) / b
    else:
        u = -energy * w * 0.5
        if abs(u) < 0.5:
            # kick the pendulum out of the bottom equilibrium
            u = math.copysign(cfg.torque_limit, w if w != 0.0 else 1.0)
    return float(np.clip(u, -cfg.torque_limit, cfg.torque_limit))


def pendulum_behavior_policy(obs, phase_rng: np.random.Generator, negate: bool = False,
                             epsilon: float = 0.2, cfg: EnvConfig = EnvConfig()) -> float:
    """Scripted behaviour policy used to log the offline pendulum data.

    With probability ``epsilon`` a uniform random torque is returned instead
    of the controller output. ``negate`` flips the controller for episodes
    logged on the Converse system (the mode-matched collector).
    """
    if phase_rng.random() < epsilon:
        return float(phase_rng.uniform(-cfg.torque_limit, cfg.torque_limit))
    u = pendulum_controller(obs, cfg)
    return -u if negate else u


# --------------------------------------------------------------------------
# Maze
# --------------------------------------------------------------------------

def _in_gate(y: float, gates) -> bool:
    return any(lo <= y <= hi for lo, hi in gates)


def wall_rectangles(cfg: EnvConfig) -> list[tuple[float, float, float, float]]:
    """Blocked parts of the interior wall as zero-width ``(x0, x1, y0, y1)``."""
    edges = sorted(cfg.gates)
    rects = []
    y = 0.0
    for lo, hi in edges:
        if lo > y:
            rects.append((cfg.wall_x, cfg.wall_x, y, lo))
        y = max(y, hi)
    if y < cfg.size:
        rects.append((cfg.wall_x, cfg.wall_x, y, cfg.size))
    return rects


def maze_step(state: MazeState, action, cfg: EnvConfig):
    """Move the point agent; returns ``(next_state, reward, done)``."""
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    px, py = state.position
    qx = min(max(px + a[0], 0.0), cfg.size)
    qy = min(max(py + a[1], 0.0), cfg.size)
    w, eps = cfg.wall_x, cfg.contact_margin
    crosses = (px < w < qx) or (px > w > qx) or (px != w and qx == w)
    if crosses:
        s = (w - px) / (qx - px)
        yc = py + s * (qy - py)
        if not _in_gate(yc, cfg.gates):
            qx = w - eps if qx > px else w + eps
            qy = yc
    if qx == w and not _in_gate(qy, cfg.gates):
        # sliding along the wall line out of a gate
        qx = w - eps if a[0] <= 0 else w + eps
    done = math.hypot(qx - cfg.goal[0], qy - cfg.goal[1]) <= cfg.goal_radius
    reward = -cfg.step_cost + (cfg.goal_reward if done else 0.0)
    return MazeState((qx, qy)), reward, done


# Expert navigation tasks: (start, waypoints ending with the agent's own goal)
MAZE_EXPERTS: dict[str, tuple[tuple[float, float], tuple[tuple[float, float], ...]]] = {
    "pi1": ((0.0, 0.0), ((8.0, 16.0),)),
    "pi2": ((0.0, 0.0), ((8.0, 8.0),)),
    "pi3": ((8.0, 16.0), ((16.0, 0.0),)),
    "pi4": ((8.0, 8.0), ((16.0, 0.0),)),
}

# approach and exit points straddle the wall so demonstrations cross at the gate centre
TWO_GATE_EXPERTS = {
    "upper": ((0.0, 8.0), ((7.0, 12.0), (9.0, 12.0), (16.0, 8.0))),
    "lower": ((0.0, 8.0), ((7.0, 4.0), (9.0, 4.0), (16.0, 8.0))),
}


def _waypoint(position, waypoints, radius=0.5):
    x, y = position
    for i, (wx, wy) in enumerate(waypoints[:-1]):
        # a waypoint is consumed once reached or once the wall is passed
        if math.hypot(x - wx, y - wy) > radius and x < wx:
            return np.array(waypoints[i])
    return np.array(waypoints[-1])


def proportional_action(position, target, gain: float = 1.0) -> np.ndarray:
    v = gain * (np.asarray(target, dtype=float) - np.asarray(position, dtype=float))
    return v / max(1.0, float(np.max(np.abs(v))))


def expert_policy(agent_id: str, state: MazeState, rng: np.random.Generator,
                  noise: float = 0.1) -> np.ndarray:
    """Waypoint-following expert with Gaussian action noise."""
    table = MAZE_EXPERTS if agent_id in MAZE_EXPERTS else TWO_GATE_EXPERTS
    if agent_id not in table:
        raise ValueError(f"unknown expert {agent_id!r}")
    _, waypoints = table[agent_id]
    target = _waypoint(state.position, waypoints)
    a = proportional_action(state.position, target)
    a = a + rng.normal(0.0, noise, size=2)
    return np.clip(a, -1.0, 1.0)


def expert_goal(agent_id: str, cfg: EnvConfig) -> tuple[float, float]:
    table = MAZE_EXPERTS if agent_id in MAZE_EXPERTS else TWO_GATE_EXPERTS
    return table[agent_id][1][-1]


# --------------------------------------------------------------------------
# Gym-style wrappers used by rollouts
# --------------------------------------------------------------------------

class PendulumEnv:
    """Stateful wrapper around :func:`pendulum_step` for one episode."""

    def __init__(self, cfg: EnvConfig, mode: Mode = Mode.NORMAL, initial=None):
        self.cfg = cfg
        self.mode = Mode(mode)
        self.initial = initial
        self.state = None

    def reset(self, rng):
        if self.initial is not None:
            th, thd = self.initial
            self.state = PendulumState(th, thd, self.mode)
        else:
            self.state = pendulum_reset(self.cfg, self.mode, rng)
        return pendulum_observe(self.state).as_array()

    def step(self, action):
        self.state, r = pendulum_step(self.state, float(np.ravel(action)[0]), self.cfg)
        return pendulum_observe(self.state).as_array(), r, False


class MazeEnv:
    """Point agent in the maze.

    ``stop_at`` ends the episode (without the goal bonus) when the agent
    gets within the goal radius of that point; experts whose task ends at a
    gate are logged this way so every transition carries the task reward.
    """

    def __init__(self, cfg: EnvConfig, start=None, goal=None, stop_at=None):
        if goal is not None:
            cfg = replace(cfg, goal=tuple(goal))
        self.cfg = cfg
        self.start = tuple(start) if start is not None else cfg.start
        self.stop_at = None if stop_at is None else tuple(stop_at)
        self.state = None

    def reset(self, rng=None):
        self.state = MazeState(self.start)
        return np.array(self.state.position)

    def step(self, action):
        self.state, r, done = maze_step(self.state, action, self.cfg)
        if self.stop_at is not None and not done:
            x, y = self.state.position
            done = math.hypot(x - self.stop_at[0], y - self.stop_at[1]) <= self.cfg.goal_radius
        return np.array(self.state.position), r, done


# --------------------------------------------------------------------------
# Dataset generation
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    """One logged episode: arrays are aligned on the time axis."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    policy_tag: str
    mode_tag: str | None = None
    episode_id: int = 0

    def __len__(self):
        return len(self.rewards)


def run_episode(env, policy: Callable, rng, horizon: int, **tags) -> Trajectory:
    obs = env.reset(rng)
    O, A, R, N, D = [], [], [], [], []
    for _ in range(horizon):
        a = np.atleast_1d(np.asarray(policy(obs, rng), dtype=float))
        nxt, r, done = env.step(a)
        O.append(obs)
        A.append(a)
        R.append(r)
        N.append(nxt)
        D.append(done)
        obs = nxt
        if done:
            break
    return Trajectory(np.array(O), np.array(A), np.array(R, dtype=float), np.array(N),
                      np.array(D, dtype=bool), **tags)


@dataclass(frozen=True)
class PolicySpec:
    """Which behaviour policies generate a dataset and in what proportion.

    For the pendulum ``groups`` maps a mode name to its share of
    transitions; for mazes it maps an expert id to a trajectory count.
    """

    groups: dict = field(default_factory=lambda: {"Normal": 0.5, "Converse": 0.5})
    # a tuple draws one exploration level per episode, mimicking logs from
    # collectors of uneven quality
    epsilon: float | tuple = 0.2
    noise: float = 0.1

    def episode_epsilon(self, rng: np.random.Generator) -> float:
        if isinstance(self.epsilon, (tuple, list)):
            return float(self.epsilon[int(rng.integers(len(self.epsilon)))])
        return float(self.epsilon)


def _expert_env(cfg: EnvConfig, tag: str, start) -> MazeEnv:
    own = expert_goal(tag, cfg)
    if tuple(own) == tuple(cfg.goal):
        return MazeEnv(cfg, start=start)
    return MazeEnv(cfg, start=start, stop_at=own)


def generate_dataset(cfg: EnvConfig, spec: PolicySpec, n_transitions: int, seed: int) -> list[Trajectory]:
    """Roll out behaviour policies into complete episodes.

    Pendulum: episodes of each mode are logged until that mode has its share
    of ``n_transitions``. Mazes: each expert contributes ``groups[tag]``
    trajectories and ``n_transitions`` is a lower bound on the total.
    """
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    rng = np.random.default_rng(seed)
    out: list[Trajectory] = []
    if cfg.kind == "pendulum-het":
        for mode_name, share in spec.groups.items():
            mode = Mode(mode_name)
            target = int(round(share * n_transitions))
            count = 0
            while count < target:
                env = PendulumEnv(cfg, mode)
                negate = mode is Mode.CONVERSE
                eps = spec.episode_epsilon(rng)
                pol = lambda o, r, _n=negate, _e=eps: pendulum_behavior_policy(o, r, _n, _e, cfg)
                tr = run_episode(env, pol, rng, cfg.horizon, policy_tag=f"behavior-{mode.value}",
                                 mode_tag=mode.value, episode_id=len(out))
                out.append(tr)
                count += len(tr)
        return out
    total = 0
    for tag, n_traj in spec.groups.items():
        start, _ = (MAZE_EXPERTS if tag in MAZE_EXPERTS else TWO_GATE_EXPERTS)[tag]
        env = _expert_env(cfg, tag, start)
        for _ in range(int(n_traj)):
            pol = lambda o, r, _t=tag: expert_policy(_t, MazeState(tuple(o)), r, spec.noise)
            tr = run_episode(env, pol, rng, cfg.horizon, policy_tag=tag, episode_id=len(out))
            out.append(tr)
            total += len(tr)
    while total < n_transitions:
        # top up with whole extra episodes, cycling through the experts
        for tag in spec.groups:
            start, _ = (MAZE_EXPERTS if tag in MAZE_EXPERTS else TWO_GATE_EXPERTS)[tag]
            env = _expert_env(cfg, tag, start)
            pol = lambda o, r, _t=tag: expert_policy(_t, MazeState(tuple(o)), r, spec.noise)
            tr = run_episode(env, pol, rng, cfg.horizon, policy_tag=tag, episode_id=len(out))
            out.append(tr)
            total += len(tr)
            if total >= n_transitions:
                break
    return out


def _fmt(x: float) -> float | str:
    return float(format(float(x), ".17g"))


def write_dataset(trajectories: Sequence[Trajectory], path) -> None:
    """Write trajectories as JSON Lines, one transition per line."""
    import json

    with open(path, "w") as fh:
        for tr in trajectories:
            for t in range(len(tr)):
                rec = {
                    "episode_id": int(tr.episode_id),
                    "t": t,
                    "obs": [_fmt(v) for v in tr.observations[t]],
                    "action": [_fmt(v) for v in tr.actions[t]],
                    "reward": _fmt(tr.rewards[t]),
                    "next_obs": [_fmt(v) for v in tr.next_observations[t]],
                    "policy_tag": tr.policy_tag,
                    "mode_tag": tr.mode_tag,
                    "done": bool(tr.dones[t]),
                }
                fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[Trajectory]:
    import json

    groups: dict[int, list[dict]] = {}
    with open(path) as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                from .errors import CorpusFormatError

                raise CorpusFormatError(f"line {n + 1}: {exc}") from None
            groups.setdefault(rec["episode_id"], []).append(rec)
    out = []
    for eid, recs in groups.items():
        recs.sort(key=lambda r: r["t"])
        out.append(Trajectory(
            np.array([r["obs"] for r in recs], dtype=float),
            np.array([r["action"] for r in recs], dtype=float),
            np.array([r["reward"] for r in recs], dtype=float),
            np.array([r["next_obs"] for r in recs], dtype=float),
            np.array([r["done"] for r in recs], dtype=bool),
            recs[0]["policy_tag"], recs[0]["mode_tag"], eid,
        ))
    return out
