"""Synthetic multi-stage point-mass world.

A single agent moves in [-1, 1]^2 among a ring of named objects. Each
semantic skill is "reach object k and trigger it". Domain contexts are a
constant wind (opposing the planar command), an execution-speed degree, and
an optional constant fourth-axis offset used only when generating training
data. Evaluation-time non-stationarity enters through a time-varying
perturbation applied to the fourth action axis, which damps movement by
``max(0, 1 - |a[3] - w_t|)``.

Rule-based experts are exact: they compensate wind additively and stop on
top of the target before triggering, so generated trajectories are optimal
up to integer step counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, UnknownSkillError, ValidationError

SKILL_NAMES = [
    "open microwave",
    "move kettle",
    "turn on light",
    "slide cabinet",
    "open cabinet",
    "turn on burner",
    "open door",
]

# Gerund forms used by replace clauses in the prompt grammar.
SKILL_GERUNDS = [
    "opening the microwave",
    "moving the kettle",
    "turning on the light",
    "sliding the cabinet",
    "opening the cabinet",
    "turning on the burner",
    "opening the door",
]

WIND_LEVELS = ("none", "breeze", "gust", "flurry")
WIND_OFFSETS = {"none": 0.0, "breeze": 0.05, "gust": 0.2, "flurry": 0.4}

SPEED_LEVELS = ("slow", "normal", "fast")
SPEED_FACTORS = {"slow": 0.5, "normal": 1.0, "fast": 1.5}

TRAIN_W_VALUES = (-0.6, -0.3, 0.3, 0.6)

ACTION_LOW, ACTION_HIGH = -1.5, 1.5
START_JITTER = 0.15  # uniform half-width of the seeded start-position offset

PROFILE_KINDS = ("sin", "bias_small", "bias_large", "zigzag")


def default_object_positions(num_objects: int = 7, radius: float = 0.6) -> np.ndarray:
    """Objects evenly spaced on a ring; consecutive legs share one length."""
    angles = 2.0 * np.pi * np.arange(num_objects) / num_objects
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


@dataclass
class EnvConfig:
    num_objects: int = 7
    object_positions: np.ndarray | None = None
    reach_radius: float = 0.05
    base_step: float = 0.05
    horizon: int = 280
    action_dim: int = 4
    obs_dim: int = 32
    obs_noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.object_positions is None:
            self.object_positions = default_object_positions(self.num_objects)
        self.object_positions = np.asarray(self.object_positions, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        if self.reach_radius <= 0:
            raise ValidationError("reach_radius must be positive")
        if self.action_dim != 4:
            raise ValidationError("action_dim is fixed at 4")
        if self.object_positions.shape != (self.num_objects, 2):
            raise ValidationError(
                f"object_positions must have shape ({self.num_objects}, 2)"
            )
        diffs = self.object_positions[:, None, :] - self.object_positions[None, :, :]
        dists = np.linalg.norm(diffs, axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() < 2.0 * self.reach_radius:
            raise ValidationError("object positions closer than 2 * reach_radius")

    @property
    def state_dim(self) -> int:
        # agent_pos (2) + grip (1) + flags (num_objects) + normalized time (1)
        return 3 + self.num_objects + 1


@dataclass
class EnvState:
    agent_pos: np.ndarray
    grip: float
    flags: np.ndarray
    t: int

    @classmethod
    def initial(cls, start_pos: np.ndarray, num_objects: int) -> "EnvState":
        return cls(
            agent_pos=np.asarray(start_pos, dtype=np.float64).copy(),
            grip=0.0,
            flags=np.zeros(num_objects, dtype=bool),
            t=0,
        )

    def to_vector(self, horizon: int) -> np.ndarray:
        return np.concatenate(
            [
                self.agent_pos,
                [self.grip],
                self.flags.astype(np.float64),
                [self.t / float(horizon)],
            ]
        )


@dataclass
class DomainContext:
    wind_level: str = "none"
    speed_level: str = "normal"
    train_w: float | None = None

    def __post_init__(self):
        if self.wind_level not in WIND_LEVELS:
            raise ValidationError(f"unknown wind level {self.wind_level!r}")
        if self.speed_level not in SPEED_LEVELS:
            raise ValidationError(f"unknown speed level {self.speed_level!r}")
        if self.train_w is not None and not (-1.0 <= self.train_w <= 1.0):
            raise ValidationError("train_w outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "wind": self.wind_level,
            "speed": self.speed_level,
            "train_w": self.train_w,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainContext":
        return cls(
            wind_level=d["wind"], speed_level=d["speed"], train_w=d.get("train_w")
        )


@dataclass
class NonStationaryProfile:
    """Time-varying fourth-axis perturbation, resampled at every timestep."""

    kind: str
    m: float = 0.3
    M: float = 0.6
    rng_seed: int = 0
    _rng: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValidationError(f"unknown profile kind {self.kind!r}")
        if not (0.0 < self.m < self.M):
            raise ValidationError("profile amplitudes must satisfy 0 < m < M")

    def reset(self):
        self._rng = np.random.default_rng(self.rng_seed)

    def sample(self, t: int, horizon: int) -> float:
        return perturbation(self, t, horizon)


def perturbation(profile: NonStationaryProfile, t: int, horizon: int) -> float:
    """Draw w_t for one timestep; the branch variable u_t is fresh per call."""
    if not (0 <= t < horizon):
        raise ValidationError(f"t={t} outside [0, {horizon})")
    if profile._rng is None:
        profile.reset()
    rng = profile._rng
    u = rng.uniform(0.0, 1.0)
    if profile.kind == "sin":
        if u <= 0.5:
            return 0.6 * math.sin(8.0 * math.pi * t / horizon)
        return 0.25 * math.sin(8.0 * math.pi * t * t / horizon)
    if profile.kind == "bias_small":
        amp = profile.m
    elif profile.kind == "bias_large":
        amp = profile.M
    else:  # zigzag
        return 0.45 if u <= 0.5 else -0.45
    base = -amp if u <= 0.25 else amp
    return base + rng.uniform(0.0, 0.1)


def env_step(
    state: EnvState,
    action: np.ndarray,
    cfg: EnvConfig,
    context: DomainContext,
    profile: NonStationaryProfile | None = None,
) -> EnvState:
    """One dynamics step. Wind opposes the planar command; the fourth axis
    damps movement through ``max(0, 1 - |a[3] - w_t|)``."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (4,) or not np.all(np.isfinite(a)):
        raise ValidationError("action must be a finite 4-vector")
    a = np.clip(a, ACTION_LOW, ACTION_HIGH)

    w = profile.sample(state.t, cfg.horizon) if profile is not None else 0.0
    c = WIND_OFFSETS[context.wind_level]
    planar = a[:2] - c
    scale = max(0.0, 1.0 - abs(a[3] - w))
    new_pos = np.clip(state.agent_pos + planar * scale, -1.0, 1.0)

    flags = state.flags.copy()
    if a[2] > 0.5:
        dists = np.linalg.norm(cfg.object_positions - new_pos, axis=1)
        flags |= dists <= cfg.reach_radius

    return EnvState(
        agent_pos=new_pos,
        grip=float(np.clip(a[2], -1.0, 1.0)),
        flags=flags,
        t=state.t + 1,
    )


def expert_action(
    state: EnvState, skill: int, context: DomainContext, cfg: EnvConfig
) -> np.ndarray:
    """Rule-based expert: head straight for the object, stop inside the reach
    radius and trigger. Wind is compensated by +c on axes 0..2."""
    if not (0 <= skill < cfg.num_objects):
        raise UnknownSkillError(f"skill id {skill} out of range")
    if state.flags[skill]:
        raise GenerationError(f"skill {skill} already completed")
    delta = cfg.object_positions[skill] - state.agent_pos
    dist = float(np.linalg.norm(delta))
    if dist <= cfg.reach_radius:
        planar = np.zeros(2)
        grab = 1.0
    else:
        step = cfg.base_step * SPEED_FACTORS[context.speed_level]
        planar = delta / dist * min(step, dist)
        grab = 0.0
    c = WIND_OFFSETS[context.wind_level]
    w = context.train_w if context.train_w is not None else 0.0
    return np.array([planar[0] + c, planar[1] + c, grab + c, w])


class ObservationProjector:
    """Fixed random projection standing in for a camera: v = tanh(A s + b)
    plus per-call gaussian noise. A and b are drawn once per seed."""

    def __init__(self, state_dim: int, obs_dim: int, noise_sigma: float, proj_seed: int):
        rng = np.random.default_rng(proj_seed)
        self.A = rng.normal(0.0, 1.2 / math.sqrt(state_dim), size=(obs_dim, state_dim))
        self.b = rng.normal(0.0, 0.1, size=obs_dim)
        self.noise_sigma = noise_sigma
        self.obs_dim = obs_dim

    def render(self, state_vec: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        v = np.tanh(self.A @ state_vec + self.b)
        if self.noise_sigma > 0 and rng is not None:
            v = v + rng.normal(0.0, self.noise_sigma, size=self.obs_dim)
        return v


def render_observation(
    state: EnvState,
    cfg: EnvConfig,
    projector: ObservationProjector,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    return projector.render(state.to_vector(cfg.horizon), rng)


@dataclass
class Trajectory:
    """Expert rollout with aligned per-timestep arrays.

    ``states[t]`` is the state vector before ``actions[t]`` was applied;
    ``labels[t]`` is the id of the skill being executed at t.
    """

    states: np.ndarray  # [T, state_dim]
    actions: np.ndarray  # [T, 4]
    observations: np.ndarray  # [T, obs_dim]
    labels: np.ndarray  # [T] int
    context: DomainContext
    skill_segments: list[tuple[int, int, int]]  # (skill, start, end) half-open
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def task(self) -> list[int]:
        return [seg[0] for seg in self.skill_segments]


def generate_trajectory(
    skills: list[int],
    context: DomainContext,
    cfg: EnvConfig,
    projector: ObservationProjector,
    seed: int = 0,
) -> Trajectory:
    """Roll the expert through ``skills`` in order, recording (s, a, v, l)."""
    if not skills:
        raise ValidationError("skills must be non-empty")
    if len(set(skills)) != len(skills):
        raise ValidationError("skill ids must be pairwise distinct")

    rng = np.random.default_rng(seed)
    start = rng.uniform(-START_JITTER, START_JITTER, size=2)
    state = EnvState.initial(start, cfg.num_objects)

    states, actions, observations, labels = [], [], [], []
    segments = []
    for skill in skills:
        seg_start = len(labels)
        while not state.flags[skill]:
            if state.t >= cfg.horizon:
                raise GenerationError(
                    f"skill {skill} not completed within horizon {cfg.horizon}"
                )
            a = expert_action(state, skill, context, cfg)
            states.append(state.to_vector(cfg.horizon))
            actions.append(a)
            observations.append(render_observation(state, cfg, projector, rng))
            labels.append(skill)
            state = env_step(state, a, cfg, context, profile=None)
        segments.append((skill, seg_start, len(labels)))

    return Trajectory(
        states=np.asarray(states),
        actions=np.asarray(actions),
        observations=np.asarray(observations),
        labels=np.asarray(labels, dtype=np.int64),
        context=context,
        skill_segments=segments,
        seed=seed,
    )


@dataclass
class DatasetBlock:
    """One cartesian cell group of the generation spec."""

    tasks: list[list[int]]
    winds: list[str]
    speeds: list[str] | None = None  # None disables the speed axis (normal only)
    train_ws: list[float | None] = field(default_factory=lambda: [None])
    seeds: list[int] = field(default_factory=lambda: [0])

    def count(self) -> int:
        n = len(self.tasks) * len(self.winds) * len(self.train_ws) * len(self.seeds)
        if self.speeds is not None:
            n *= len(self.speeds)
        return n

    def cells(self):
        speeds = self.speeds if self.speeds is not None else ["normal"]
        for ti, task in enumerate(self.tasks):
            for wind in self.winds:
                for speed in speeds:
                    for tw in self.train_ws:
                        for seed in self.seeds:
                            yield ti, task, wind, speed, tw, seed


def generate_dataset(
    blocks: list[DatasetBlock],
    cfg: EnvConfig,
    projector: ObservationProjector,
    base_seed: int = 0,
) -> list[Trajectory]:
    """Generate the full cartesian product of every block, deterministically.

    The trajectory count equals the sum over blocks of
    |tasks| x |winds| x |train_ws| x |seeds| (x |speeds| when enabled).
    """
    if not blocks or all(b.count() == 0 for b in blocks):
        raise ValidationError("dataset spec is empty")
    trajectories = []
    for bi, block in enumerate(blocks):
        for ti, task, wind, speed, tw, seed in block.cells():
            ss = np.random.SeedSequence(
                [
                    base_seed,
                    bi,
                    ti,
                    WIND_LEVELS.index(wind),
                    SPEED_LEVELS.index(speed),
                    TRAIN_W_VALUES.index(tw) if tw in TRAIN_W_VALUES else 9,
                    seed,
                ]
            )
            traj_seed = int(ss.generate_state(1)[0])
            context = DomainContext(wind_level=wind, speed_level=speed, train_w=tw)
            traj = generate_trajectory(task, context, cfg, projector, seed=traj_seed)
            traj.seed = seed
            trajectories.append(traj)
    return trajectories


class DurationTable:
    """Mean/sd of segment lengths per (skill, speed) cell."""

    def __init__(self, cells: dict[tuple[int, str], tuple[float, float, int]]):
        self.cells = cells

    def get(self, skill: int, speed: str) -> tuple[float, float, int] | None:
        return self.cells.get((skill, speed))

    def interval(self, skill: int, speed: str, z: float = 1.0364) -> tuple[float, float] | None:
        """Confidence interval mean +- z * sd (z defaults to the two-sided
        70% normal quantile)."""
        cell = self.get(skill, speed)
        if cell is None:
            return None
        mean, sd, _ = cell
        return (mean - z * sd, mean + z * sd)


def skill_duration_table(trajectories: list[Trajectory]) -> DurationTable:
    samples: dict[tuple[int, str], list[int]] = {}
    for traj in trajectories:
        for skill, start, end in traj.skill_segments:
            samples.setdefault((skill, traj.context.speed_level), []).append(end - start)
    cells = {
        key: (float(np.mean(v)), float(np.std(v)), len(v)) for key, v in samples.items()
    }
    return DurationTable(cells)
