"""MicroArcade: a small multitask suite with a unified, masked interface.

Every task exposes padded state and action vectors (prefix-aligned masks),
a fixed episode length with automatic reset, a per-task discount, a
two-part language instruction and a scripted expert used to produce
demonstrations. Dynamics are closed-form arithmetic so episodes are exactly
reproducible from a seed.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TaskSpec", "StepResult", "ToyEnv", "REGISTRY", "TRAIN_TASKS",
    "make_task", "discount_for", "embed_instruction", "normalized_score",
    "scripted_expert", "load_embeddings", "save_embeddings", "pad", "unpad",
]


def discount_for(T: int) -> float:
    if T < 1:
        raise ValueError("episode length must be >= 1")
    frac = T / 5
    return float(np.clip((frac - 1) / frac, 0.95, 0.995))


# ---------------------------------------------------------------------------
# Instruction embeddings


def _normalize_text(text: str) -> str:
    return " ".join(text.strip().lower().split())


def embed_instruction(text: str, lang_dim: int, seed_salt: str = "newt",
                      overrides: dict | None = None) -> np.ndarray:
    """Deterministic unit-norm stand-in for a frozen text encoder."""
    if not text or not text.strip():
        raise ValueError("instruction text must be nonempty")
    if overrides and text in overrides:
        vec = np.asarray(overrides[text], dtype=np.float64)
        if vec.shape != (lang_dim,):
            raise ValueError(f"embedding override for {text!r} has dim {vec.shape}, expected {lang_dim}")
        return vec / np.linalg.norm(vec)
    digest = hashlib.sha256(f"{seed_salt}\x00{_normalize_text(text)}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(lang_dim)
    return vec / np.linalg.norm(vec)


def save_embeddings(path, entries: dict) -> None:
    """Write {text: vector} as: u32 dim, u32 count, then per entry
    u32 byte length, UTF-8 text, ``dim`` float32 values (all little-endian)."""
    items = list(entries.items())
    dim = len(items[0][1]) if items else 0
    with open(path, "wb") as f:
        f.write(struct.pack("<II", dim, len(items)))
        for text, vec in items:
            raw = text.encode("utf-8")
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise ValueError("all embeddings must share one dimension")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(vec.tobytes())


def load_embeddings(path, lang_dim: int | None = None) -> dict:
    data = Path(path).read_bytes()
    dim, count = struct.unpack_from("<II", data, 0)
    if lang_dim is not None and dim != lang_dim:
        raise ValueError(f"embeddings file has dim {dim}, expected {lang_dim}")
    off = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        text = data[off:off + n].decode("utf-8")
        off += n
        out[text] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
    return out


# ---------------------------------------------------------------------------
# Specs


@dataclass
class TaskSpec:
    name: str
    instruction: str
    lang_embedding: np.ndarray
    state_dim_native: int
    action_dim_native: int
    episode_len: int
    gamma: float
    success_scored: bool
    score_bounds: tuple
    state_mask: np.ndarray
    action_mask: np.ndarray

    @property
    def state_dim(self) -> int:
        return len(self.state_mask)

    @property
    def action_dim(self) -> int:
        return len(self.action_mask)


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    episode_done: bool
    success: bool
    info: dict = field(default_factory=dict)
    reset_obs: np.ndarray | None = None


def pad(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] > width:
        raise ValueError(f"cannot pad width {x.shape[-1]} into {width}")
    out = np.zeros(x.shape[:-1] + (width,))
    out[..., :x.shape[-1]] = x
    return out


def unpad(x: np.ndarray, native: int) -> np.ndarray:
    return np.asarray(x)[..., :native]


def _mask(native: int, width: int) -> np.ndarray:
    m = np.zeros(width, dtype=bool)
    m[:native] = True
    return m


# ---------------------------------------------------------------------------
# Environments

DT = 0.1
DAMPING = 0.9
ARENA = 1.0


def _point_mass_step(pos, vel, accel):
    vel = DAMPING * vel + DT * accel
    pos = pos + DT * vel
    hit = np.abs(pos) > ARENA
    pos = np.clip(pos, -ARENA, ARENA)
    vel = np.where(hit, 0.0, vel)
    return pos, vel


class ToyEnv:
    """Base class: fixed-length episodes with automatic reset."""

    name = ""
    instruction = ""
    state_dim_native = 0
    action_dim_native = 0
    episode_len = 0
    success_scored = True
    score_bounds = (0.0, 1.0)

    def __init__(self, spec: TaskSpec, seed: int = 0):
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.episode_return = 0.0
        self._reset_native()

    # subclasses implement these on self.state
    def _reset_native(self) -> None:
        raise NotImplementedError

    def _native_obs(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> float:
        raise NotImplementedError

    def _success(self) -> bool:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        return pad(self._native_obs(), self.spec.state_dim)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.episode_return = 0.0
        self._reset_native()
        return self.observe()

    def step(self, action) -> StepResult:
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ValueError(f"{self.name}: non-finite action {action}")
        native = np.clip(action[:self.action_dim_native], -1.0, 1.0)
        reward = float(self._advance(native))
        self.t += 1
        self.episode_return += reward
        success = bool(self._success())
        obs = self.observe()
        info = {"native": self._native_obs().copy(), "t": self.t}
        if self.t >= self.spec.episode_len:
            info["episode_return"] = self.episode_return
            info["score"] = normalized_score(self.spec, self.episode_return, success)
            reset_obs = self.reset()
            return StepResult(obs, reward, True, success, info, reset_obs)
        return StepResult(obs, reward, False, success, info)


class PointReach(ToyEnv):
    name = "point-reach"
    instruction = ("Embodiment: 2D point mass with 2 controllable actions: horizontal and "
                   "vertical acceleration. Instruction: Move to the goal location and stay there.")
    state_dim_native = 6
    action_dim_native = 2
    episode_len = 100
    goal_low, goal_high = -0.8, 0.8
    start_low, start_high = -0.8, 0.8

    def _reset_native(self):
        self.pos = self.rng.uniform(self.start_low, self.start_high, 2)
        self.vel = np.zeros(2)
        self.goal = self.rng.uniform(self.goal_low, self.goal_high, 2)

    def _native_obs(self):
        return np.concatenate([self.pos, self.vel, self.goal])

    def _dist(self):
        return float(np.linalg.norm(self.pos - self.goal))

    def _advance(self, a):
        self.pos, self.vel = _point_mass_step(self.pos, self.vel, a)
        return math.exp(-3.0 * self._dist())

    def _success(self):
        return self._dist() < 0.1


class PointReachShifted(PointReach):
    """Held-out variant: goals confined to the upper-right corner, starts to the lower-left."""

    name = "point-reach-shifted"
    instruction = ("Embodiment: 2D point mass with 2 controllable actions: horizontal and "
                   "vertical acceleration. Instruction: Travel to the goal in the upper right corner.")
    goal_low, goal_high = 0.55, 0.95
    start_low, start_high = -0.95, -0.4


WALL_TOP = 0.2  # wall occupies x=0, y in [-1, WALL_TOP]
GAP_Y = 0.6


class PointMaze(PointReach):
    name = "point-maze"
    instruction = ("Embodiment: 2D point mass with 2 controllable actions: horizontal and "
                   "vertical acceleration. Instruction: Navigate through the gap in the wall "
                   "to reach the goal on the other side.")
    episode_len = 200

    def _reset_native(self):
        self.pos = np.array([self.rng.uniform(-0.9, -0.3), self.rng.uniform(-0.9, 0.9)])
        self.vel = np.zeros(2)
        self.goal = np.array([self.rng.uniform(0.3, 0.9), self.rng.uniform(-0.9, 0.9)])

    def _advance(self, a):
        old = self.pos
        pos, vel = _point_mass_step(self.pos, self.vel, a)
        if np.sign(old[0]) != np.sign(pos[0]) or pos[0] == 0.0:
            # y at the crossing point of x = 0
            frac = old[0] / (old[0] - pos[0]) if old[0] != pos[0] else 0.0
            y_cross = old[1] + frac * (pos[1] - old[1])
            if y_cross <= WALL_TOP:
                side = -1.0 if old[0] < 0 else 1.0
                if old[0] == 0.0:
                    side = -1.0 if pos[0] <= 0 else 1.0
                pos = np.array([side * 0.01, pos[1]])
                vel = np.array([0.0, vel[1]])
        self.pos, self.vel = pos, vel
        return math.exp(-3.0 * self._dist())


class Chase(PointReach):
    name = "chase"
    instruction = ("Embodiment: 2D point mass with 2 controllable actions: horizontal and "
                   "vertical acceleration. Instruction: Chase the target moving along a circle "
                   "and stay close to it.")
    state_dim_native = 8
    episode_len = 100
    success_scored = False
    radius = 0.5
    rate = 0.05
    score_bounds = (0.0, float(episode_len))

    def _reset_native(self):
        self.pos = self.rng.uniform(-0.8, 0.8, 2)
        self.vel = np.zeros(2)
        self.phase = self.rng.uniform(0, 2 * np.pi)
        self._place_goal()

    def _place_goal(self):
        c, s = math.cos(self.phase), math.sin(self.phase)
        self.goal = self.radius * np.array([c, s])
        self.goal_vel = self.radius * self.rate / DT * np.array([-s, c])

    def _native_obs(self):
        return np.concatenate([self.pos, self.vel, self.goal, self.goal_vel])

    def _advance(self, a):
        self.pos, self.vel = _point_mass_step(self.pos, self.vel, a)
        self.phase += self.rate
        self._place_goal()
        return math.exp(-3.0 * self._dist())


PUSH_STEP = 0.05
PUSH_CONTACT = 0.05


class Push1D(ToyEnv):
    name = "push-1d"
    instruction = ("Embodiment: 1D pusher with 1 controllable action: velocity along a line. "
                   "Instruction: Push the block so it stops on the goal marker.")
    state_dim_native = 3
    action_dim_native = 1
    episode_len = 50

    def _reset_native(self):
        self.agent = self.rng.uniform(-0.8, -0.5)
        self.block = self.rng.uniform(-0.3, 0.0)
        self.goal = self.rng.uniform(self.block + 0.15, 0.7)

    def _native_obs(self):
        return np.array([self.agent, self.block, self.goal])

    def _advance(self, a):
        left = self.agent <= self.block
        agent = float(np.clip(self.agent + PUSH_STEP * a[0], -ARENA, ARENA))
        if left and agent > self.block - PUSH_CONTACT:
            self.block = min(agent + PUSH_CONTACT, ARENA)
            agent = self.block - PUSH_CONTACT
        elif not left and agent < self.block + PUSH_CONTACT:
            self.block = max(agent - PUSH_CONTACT, -ARENA)
            agent = self.block + PUSH_CONTACT
        self.agent = agent
        gap = abs(self.block - self.agent) - PUSH_CONTACT
        return 0.9 * math.exp(-3.0 * abs(self.block - self.goal)) + 0.1 * math.exp(-3.0 * gap)

    def _success(self):
        return abs(self.block - self.goal) < 0.05


COIN_RADIUS = 0.1
COIN_RANGE = 0.9
# mean distance between two uniform points in a square of side s is s * MEAN_DIST_UNIT
MEAN_DIST_UNIT = (2 + math.sqrt(2) + 5 * math.log(1 + math.sqrt(2))) / 15
MAX_SPEED = DT / (1 - DAMPING) * DT  # steady-state displacement per step at full thrust
# mean displacement per step of the scripted collector expert (turns included),
# measured over 40 episodes
EXPERT_SPEED = 0.06


class Collector(PointReach):
    name = "collector"
    instruction = ("Embodiment: 2D point mass with 2 controllable actions: horizontal and "
                   "vertical acceleration. Instruction: Collect as many coins as possible; "
                   "a new coin appears after each pickup.")
    episode_len = 250
    success_scored = False
    # straight-line travel at the expert's sustained speed between uniform coins
    score_bounds = (0.0, episode_len * EXPERT_SPEED
                    / (2 * COIN_RANGE * MEAN_DIST_UNIT - COIN_RADIUS))

    def _reset_native(self):
        self.pos = self.rng.uniform(-0.8, 0.8, 2)
        self.vel = np.zeros(2)
        self.goal = self.rng.uniform(-COIN_RANGE, COIN_RANGE, 2)

    def _advance(self, a):
        self.pos, self.vel = _point_mass_step(self.pos, self.vel, a)
        if self._dist() < COIN_RADIUS:
            self.goal = self.rng.uniform(-COIN_RANGE, COIN_RANGE, 2)
            return 1.0
        return 0.0

    def _success(self):
        return False


REGISTRY = {cls.name: cls for cls in (PointReach, PointMaze, Chase, Push1D, Collector,
                                      PointReachShifted)}
TRAIN_TASKS = ("point-reach", "point-maze", "chase", "push-1d", "collector")


def make_task(name: str, state_dim: int = 16, action_dim: int = 4, lang_dim: int = 32,
              seed: int = 0, embeddings: dict | None = None, gamma: float | None = None):
    """Instantiate a registered task. Returns (env, spec)."""
    if name not in REGISTRY:
        raise KeyError(f"unknown task {name!r}; registered tasks: {', '.join(REGISTRY)}")
    cls = REGISTRY[name]
    if cls.state_dim_native > state_dim or cls.action_dim_native > action_dim:
        raise ValueError(f"{name}: padded dims ({state_dim}, {action_dim}) too small")
    spec = TaskSpec(
        name=name,
        instruction=cls.instruction,
        lang_embedding=embed_instruction(cls.instruction, lang_dim, overrides=embeddings),
        state_dim_native=cls.state_dim_native,
        action_dim_native=cls.action_dim_native,
        episode_len=cls.episode_len,
        gamma=discount_for(cls.episode_len) if gamma is None else gamma,
        success_scored=cls.success_scored,
        score_bounds=tuple(cls.score_bounds),
        state_mask=_mask(cls.state_dim_native, state_dim),
        action_mask=_mask(cls.action_dim_native, action_dim),
    )
    return cls(spec, seed), spec


def normalized_score(spec: TaskSpec, episode_return: float, success: bool) -> float:
    if spec.success_scored:
        return 1.0 if success else 0.0
    lo, hi = spec.score_bounds
    return float(np.clip((episode_return - lo) / (hi - lo), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Scripted experts


def _pd(pos, vel, target, kp=4.0, kd=2.5):
    return np.clip(kp * (target - pos) - kd * vel, -1.0, 1.0)


def scripted_expert(name: str, native: np.ndarray) -> np.ndarray:
    """Deterministic controller for task ``name`` given the native state."""
    s = np.asarray(native, dtype=np.float64)
    if name in ("point-reach", "point-reach-shifted"):
        return _pd(s[0:2], s[2:4], s[4:6])
    if name == "point-maze":
        pos, vel, goal = s[0:2], s[2:4], s[4:6]
        if pos[0] < 0.05:
            frac = -pos[0] / (goal[0] - pos[0]) if goal[0] != pos[0] else 0.0
            y_cross = pos[1] + frac * (goal[1] - pos[1])
            if y_cross < WALL_TOP + 0.15:
                waypoint = np.array([0.15, GAP_Y])
                if pos[1] < GAP_Y - 0.2:
                    # climb on the near side first so the diagonal never clips the wall
                    waypoint = np.array([-0.1, GAP_Y])
                return np.clip(_pd(pos, vel, waypoint, kp=6.0, kd=2.0), -1, 1)
        return _pd(pos, vel, goal)
    if name == "chase":
        pos, vel, goal, gvel = s[0:2], s[2:4], s[4:6], s[6:8]
        lead = goal + gvel * DT * 3
        return np.clip(5.0 * (lead - pos) + 3.0 * (gvel - vel), -1.0, 1.0)
    if name == "push-1d":
        agent, block, goal = s
        return np.clip([(goal - PUSH_CONTACT - agent) / PUSH_STEP], -1.0, 1.0)
    if name == "collector":
        pos, vel, coin = s[0:2], s[2:4], s[4:6]
        d = coin - pos
        desired = d / max(np.linalg.norm(d), 1e-6)
        return np.clip(10.0 * (desired - vel), -1.0, 1.0)
    raise KeyError(f"no scripted expert for {name!r}")
