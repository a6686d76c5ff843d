"""Demonstration and online replay with within-episode segment sampling.

Demonstrations live in their own store and are never evicted. Online
episodes go to a FIFO store bounded by a transition capacity; eviction
drops whole episodes so a stored episode is always complete. Every batch
draws exactly ceil(batch * demo_fraction) segments from the demo store.

Within a store, every (episode, start offset) pair is equally likely:
episodes are chosen in proportion to their number of valid offsets.
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .worldmodel import SegmentBatch

DEMO, ONLINE = "demo", "online"


@dataclass
class EpisodeRecord:
    task_id: int
    states: np.ndarray      # [T+1, S]
    actions: np.ndarray     # [T, A]
    rewards: np.ndarray     # [T]
    source: str = ONLINE

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        if self.source not in (DEMO, ONLINE):
            raise ValueError(f"unknown episode source {self.source!r}")
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.rewards.ndim != 1:
            raise ValueError("episode arrays must be [T+1, S], [T, A] and [T]")
        T = len(self.actions)
        if T < 1 or len(self.states) != T + 1 or len(self.rewards) != T:
            raise ValueError(f"inconsistent episode lengths: states {len(self.states)}, "
                             f"actions {T}, rewards {len(self.rewards)}")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class TaskMeta:
    """Per-task constants attached to every sampled segment."""
    lang: np.ndarray
    gamma: float
    state_mask: np.ndarray
    action_mask: np.ndarray

    @classmethod
    def from_spec(cls, spec) -> "TaskMeta":
        return cls(spec.lang_embedding, spec.gamma, spec.state_mask, spec.action_mask)


class _Store:
    def __init__(self, capacity: int | None):
        self.capacity = capacity
        self.episodes: deque = deque()
        self.ids: deque = deque()
        self.transitions = 0
        self._cum = None
        self._cum_len = None

    def add(self, ep: EpisodeRecord, ep_id: int) -> None:
        if self.capacity is not None and ep.length > self.capacity:
            raise ValueError(f"episode of {ep.length} steps exceeds capacity {self.capacity}")
        self.episodes.append(ep)
        self.ids.append(ep_id)
        self.transitions += ep.length
        while self.capacity is not None and self.transitions > self.capacity:
            old = self.episodes.popleft()
            self.ids.popleft()
            self.transitions -= old.length
        self._cum = None

    def offsets(self, seg_len: int) -> np.ndarray:
        if self._cum is None or self._cum_len != seg_len:
            counts = np.array([max(0, ep.length - seg_len + 1) for ep in self.episodes], np.int64)
            self._cum = np.cumsum(counts)
            self._cum_len = seg_len
        return self._cum


class DualBuffer:
    def __init__(self, tasks: list[TaskMeta], capacity: int = 500_000,
                 demo_fraction: float = 0.5):
        if not 0.0 <= demo_fraction <= 1.0:
            raise ValueError("demo_fraction must lie in [0, 1]")
        self.tasks = list(tasks)
        self.demo_fraction = demo_fraction
        self.demo = _Store(None)
        self.online = _Store(capacity)
        self._next_id = 0

    @property
    def capacity(self) -> int:
        return self.online.capacity

    def add_episode(self, ep: EpisodeRecord, episode_id: int | None = None) -> None:
        """Store ``ep``; ``episode_id`` restores a saved id and must exceed all earlier ones."""
        if not 0 <= ep.task_id < len(self.tasks):
            raise ValueError(f"unknown task id {ep.task_id}")
        meta = self.tasks[ep.task_id]
        if ep.states.shape[1] != len(meta.state_mask) or ep.actions.shape[1] != len(meta.action_mask):
            raise ValueError("episode widths do not match the task's padded dims")
        if np.any(ep.states[:, ~meta.state_mask]) or np.any(ep.actions[:, ~meta.action_mask]):
            raise ValueError("masked dims must be zero")
        if episode_id is not None:
            if episode_id < self._next_id:
                raise ValueError("episode ids must increase")
            self._next_id = episode_id
        (self.demo if ep.source == DEMO else self.online).add(ep, self._next_id)
        self._next_id += 1

    def split(self, batch: int, demo_fraction: float | None = None) -> tuple[int, int]:
        frac = self.demo_fraction if demo_fraction is None else demo_fraction
        n_demo = math.ceil(batch * frac)
        return n_demo, batch - n_demo

    def sample_segments(self, batch: int, seg_len: int, rng,
                        demo_fraction: float | None = None) -> SegmentBatch:
        """``batch`` segments of ``seg_len`` transitions (``seg_len + 1`` states).

        ``demo_fraction`` overrides the buffer's split for this call (1.0 for
        demo-only pretraining batches).
        """
        n_demo, n_online = self.split(batch, demo_fraction)
        parts = []
        for store, n, label in ((self.demo, n_demo, DEMO), (self.online, n_online, ONLINE)):
            if n == 0:
                continue
            cum = store.offsets(seg_len)
            if len(cum) == 0 or cum[-1] == 0:
                hint = "collect demonstrations first" if label == DEMO else \
                    "collect online episodes before updating"
                raise RuntimeError(f"{label} store has no episode of >= {seg_len} steps; {hint}")
            flat = rng.integers(0, cum[-1], size=n)
            ep_idx = np.searchsorted(cum, flat, side="right")
            starts = flat - np.concatenate([[0], cum[:-1]])[ep_idx]
            parts.append((store, ep_idx, starts, label == DEMO))
        return self._gather(parts, seg_len)

    def _gather(self, parts, H) -> SegmentBatch:
        states, actions, rewards, tids, demo, eids = [], [], [], [], [], []
        for store, ep_idx, starts, is_demo in parts:
            for i, t0 in zip(ep_idx, starts):
                ep = store.episodes[i]
                states.append(ep.states[t0:t0 + H + 1])
                actions.append(ep.actions[t0:t0 + H])
                rewards.append(ep.rewards[t0:t0 + H])
                tids.append(ep.task_id)
                eids.append(store.ids[i])
            demo.extend([is_demo] * len(ep_idx))
        tids = np.array(tids, dtype=np.int64)
        metas = [self.tasks[t] for t in tids]
        return SegmentBatch(
            states=np.stack(states), lang=np.stack([m.lang for m in metas]).astype(np.float32),
            actions=np.stack(actions), rewards=np.stack(rewards),
            gamma=np.array([m.gamma for m in metas], dtype=np.float32),
            action_mask=np.stack([m.action_mask for m in metas]),
            state_mask=np.stack([m.state_mask for m in metas]),
            task_ids=tids, is_demo=np.array(demo, dtype=bool),
            episode_ids=np.array(eids, dtype=np.int64))

    def num_episodes(self) -> tuple[int, int]:
        return len(self.demo.episodes), len(self.online.episodes)

    def episodes(self):
        """All stored episodes, demos first, oldest first."""
        return list(self.demo.episodes) + list(self.online.episodes)


# ---------------------------------------------------------------------------
# NEWTDEMO container

MAGIC = b"NEWTDEMO"
VERSION = 1


def write_demos(path, task_names: list[str], episodes: list[EpisodeRecord]) -> None:
    """Write episodes to a NEWTDEMO file (all integers and floats little-endian)."""
    out = [MAGIC, struct.pack("<II", VERSION, len(task_names))]
    for name in task_names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    out.append(struct.pack("<I", len(episodes)))
    for ep in episodes:
        if not 0 <= ep.task_id < len(task_names):
            raise ValueError(f"episode task id {ep.task_id} outside the task table")
        T, S = ep.states.shape[0] - 1, ep.states.shape[1]
        A = ep.actions.shape[1]
        out.append(struct.pack("<IIII", ep.task_id, T, S, A))
        for arr in (ep.states, ep.actions, ep.rewards):
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_demos(path, source: str = DEMO) -> tuple[list[str], list[EpisodeRecord]]:
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated NEWTDEMO file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise ValueError(f"{path}: not a NEWTDEMO file")
    version, n_tasks = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported NEWTDEMO version {version}")
    names = []
    for _ in range(n_tasks):
        (n,) = struct.unpack("<I", take(4))
        names.append(bytes(take(n)).decode("utf-8"))
    (n_eps,) = struct.unpack("<I", take(4))
    episodes = []
    for _ in range(n_eps):
        tid, T, S, A = struct.unpack("<IIII", take(16))
        if tid >= n_tasks:
            raise ValueError(f"{path}: episode task index {tid} outside the task table")
        arrs = []
        for shape in ((T + 1, S), (T, A), (T,)):
            count = int(np.prod(shape))
            arrs.append(np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
                        .astype(np.float32))
        episodes.append(EpisodeRecord(tid, *arrs, source=source))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after the last episode")
    return names, episodes
