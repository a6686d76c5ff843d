import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newt.replay import (DEMO, ONLINE, DualBuffer, EpisodeRecord, TaskMeta, read_demos,
                         write_demos)

S, A = 4, 2


def meta():
    return TaskMeta(lang=np.ones(3) / np.sqrt(3), gamma=0.95,
                    state_mask=np.array([True, True, True, False]),
                    action_mask=np.array([True, False]))


def episode(T, source=ONLINE, tag=0.0, task_id=0):
    """States carry (tag, step index) so segments can be traced back."""
    states = np.zeros((T + 1, S))
    states[:, 0] = tag
    states[:, 1] = np.arange(T + 1)
    states[:, 2] = 1.0
    actions = np.zeros((T, A))
    actions[:, 0] = np.arange(T) / (T + 1)
    return EpisodeRecord(task_id, states, actions, np.arange(T, dtype=float), source)


def buffer(capacity=10_000, frac=0.5):
    return DualBuffer([meta(), meta()], capacity=capacity, demo_fraction=frac)


def test_episode_validation():
    with pytest.raises(ValueError):
        EpisodeRecord(0, np.zeros((5, S)), np.zeros((5, A)), np.zeros(5))
    with pytest.raises(ValueError):
        EpisodeRecord(0, np.zeros((3, S)), np.zeros((2, A)), np.zeros(3))
    with pytest.raises(ValueError):
        EpisodeRecord(0, np.zeros((3, S)), np.zeros((2, A)), np.zeros(2), source="web")


def test_add_rejects_unmasked_padding_and_unknown_tasks():
    b = buffer()
    ep = episode(5)
    ep.states[0, 3] = 1.0
    with pytest.raises(ValueError, match="masked"):
        b.add_episode(ep)
    with pytest.raises(ValueError):
        b.add_episode(episode(5, task_id=7))
    bad = EpisodeRecord(0, np.zeros((3, 5)), np.zeros((2, A)), np.zeros(2))
    with pytest.raises(ValueError):
        b.add_episode(bad)


def test_fifo_eviction_by_whole_episodes():
    b = buffer(capacity=20)
    for k in range(3):
        b.add_episode(episode(10, tag=k))
    tags = [ep.states[0, 0] for ep in b.online.episodes]
    assert tags == [1.0, 2.0]
    assert b.online.transitions == 20


def test_demos_never_evicted():
    b = buffer(capacity=10)
    for k in range(50):
        b.add_episode(episode(10, DEMO, tag=k))
    assert b.num_episodes() == (50, 0)


def test_counts_before_capacity():
    b = buffer()
    for _ in range(7):
        b.add_episode(episode(8))
    assert b.num_episodes() == (0, 7)


def test_episode_larger_than_capacity_rejected():
    with pytest.raises(ValueError):
        buffer(capacity=5).add_episode(episode(6))


@pytest.mark.parametrize("batch", [1, 2, 7, 256, 1024])
def test_split_is_exact(batch):
    b = buffer()
    b.add_episode(episode(10, DEMO))
    b.add_episode(episode(10, ONLINE))
    out = b.sample_segments(batch, 3, np.random.default_rng(0))
    assert out.is_demo.sum() == math.ceil(batch / 2)
    assert out.size == batch


def test_empty_store_errors_with_hint():
    b = buffer()
    b.add_episode(episode(10, DEMO))
    with pytest.raises(RuntimeError, match="online"):
        b.sample_segments(4, 3, np.random.default_rng(0))
    b2 = buffer()
    b2.add_episode(episode(10, ONLINE))
    with pytest.raises(RuntimeError, match="demonstrations"):
        b2.sample_segments(4, 3, np.random.default_rng(0))
    b3 = buffer()
    b3.add_episode(episode(2, DEMO))
    with pytest.raises(RuntimeError):
        b3.sample_segments(4, 3, np.random.default_rng(0), demo_fraction=1.0)


def test_demo_only_and_online_only_batches():
    b = buffer(frac=0.0)
    b.add_episode(episode(10, ONLINE))
    assert not b.sample_segments(5, 3, np.random.default_rng(0)).is_demo.any()
    b.add_episode(episode(10, DEMO))
    assert b.sample_segments(5, 3, np.random.default_rng(0), demo_fraction=1.0).is_demo.all()


def test_segments_never_cross_episodes():
    b = buffer()
    rng = np.random.default_rng(0)
    for k in range(6):
        b.add_episode(episode(int(rng.integers(3, 15)), DEMO, tag=k))
        b.add_episode(episode(int(rng.integers(3, 15)), ONLINE, tag=100 + k))
    seen = 0
    while seen < 10_000:
        out = b.sample_segments(500, 3, rng)
        tags = out.states[:, :, 0]
        steps = out.states[:, :, 1]
        assert np.all(tags == tags[:, :1])
        assert np.all(np.diff(steps, axis=1) == 1)
        # rewards and actions line up with the same offsets
        assert np.array_equal(out.rewards, steps[:, :-1])
        seen += out.size


def test_segment_metadata():
    b = buffer()
    b.add_episode(episode(10, DEMO))
    b.add_episode(episode(10, ONLINE, task_id=1))
    out = b.sample_segments(6, 2, np.random.default_rng(0))
    assert out.states.shape == (6, 3, S) and out.actions.shape == (6, 2, A)
    assert out.lang.shape == (6, 3) and np.allclose(out.gamma, 0.95)
    assert out.action_mask.shape == (6, A)
    assert out.task_ids.tolist() == [0, 0, 0, 1, 1, 1]
    assert out.episode_ids.tolist() == [0, 0, 0, 1, 1, 1]


def test_single_episode_of_exact_length_only_offset_zero():
    b = buffer(frac=1.0)
    b.add_episode(episode(3, DEMO))
    out = b.sample_segments(200, 3, np.random.default_rng(0))
    assert np.all(out.states[:, 0, 1] == 0)


def test_offsets_are_uniform():
    b = buffer(frac=1.0)
    for k in range(4):
        b.add_episode(episode(12, DEMO, tag=k))
    rng = np.random.default_rng(1)
    out = b.sample_segments(40_000, 3, rng)
    pairs = out.states[:, 0, 0] * 100 + out.states[:, 0, 1]
    _, counts = np.unique(pairs, return_counts=True)
    n_cells = 4 * 10
    assert len(counts) == n_cells
    p = 1 / n_cells
    expected = 40_000 * p
    sd = np.sqrt(40_000 * p * (1 - p))
    assert np.all(np.abs(counts - expected) < 4 * sd)


def test_unequal_lengths_weighted_by_offset_count():
    b = buffer(frac=1.0)
    b.add_episode(episode(4, DEMO, tag=0))    # 2 offsets for seg_len 3
    b.add_episode(episode(20, DEMO, tag=1))   # 18 offsets
    out = b.sample_segments(20_000, 3, np.random.default_rng(2))
    frac = np.mean(out.states[:, 0, 0] == 0)
    assert abs(frac - 0.1) < 0.01


def test_empirical_demo_fraction():
    b = buffer()
    b.add_episode(episode(10, DEMO))
    b.add_episode(episode(10, ONLINE))
    rng = np.random.default_rng(0)
    total = sum(b.sample_segments(100, 3, rng).is_demo.sum() for _ in range(100))
    assert abs(total / 10_000 - 0.5) <= 0.02


def test_evicted_episodes_are_not_sampled():
    b = buffer(capacity=30)
    b.add_episode(episode(10, DEMO, tag=-1))
    for k in range(10):
        b.add_episode(episode(10, ONLINE, tag=k))
    out = b.sample_segments(2000, 3, np.random.default_rng(0))
    online_tags = set(out.states[~out.is_demo, 0, 0].tolist())
    assert online_tags <= {7.0, 8.0, 9.0}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=12), st.integers(1, 60))
def test_capacity_invariant(lengths, capacity):
    b = buffer(capacity=capacity)
    for T in lengths:
        if T > capacity:
            with pytest.raises(ValueError):
                b.add_episode(episode(T))
            continue
        b.add_episode(episode(T))
        assert b.online.transitions <= capacity
        assert b.online.transitions == sum(ep.length for ep in b.online.episodes)


def test_newtdemo_roundtrip(tmp_path):
    eps = [episode(5, DEMO, tag=1), episode(9, DEMO, tag=2, task_id=1)]
    path = tmp_path / "d.newtdemo"
    write_demos(path, ["alpha", "béta"], eps)
    names, back = read_demos(path)
    assert names == ["alpha", "béta"]
    for a, b in zip(eps, back):
        assert a.task_id == b.task_id and b.source == DEMO
        for f in ("states", "actions", "rewards"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
            assert getattr(b, f).dtype == np.float32
    raw = path.read_bytes()
    assert raw[:8] == b"NEWTDEMO"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_newtdemo_rejects_bad_files(tmp_path):
    path = tmp_path / "d.newtdemo"
    write_demos(path, ["a"], [episode(5, DEMO)])
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_demos(tmp_path / "trunc")
    (tmp_path / "magic").write_bytes(b"XEWTDEMO" + raw[8:])
    with pytest.raises(ValueError, match="NEWTDEMO"):
        read_demos(tmp_path / "magic")
    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        read_demos(tmp_path / "tail")
    with pytest.raises(ValueError):
        write_demos(path, ["a"], [episode(5, DEMO, task_id=1)])
