import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from advimitate.autodiff import UsageError
from advimitate.envs import Trajectory, Transition
from advimitate.replay import ReplayBuffer, expert_buffer, relabel, stack

DIM = 3


def make_traj(n, start=0, wrapped=True):
    ts = [Transition(np.array([float(start + i), 0.0, 0.0]), i % 2, 0.0,
                     np.array([float(start + i + 1), 0.0, 0.0]), behavior_logp=-0.5)
          for i in range(n)]
    return Trajectory(ts, truncated=True, wrapped=wrapped)


def ids(buf):
    return [t.state[0] for t in buf.store]


def test_push_len():
    buf = ReplayBuffer(10, state_dim=DIM)
    buf.push_trajectory(make_traj(3))
    assert len(buf) == 3


def test_fifo_eviction():
    buf = ReplayBuffer(4, state_dim=DIM)
    buf.push_trajectory(make_traj(3, start=0))
    buf.push_trajectory(make_traj(3, start=10))
    assert len(buf) == 4
    assert ids(buf) == [2.0, 10.0, 11.0, 12.0]


def test_survivors_unchanged():
    traj = make_traj(5)
    buf = ReplayBuffer(3, state_dim=DIM)
    buf.push_trajectory(traj)
    for t in buf.store:
        assert any(t.same_as(o) for o in traj.transitions)


def test_rejects_unwrapped_and_bad_width():
    buf = ReplayBuffer(3, state_dim=DIM)
    with pytest.raises(UsageError):
        buf.push_trajectory(make_traj(2, wrapped=False))
    bad = make_traj(1)
    bad.transitions[0].state = np.zeros(2)
    with pytest.raises(UsageError):
        buf.push_trajectory(bad)
    pos = make_traj(1)
    pos.transitions[0].behavior_logp = 0.1
    with pytest.raises(UsageError):
        buf.push_trajectory(pos)


def test_sample_single_item():
    buf = ReplayBuffer(3)
    buf.push_trajectory(make_traj(1))
    batch = buf.sample(5, seed=0)
    assert len(batch) == 5 and all(t is buf.store[0] for t in batch)


def test_sample_empty_is_error():
    with pytest.raises(UsageError):
        ReplayBuffer(3).sample(1, seed=0)


def test_sample_seeded():
    buf = ReplayBuffer(50)
    buf.push_trajectory(make_traj(20))
    assert [t.state[0] for t in buf.sample(30, seed=4)] == [t.state[0] for t in buf.sample(30, seed=4)]


def test_sample_uniform_chi_square():
    buf = ReplayBuffer(10)
    buf.push_trajectory(make_traj(10))
    counts = np.bincount([int(t.state[0]) for t in buf.sample(100_000, seed=123)], minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_relabel():
    batch = make_traj(4).transitions
    before = [t.state.copy() for t in batch]
    relabel(batch, [0.0] * 4)
    assert all(t.reward == 0.0 for t in batch)
    assert all(np.array_equal(t.state, s) for t, s in zip(batch, before))
    relabel(batch, [1.0, 2.0, 3.0, 4.0])
    relabel(batch, [5.0, 6.0, 7.0, 8.0])
    assert [t.reward for t in batch] == [5.0, 6.0, 7.0, 8.0]
    with pytest.raises(UsageError):
        relabel(batch, [1.0])


def test_relabel_writes_through():
    buf = ReplayBuffer(10)
    buf.push_trajectory(make_traj(1))
    buf.relabel(buf.sample(1, seed=0), [42.0])
    assert buf.sample(3, seed=1)[0].reward == 42.0


def test_expert_buffer_write_once():
    E = expert_buffer([make_traj(3)])
    with pytest.raises(UsageError):
        E.relabel(E.sample(2, seed=0), [1.0, 2.0])


def test_stack_columns():
    s, a, s2, lp = stack(make_traj(3).transitions)
    assert s.shape == (3, 3) and a.tolist() == [0, 1, 0] and s2[0, 0] == 1.0
    assert np.allclose(lp, -0.5)


@given(st.integers(1, 8), st.lists(st.integers(1, 6), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_length_invariant_and_no_fabrication(capacity, lengths):
    buf = ReplayBuffer(capacity, state_dim=DIM)
    pushed, total = [], 0
    for i, n in enumerate(lengths):
        traj = make_traj(n, start=100 * i)
        buf.push_trajectory(traj)
        pushed += traj.transitions
        total += n
        assert len(buf) == min(capacity, total)
    assert ids(buf) == [t.state[0] for t in pushed[-capacity:]]
    for t in buf.sample(20, seed=0):
        assert any(t is p for p in pushed)
