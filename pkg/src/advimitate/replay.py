"""Bounded FIFO replay buffers with uniform sampling and reward relabeling."""

from __future__ import annotations

import numpy as np

from .autodiff import UsageError
from .envs import Trajectory, Transition

POLICY_CAPACITY = 50_000


class ReplayBuffer:
    """Ring of :class:`Transition` objects.

    ``sample`` returns the stored objects themselves, so relabeling a sampled
    batch writes through to the buffer. ``capacity=None`` means unbounded.
    A buffer built with ``write_once=True`` (the expert buffer) refuses
    relabeling.
    """

    def __init__(self, capacity: int | None = POLICY_CAPACITY, seed: int = 0,
                 state_dim: int | None = None, write_once: bool = False):
        if capacity is not None and capacity < 1:
            raise UsageError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.write_once = write_once
        self._items: list = []
        self._head = 0  # index of the oldest item once the ring is full
        self.rng = np.random.default_rng(seed)
        self.total_pushed = 0

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self.store)

    @property
    def store(self) -> list:
        """Transitions oldest first."""
        return self._items[self._head:] + self._items[:self._head]

    def _append(self, t: Transition):
        if self.capacity is None or len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def push_trajectory(self, traj: Trajectory):
        if not traj.wrapped:
            raise UsageError("push_trajectory needs an absorbing-wrapped trajectory")
        for t in traj.transitions:
            if self.state_dim is not None and (
                    t.state.shape[-1] != self.state_dim or t.next_state.shape[-1] != self.state_dim):
                raise UsageError(f"transition width {t.state.shape[-1]} != buffer state_dim {self.state_dim}")
            if t.behavior_logp > 0:
                raise UsageError("behavior_logp must be a log-probability (<= 0)")
        for t in traj.transitions:
            self._append(t)
        self.total_pushed += len(traj.transitions)

    def sample(self, batch_size: int, seed: int | None = None) -> list:
        """Draw ``batch_size`` transitions uniformly with replacement.

        With ``seed`` the draw depends on nothing else; without it the
        buffer's own generator advances.
        """
        if not self._items:
            raise UsageError("cannot sample from an empty buffer")
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        rng = np.random.default_rng(seed) if seed is not None else self.rng
        items = self._items
        idx = rng.integers(0, len(items), size=batch_size)
        return [items[i] for i in idx]

    def relabel(self, batch: list, rewards) -> list:
        return relabel(batch, rewards, buffer=self)


def relabel(batch: list, rewards, buffer: ReplayBuffer | None = None) -> list:
    """Overwrite each transition's reward slot in place; other fields untouched."""
    if buffer is not None and buffer.write_once:
        raise UsageError("expert buffer is write-once; its rewards are never relabeled")
    rewards = list(rewards)
    if len(rewards) != len(batch):
        raise UsageError(f"{len(rewards)} rewards for a batch of {len(batch)}")
    for t, r in zip(batch, rewards):
        t.reward = float(r)
    return batch


def stack(batch: list):
    """Columns of a transition list as arrays: states, actions, next_states, behavior_logp."""
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=int)
    next_states = np.stack([t.next_state for t in batch])
    logp = np.array([t.behavior_logp for t in batch])
    return states, actions, next_states, logp


def expert_buffer(trajectories, seed: int = 0, state_dim: int | None = None) -> ReplayBuffer:
    buf = ReplayBuffer(capacity=None, seed=seed, state_dim=state_dim, write_once=True)
    for traj in trajectories:
        buf.push_trajectory(traj)
    return buf


__all__ = ["ReplayBuffer", "Transition", "relabel", "stack", "expert_buffer"]
