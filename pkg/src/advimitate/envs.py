"""Episodic environments and the absorbing-state wrapper.

Observations always end with one extra column, the absorbing flag, which is
0 for every state an environment emits and 1 only for the canonical
absorbing state appended by :func:`wrap_absorbing`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import UsageError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    n_actions: int
    max_steps: int
    gamma: float = 0.995
    params: tuple = ()

    def __post_init__(self):
        if self.n_actions < 2:
            raise UsageError("need at least two actions")
        if self.max_steps < 1:
            raise UsageError("max_steps must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise UsageError("gamma must lie in (0, 1)")

    def fingerprint(self) -> str:
        text = repr((self.name, self.state_dim, self.n_actions, self.max_steps, self.params))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class StepResult:
    next_state: np.ndarray
    env_reward: float
    terminal: bool
    truncated: bool


@dataclass
class Transition:
    """One step. ``reward`` is the rewritable slot; ``env_reward`` keeps r_e."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    absorbing: bool = False
    behavior_logp: float = 0.0
    env_reward: float = 0.0
    terminal: bool = False

    def same_as(self, other: "Transition", with_reward=True) -> bool:
        return (np.array_equal(self.state, other.state)
                and self.action == other.action
                and np.array_equal(self.next_state, other.next_state)
                and self.absorbing == other.absorbing
                and self.behavior_logp == other.behavior_logp
                and self.env_reward == other.env_reward
                and self.terminal == other.terminal
                and (not with_reward or self.reward == other.reward))


@dataclass
class Trajectory:
    transitions: list = field(default_factory=list)
    terminal: bool = False
    truncated: bool = False
    wrapped: bool = False

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    @property
    def env_return(self) -> float:
        return float(sum(t.env_reward for t in self.transitions if not t.absorbing))


def absorbing_state(state_dim: int) -> np.ndarray:
    s = np.zeros(state_dim)
    s[-1] = 1.0
    return s


def wrap_absorbing(traj: Trajectory, spec: EnvSpec) -> Trajectory:
    """Give every state a flag column; route true terminations into s_a.

    Truncated episodes only get the flag column. A terminated episode has its
    last next_state replaced by s_a and one (s_a, 0, ., s_a) self-loop
    appended. Applying this twice is the same as applying it once.
    """
    if not traj.transitions:
        raise UsageError("cannot wrap an empty trajectory")
    if traj.wrapped:
        return traj
    if traj.terminal and traj.truncated:
        raise UsageError("trajectory marked both terminal and truncated")
    if not (traj.terminal or traj.truncated):
        raise UsageError("trajectory has not ended")

    def flagged(s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1] == spec.state_dim - 1:
            return np.append(s, 0.0)
        if s.shape[-1] != spec.state_dim:
            raise UsageError(f"state width {s.shape[-1]} does not fit state_dim {spec.state_dim}")
        return s.copy()

    out = [replace(t, state=flagged(t.state), next_state=flagged(t.next_state))
           for t in traj.transitions]
    if traj.terminal:
        s_a = absorbing_state(spec.state_dim)
        out[-1].next_state = s_a.copy()
        out[-1].terminal = True
        out.append(Transition(s_a.copy(), 0, 0.0, s_a.copy(), absorbing=True,
                              behavior_logp=0.0, env_reward=0.0, terminal=True))
    return Trajectory(out, traj.terminal, traj.truncated, wrapped=True)


class Env:
    """Common episode bookkeeping; subclasses implement ``_reset``/``_step``."""

    spec: EnvSpec

    def __init__(self):
        self._t = 0
        self._done = True
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._t = 0
        self._done = False
        return self._reset()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset()")
        if not 0 <= int(action) < self.spec.n_actions:
            raise UsageError(f"action {action} outside [0, {self.spec.n_actions})")
        next_state, r, terminal = self._step(int(action))
        self._t += 1
        truncated = (not terminal) and self._t >= self.spec.max_steps
        self._done = terminal or truncated
        return StepResult(next_state, float(r), bool(terminal), bool(truncated))


# -- GridWorld -----------------------------------------------------------

MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # up, right, down, left as (dx, dy)
GOAL_REWARD = 1.0
PIT_REWARD = -1.0
STEP_REWARD = -0.01


class GridWorld(Env):
    """Tabular grid with a goal, walls/obstacles, optional pits and slip noise.

    Cells are indexed ``y * width + x``; the agent starts at ``start``.
    Entering the goal pays +1 and ends the episode, entering a pit pays -1
    and ends it, every other step costs 0.01. With probability ``slip_prob``
    the chosen move is replaced by one of its two perpendicular moves.
    """

    def __init__(self, width=8, height=8, goal=None, obstacles=(), pits=(),
                 slip_prob=0.0, max_steps=100, gamma=0.995, start=(0, 0)):
        super().__init__()
        self.width, self.height = int(width), int(height)
        self.goal = tuple(goal) if goal is not None else (self.width - 1, self.height - 1)
        self.obstacles = frozenset(tuple(c) for c in obstacles)
        self.pits = frozenset(tuple(c) for c in pits)
        self.start = tuple(start)
        self.slip_prob = float(slip_prob)
        if self.goal in self.obstacles or self.goal in self.pits:
            raise UsageError("goal cell cannot be an obstacle or pit")
        if self.start in self.obstacles or self.start in self.pits or self.start == self.goal:
            raise UsageError("start cell must be free")
        for c in (self.goal, self.start, *self.obstacles, *self.pits):
            if not self._inside(c):
                raise UsageError(f"cell {c} lies outside the grid")
        if not 0.0 <= self.slip_prob < 1.0:
            raise UsageError("slip_prob must lie in [0, 1)")
        self.n_states = self.width * self.height
        params = (("width", self.width), ("height", self.height), ("goal", self.goal),
                  ("obstacles", tuple(sorted(self.obstacles))), ("pits", tuple(sorted(self.pits))),
                  ("slip_prob", self.slip_prob), ("start", self.start))
        self.spec = EnvSpec("gridworld", self.n_states + 1, 4, int(max_steps), gamma, params)
        self.pos = self.start

    def _inside(self, c):
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def cell_index(self, c) -> int:
        return c[1] * self.width + c[0]

    def index_cell(self, i: int):
        return (i % self.width, i // self.width)

    def observe(self, cell) -> np.ndarray:
        s = np.zeros(self.spec.state_dim)
        s[self.cell_index(cell)] = 1.0
        return s

    def state_id(self, state: np.ndarray) -> int:
        """Tabular id of an observation; the absorbing state maps to n_states."""
        if state[-1] > 0.5:
            return self.n_states
        return int(np.argmax(state[:-1]))

    def _move(self, cell, a):
        dx, dy = MOVES[a]
        nxt = (cell[0] + dx, cell[1] + dy)
        if not self._inside(nxt) or nxt in self.obstacles:
            return cell
        return nxt

    def _outcome(self, nxt):
        if nxt == self.goal:
            return GOAL_REWARD, True
        if nxt in self.pits:
            return PIT_REWARD, True
        return STEP_REWARD, False

    def _reset(self):
        self.pos = self.start
        return self.observe(self.pos)

    def _step(self, a):
        if self.slip_prob > 0 and self.rng.random() < self.slip_prob:
            a = (a + (1 if self.rng.random() < 0.5 else 3)) % 4
        self.pos = self._move(self.pos, a)
        r, terminal = self._outcome(self.pos)
        return self.observe(self.pos), r, terminal

    def is_terminal_cell(self, cell) -> bool:
        return cell == self.goal or cell in self.pits

    def tabular(self):
        """Full model: P[s, a, s'], expected reward R[s, a], terminal mask."""
        S, A = self.n_states, 4
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        terminal = np.zeros(S, dtype=bool)
        for i in range(S):
            cell = self.index_cell(i)
            if self.is_terminal_cell(cell) or cell in self.obstacles:
                terminal[i] = self.is_terminal_cell(cell)
                P[i, :, i] = 1.0
                continue
            for a in range(A):
                outcomes = [(1.0 - self.slip_prob, a)]
                if self.slip_prob > 0:
                    outcomes += [(self.slip_prob / 2, (a + 1) % 4), (self.slip_prob / 2, (a + 3) % 4)]
                for p, move in outcomes:
                    nxt = self._move(cell, move)
                    j = self.cell_index(nxt)
                    P[i, a, j] += p
                    R[i, a] += p * self._outcome(nxt)[0]
        return P, R, terminal


# -- SignalQueueWorld ----------------------------------------------------

class SignalQueueWorld(Env):
    """Single intersection: one green approach per step, seeded Bernoulli arrivals.

    Action ``a`` gives queue ``a`` the green phase. Up to ``service_rate`` cars
    leave it, then each queue gains a car with probability ``arrival_rates[q]``
    unless it is at ``capacity`` (overflow cars are turned away and never
    counted as arrived). The reward is the normalised free-flow speed
    ``1 - queued / (n_queues * capacity)`` times the cars released.
    """

    def __init__(self, n_queues=4, arrival_rates=None, service_rate=2, capacity=20,
                 max_steps=200, gamma=0.995):
        super().__init__()
        self.n_queues = int(n_queues)
        rates = arrival_rates if arrival_rates is not None else [0.3] * self.n_queues
        self.arrival_rates = np.asarray(rates, dtype=float)
        if self.arrival_rates.shape != (self.n_queues,):
            raise UsageError("need one arrival rate per queue")
        if np.any((self.arrival_rates < 0) | (self.arrival_rates > 1)):
            raise UsageError("arrival rates are per-step probabilities")
        self.service_rate = int(service_rate)
        self.capacity = int(capacity)
        params = (("n_queues", self.n_queues), ("arrival_rates", tuple(self.arrival_rates)),
                  ("service_rate", self.service_rate), ("capacity", self.capacity))
        self.spec = EnvSpec("signal_queue", 2 * self.n_queues + 1, self.n_queues,
                            int(max_steps), gamma, params)
        self.queue_lengths = np.zeros(self.n_queues, dtype=int)
        self.phase = 0
        self.last_arrived = 0
        self.last_released = 0

    def observe(self) -> np.ndarray:
        s = np.zeros(self.spec.state_dim)
        s[:self.n_queues] = self.queue_lengths / self.capacity
        s[self.n_queues + self.phase] = 1.0
        return s

    def _reset(self):
        self.queue_lengths = np.zeros(self.n_queues, dtype=int)
        self.phase = 0
        return self.observe()

    def _step(self, a):
        self.phase = a
        released = min(self.service_rate, int(self.queue_lengths[a]))
        self.queue_lengths[a] -= released
        arrivals = self.rng.random(self.n_queues) < self.arrival_rates
        admitted = arrivals & (self.queue_lengths < self.capacity)
        self.queue_lengths += admitted
        self.last_arrived = int(admitted.sum())
        self.last_released = released
        speed = 1.0 - self.queue_lengths.sum() / (self.n_queues * self.capacity)
        return self.observe(), speed * released, False

    @property
    def waiting(self) -> int:
        return int(self.queue_lengths.sum())


def round_robin(env: SignalQueueWorld, t: int) -> int:
    return t % env.n_queues


def longest_queue_first(env: SignalQueueWorld, t: int) -> int:
    return int(np.argmax(env.queue_lengths))


def total_waiting_time(env: SignalQueueWorld, controller, n_steps=1000, seed=0) -> int:
    """Sum over steps of all queue lengths while ``controller(env, t)`` picks phases."""
    env.reset(seed)
    total = 0
    for t in range(n_steps):
        if env._done:
            env.reset()
        env.step(controller(env, t))
        total += env.waiting
    return total


ENVIRONMENTS = {"gridworld": GridWorld, "signal_queue": SignalQueueWorld}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise UsageError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**params)
