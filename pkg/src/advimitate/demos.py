"""Expert policies and demonstration sets (the expert buffer's contents)."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import CompatibilityError, FormatError, UsageError
from .envs import Env, SignalQueueWorld, Trajectory, Transition, wrap_absorbing

DEMO_MAGIC = b"ADVIMITATE-DEMO-1\n"


class UnsupportedError(UsageError):
    """The environment cannot provide what the operation needs."""


@dataclass
class TabularMDP:
    """Explicit finite MDP: P[s, a, s'], expected reward R[s, a], terminal mask."""

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray

    def tabular(self):
        return self.P, self.R, self.terminal


@dataclass
class TabularPolicy:
    q_values: np.ndarray
    epsilon: float = 0.0
    values: np.ndarray = None
    residual: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise UsageError("epsilon must lie in [0, 1]")

    @property
    def n_actions(self):
        return self.q_values.shape[1]

    def greedy_action(self, sid: int) -> int:
        return int(np.argmax(self.q_values[sid]))

    def probs(self, sid: int) -> np.ndarray:
        p = np.full(self.n_actions, self.epsilon / self.n_actions)
        p[self.greedy_action(sid)] += 1.0 - self.epsilon
        return p

    def with_epsilon(self, epsilon: float) -> "TabularPolicy":
        return TabularPolicy(self.q_values, epsilon, self.values, self.residual)


def value_iteration(env, gamma: float | None = None, tol: float = 1e-10,
                    max_iter: int = 100_000) -> TabularPolicy:
    """Q-value iteration until the Bellman residual drops below ``tol``.

    Terminal states are worth 0 (the episode ends on entering them).
    """
    if not hasattr(env, "tabular"):
        raise UnsupportedError(f"{type(env).__name__} does not enumerate its transitions")
    if gamma is None:
        gamma = env.spec.gamma
    if not 0.0 < gamma < 1.0:
        raise UsageError("gamma must lie in (0, 1)")
    if tol <= 0:
        raise UsageError("tol must be > 0")
    P, R, terminal = env.tabular()
    keep = ~np.asarray(terminal, dtype=bool)
    V = np.zeros(P.shape[0])
    for _ in range(max_iter):
        Q = R + gamma * P @ V
        V_new = np.where(keep, Q.max(axis=1), 0.0)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual < tol:
            break
    Q = R + gamma * P @ V
    Q[~keep] = 0.0
    V_next = np.where(keep, Q.max(axis=1), 0.0)
    res = float(np.max(np.abs((R + gamma * P @ V_next)[keep] - Q[keep]))) if keep.any() else 0.0
    return TabularPolicy(Q, 0.0, np.where(keep, Q.max(axis=1), 0.0), res)


def episode_seeds(seed: int, n: int) -> list[int]:
    """Independent per-episode seeds so paired runs see the same env noise."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


class LongestQueueExpert:
    """Heuristic expert for the signal world (it has no tabular model)."""

    def __init__(self, epsilon: float = 0.0):
        self.epsilon = epsilon


def _expert_step(policy, env, state, rng):
    """(action, behavior log-prob) for a tabular or queue expert."""
    if isinstance(policy, TabularPolicy):
        p = policy.probs(env.state_id(state))
    elif isinstance(policy, LongestQueueExpert):
        n = env.n_queues
        p = np.full(n, policy.epsilon / n)
        p[int(np.argmax(env.queue_lengths))] += 1.0 - policy.epsilon
    else:
        raise UsageError(f"unsupported expert {type(policy).__name__}")
    if p.max() >= 1.0:
        a = int(np.argmax(p))
    else:
        a = int(rng.choice(len(p), p=p))
    return a, float(np.log(p[a]))


def rollout(env: Env, choose, seed: int) -> Trajectory:
    """Run one episode; ``choose(state)`` returns (action, log-prob)."""
    s = env.reset(seed)
    traj = Trajectory()
    while True:
        a, logp = choose(s)
        res = env.step(a)
        traj.transitions.append(Transition(s, a, res.env_reward, res.next_state,
                                           behavior_logp=min(logp, 0.0), env_reward=res.env_reward,
                                           terminal=res.terminal))
        s = res.next_state
        if res.terminal or res.truncated:
            traj.terminal, traj.truncated = res.terminal, res.truncated
            return traj


@dataclass
class DemoSet:
    trajectories: list
    env_fingerprint: str
    mean_return: float
    state_dim: int
    n_actions: int
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, DemoSet):
            return NotImplemented
        if (self.env_fingerprint, self.mean_return, self.state_dim, self.n_actions) != (
                other.env_fingerprint, other.mean_return, other.state_dim, other.n_actions):
            return False
        if len(self.trajectories) != len(other.trajectories):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if (a.terminal, a.truncated, len(a)) != (b.terminal, b.truncated, len(b)):
                return False
            if not all(x.same_as(y) for x, y in zip(a, b)):
                return False
        return True

    def bind(self, env: Env) -> "DemoSet":
        """Check these demos belong to ``env``; returns self."""
        if self.state_dim != env.spec.state_dim or self.n_actions != env.spec.n_actions:
            raise CompatibilityError(
                f"demos have state_dim={self.state_dim}, n_actions={self.n_actions}; "
                f"environment has {env.spec.state_dim}, {env.spec.n_actions}")
        if self.env_fingerprint != env.spec.fingerprint():
            raise CompatibilityError("demo fingerprint does not match the environment")
        return self


def generate_demos(policy, env: Env, n_episodes: int = 100, seed: int = 0) -> DemoSet:
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    seeds = episode_seeds(seed, n_episodes)
    act_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    trajs = []
    for s in seeds:
        raw = rollout(env, lambda st: _expert_step(policy, env, st, act_rng), s)
        trajs.append(wrap_absorbing(raw, env.spec))
    mean_return = float(np.mean([t.env_return for t in trajs]))
    return DemoSet(trajs, env.spec.fingerprint(), mean_return, env.spec.state_dim,
                   env.spec.n_actions)


def expert_for(env: Env, epsilon: float = 0.0):
    """Value-iteration expert for tabular envs, longest-queue-first for the signal world."""
    if isinstance(env, SignalQueueWorld):
        return LongestQueueExpert(epsilon)
    return value_iteration(env).with_epsilon(epsilon)


# -- file format ---------------------------------------------------------
# magic | u32 len + fingerprint | u32 state_dim | u32 n_actions | f64 mean_return | u32 n_traj
# per trajectory: u32 length | u8 flags(terminal=1, truncated=2)
# per transition: f64[d] state | i32 action | f64[d] next_state | u8 flags(terminal=1,
#                 absorbing=2) | f64 behavior_logp | f64 env_reward

def save_demos(d: DemoSet, path):
    fp = d.env_fingerprint.encode()
    parts = [DEMO_MAGIC, struct.pack("<I", len(fp)), fp,
             struct.pack("<IIdI", d.state_dim, d.n_actions, d.mean_return, len(d.trajectories))]
    for traj in d.trajectories:
        parts.append(struct.pack("<IB", len(traj), int(traj.terminal) | 2 * int(traj.truncated)))
        for t in traj:
            parts.append(np.asarray(t.state, dtype="<f8").tobytes())
            parts.append(struct.pack("<i", t.action))
            parts.append(np.asarray(t.next_state, dtype="<f8").tobytes())
            parts.append(struct.pack("<Bdd", int(t.terminal) | 2 * int(t.absorbing),
                                     t.behavior_logp, t.env_reward))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_demos(path, env: Env | None = None) -> DemoSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(DEMO_MAGIC):
        raise FormatError(f"{path}: missing {DEMO_MAGIC.strip().decode()} header")
    pos = len(DEMO_MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated demo file")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    def read_vec(d):
        nonlocal pos
        if pos + 8 * d > len(raw):
            raise FormatError(f"{path}: truncated demo file")
        v = np.frombuffer(raw, "<f8", d, pos).astype(float)
        pos += 8 * d
        return v

    (n_fp,) = read("<I")
    if pos + n_fp > len(raw):
        raise FormatError(f"{path}: truncated demo file")
    fp = raw[pos:pos + n_fp].decode(errors="replace")
    pos += n_fp
    state_dim, n_actions, mean_return, n_traj = read("<IIdI")
    trajs = []
    for _ in range(n_traj):
        length, flags = read("<IB")
        traj = Trajectory(terminal=bool(flags & 1), truncated=bool(flags & 2), wrapped=True)
        for _ in range(length):
            s = read_vec(state_dim)
            (a,) = read("<i")
            s2 = read_vec(state_dim)
            tflags, logp, r_e = read("<Bdd")
            traj.transitions.append(Transition(s, a, r_e, s2, absorbing=bool(tflags & 2),
                                               behavior_logp=logp, env_reward=r_e,
                                               terminal=bool(tflags & 1)))
        trajs.append(traj)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    demos = DemoSet(trajs, fp, mean_return, state_dim, n_actions)
    if env is not None:
        demos.bind(env)
    return demos
