import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advimitate.autodiff import UsageError
from advimitate.envs import (EnvSpec, GridWorld, SignalQueueWorld, Trajectory, Transition,
                             absorbing_state, longest_queue_first, make_env, round_robin,
                             total_waiting_time, wrap_absorbing)


def run_episode(env, seed, policy_seed=0, max_len=None):
    rng = np.random.default_rng(policy_seed)
    s = env.reset(seed)
    traj = Trajectory()
    while True:
        a = int(rng.integers(env.spec.n_actions))
        res = env.step(a)
        traj.transitions.append(Transition(s, a, res.env_reward, res.next_state,
                                           env_reward=res.env_reward, terminal=res.terminal))
        s = res.next_state
        if res.terminal or res.truncated:
            traj.terminal, traj.truncated = res.terminal, res.truncated
            return traj


def test_spec_validation():
    with pytest.raises(UsageError):
        EnvSpec("x", 3, 1, 10)
    with pytest.raises(UsageError):
        EnvSpec("x", 3, 2, 0)
    with pytest.raises(UsageError):
        EnvSpec("x", 3, 2, 10, gamma=1.0)


def test_gridworld_reset():
    env = GridWorld()
    s = env.reset(0)
    assert s.shape == (65,)
    assert s[0] == 1.0 and s.sum() == 1.0 and s[-1] == 0.0
    assert env.pos == (0, 0)
    assert np.array_equal(env.reset(0), s)


def test_step_into_goal():
    env = GridWorld(slip_prob=0.0, start=(6, 7))
    env.reset(0)
    res = env.step(1)  # right
    assert res.env_reward == 1.0 and res.terminal and not res.truncated
    with pytest.raises(UsageError):
        env.step(0)


def test_step_cost_and_walls():
    env = GridWorld(slip_prob=0.0)
    env.reset(0)
    res = env.step(0)  # up from the top row: bump into the wall
    assert env.pos == (0, 0) and res.env_reward == -0.01 and not res.terminal


def test_pit_is_terminal():
    env = GridWorld(slip_prob=0.0, pits=[(1, 0)])
    env.reset(0)
    res = env.step(1)
    assert res.env_reward == -1.0 and res.terminal


def test_invalid_action():
    env = GridWorld()
    env.reset(0)
    with pytest.raises(UsageError):
        env.step(4)


def test_truncation_flag():
    env = GridWorld(slip_prob=0.0, max_steps=3)
    env.reset(0)
    results = [env.step(0) for _ in range(3)]
    assert [r.truncated for r in results] == [False, False, True]
    assert not any(r.terminal for r in results)


def test_slip_frequency():
    env = GridWorld(slip_prob=0.3, width=5, height=5, start=(2, 2), goal=(4, 4))
    moved = {"up": 0, "side": 0}
    for seed in range(3000):
        env.reset(seed)
        env.step(0)
        if env.pos == (2, 1):
            moved["up"] += 1
        else:
            assert env.pos in ((1, 2), (3, 2))
            moved["side"] += 1
    assert moved["side"] / 3000 == pytest.approx(0.3, abs=0.03)


def test_same_seed_same_episode():
    env = GridWorld(slip_prob=0.2)
    a, b = run_episode(env, 7), run_episode(env, 7)
    assert len(a) == len(b)
    assert all(x.same_as(y) for x, y in zip(a, b))


def _hit_probability(env, horizon):
    """Exact P(goal reached within horizon) for the uniform random walk."""
    P, _, _ = env.tabular()
    M = P.mean(axis=1)
    d = np.zeros(len(M))
    d[env.cell_index(env.start)] = 1.0
    for _ in range(horizon):
        d = d @ M
    return d[env.cell_index(env.goal)]


def test_random_walk_matches_exact_hitting_probability():
    env = GridWorld(slip_prob=0.0, max_steps=500)
    p = _hit_probability(env, 500)
    freq = np.mean([run_episode(env, s, policy_seed=s).terminal for s in range(1000)])
    assert abs(freq - p) < 5 * np.sqrt(p * (1 - p) / 1000)


def test_random_policy_reaches_goal_as_horizon_grows():
    # the walk needs about 1500 steps for 99% on an 8x8 grid (0.775 at 500)
    env = GridWorld(slip_prob=0.0, max_steps=2000)
    assert _hit_probability(env, 2000) > 0.998
    reached = sum(run_episode(env, s, policy_seed=s).terminal for s in range(1000))
    assert reached >= 990


def test_tabular_rows_are_distributions():
    P, R, terminal = GridWorld(slip_prob=0.1, obstacles=[(3, 3)], pits=[(5, 5)]).tabular()
    assert np.allclose(P.sum(axis=2), 1.0)
    assert terminal.sum() == 2


def test_signal_queue_reset():
    env = SignalQueueWorld(n_queues=4)
    s = env.reset(0)
    assert list(env.queue_lengths) == [0, 0, 0, 0] and env.phase == 0
    assert s.shape == (9,)


def test_signal_queue_service():
    env = SignalQueueWorld(n_queues=4, arrival_rates=[0.0] * 4, service_rate=2)
    env.reset(0)
    env.queue_lengths = np.array([3, 0, 0, 0])
    res = env.step(0)
    assert env.last_released == 2
    assert list(env.queue_lengths) == [1, 0, 0, 0]
    assert res.env_reward == pytest.approx((1 - 1 / 80) * 2)


def test_signal_queue_conservation():
    env = SignalQueueWorld(arrival_rates=[0.5, 0.3, 0.7, 0.2], capacity=5)
    env.reset(3)
    rng = np.random.default_rng(0)
    for _ in range(500):
        before = env.waiting
        env.step(int(rng.integers(4)))
        assert env.last_arrived - env.last_released == env.waiting - before
        assert np.all((env.queue_lengths >= 0) & (env.queue_lengths <= env.capacity))
        if env._done:
            env.reset()


def test_longest_queue_first_beats_round_robin():
    env = SignalQueueWorld(arrival_rates=[0.45, 0.1, 0.3, 0.05], max_steps=1000)
    lqf = total_waiting_time(env, longest_queue_first, 1000, seed=11)
    rr = total_waiting_time(env, round_robin, 1000, seed=11)
    assert lqf < rr


def test_make_env():
    assert isinstance(make_env("gridworld", width=4, height=4), GridWorld)
    with pytest.raises(UsageError):
        make_env("nope")


# -- absorbing wrap ------------------------------------------------------------

def _terminal_traj(length=3):
    env = GridWorld(slip_prob=0.0, start=(7 - length, 7), goal=(7, 7))
    s = env.reset(0)
    traj = Trajectory()
    for _ in range(length):
        res = env.step(1)
        traj.transitions.append(Transition(s, 1, res.env_reward, res.next_state,
                                           env_reward=res.env_reward, terminal=res.terminal))
        s = res.next_state
    traj.terminal = True
    return traj, env


def test_wrap_terminal_appends_self_loop():
    traj, env = _terminal_traj(3)
    w = wrap_absorbing(traj, env.spec)
    s_a = absorbing_state(env.spec.state_dim)
    assert len(w) == 4
    last = w.transitions[-1]
    assert last.absorbing and np.array_equal(last.state, s_a) and np.array_equal(last.next_state, s_a)
    assert np.array_equal(w.transitions[-2].next_state, s_a)
    assert all(t.state[-1] == 0.0 for t in w.transitions[:-1])
    assert s_a[-1] == 1.0 and s_a[:-1].sum() == 0.0


def test_wrap_truncated_only_flags():
    env = GridWorld(slip_prob=0.0, max_steps=4)
    traj = run_episode(env, 0, policy_seed=3)
    if traj.terminal:
        pytest.skip("episode happened to terminate")
    w = wrap_absorbing(traj, env.spec)
    assert len(w) == len(traj)
    assert not any(t.absorbing for t in w)


def test_wrap_adds_flag_column_to_raw_states():
    spec = EnvSpec("raw", 3, 2, 10)
    traj = Trajectory([Transition(np.array([0.5, 0.2]), 1, 0.0, np.array([0.1, 0.9]))], terminal=True)
    w = wrap_absorbing(traj, spec)
    assert w.transitions[0].state.tolist() == [0.5, 0.2, 0.0]
    assert w.transitions[-1].state.tolist() == [0.0, 0.0, 1.0]


def test_wrap_errors():
    env = GridWorld()
    with pytest.raises(UsageError):
        wrap_absorbing(Trajectory(), env.spec)
    traj, env = _terminal_traj(2)
    traj.terminal = False
    with pytest.raises(UsageError):
        wrap_absorbing(traj, env.spec)


@given(st.integers(1, 6), st.booleans())
@settings(max_examples=30, deadline=None)
def test_wrap_is_idempotent(length, terminal):
    traj, env = _terminal_traj(length)
    if not terminal:
        traj.terminal, traj.truncated = False, True
    once = wrap_absorbing(traj, env.spec)
    twice = wrap_absorbing(once, env.spec)
    assert len(once) == len(twice)
    assert all(a.same_as(b) for a, b in zip(once, twice))
