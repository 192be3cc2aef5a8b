import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advimitate import autodiff as ad
from advimitate.autodiff import UsageError
from advimitate.config import load_config
from advimitate.demos import expert_for, generate_demos, save_demos, value_iteration
from advimitate.envs import GridWorld, SignalQueueWorld
from advimitate.trainer import (METRICS_HEADER, OccupancyEstimate, TrainingAborted, evaluate,
                                load_policy, occupancy, occupancy_distance, read_metrics, train)

SMALL = ["env.params={width: 4, height: 4, slip_prob: 0.1, max_steps: 30}",
         "net.actor_hidden=16", "net.actor_layers=2", "net.critic_hidden=16",
         "net.critic_layers=2", "disc.hidden=16", "train.episodes_per_iter=3",
         "train.batch_size=16", "train.checkpoint_every=1"]


def small_cfg(tmp_path, *extra, iterations=2):
    return load_config(None, SMALL + [f"train.iterations={iterations}",
                                      f"output.dir={tmp_path / 'run'}"] + list(extra))


def small_demos(n=5):
    env = GridWorld(width=4, height=4, slip_prob=0.1, max_steps=30)
    return generate_demos(expert_for(env, 0.1), env, n, seed=0)


# -- occupancy -------------------------------------------------------------------------

def est(probs, bucketing="b"):
    return OccupancyEstimate(bucketing, dict(enumerate(probs)))


def test_distance_examples():
    assert occupancy_distance(est([0.5, 0.5]), est([0.5, 0.5])) == 0.0
    assert occupancy_distance(OccupancyEstimate("b", {"x": 1.0}), OccupancyEstimate("b", {"y": 1.0})) == 1.0
    assert occupancy_distance(est([0.5, 0.5]), est([1.0, 0.0])) == pytest.approx(0.5)


def test_distance_bucketing_mismatch():
    with pytest.raises(UsageError):
        occupancy_distance(est([1.0], "a"), est([1.0], "b"))


hists = st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: est(np.array(v) / sum(v)))


@given(hists, hists, hists)
@settings(max_examples=200)
def test_distance_is_a_metric(a, b, c):
    ab = occupancy_distance(a, b)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(occupancy_distance(b, a), abs=1e-15)
    assert occupancy_distance(a, a) == 0.0
    assert ab <= occupancy_distance(a, c) + occupancy_distance(c, b) + 1e-12
    if ab == 0.0:
        assert all(abs(a.probs[k] - b.probs[k]) < 1e-12 for k in a.probs)


def test_occupancy_is_normalised():
    env = GridWorld(slip_prob=0.1)
    d = generate_demos(expert_for(env, 0.3), env, 20, seed=1)
    rho = occupancy(d.trajectories, env, env.spec.gamma)
    assert all(v >= 0 for v in rho.probs.values())
    assert rho.total() == pytest.approx(1.0, abs=1e-6)
    assert all(k[0] < env.n_states for k in rho.probs)  # absorbing self-loops excluded


def test_occupancy_quantised_for_queues():
    env = SignalQueueWorld(max_steps=20)
    d = generate_demos(expert_for(env, 0.1), env, 3, seed=0)
    rho = occupancy(d.trajectories, env, env.spec.gamma)
    assert rho.bucketing.startswith("quantized")
    assert rho.total() == pytest.approx(1.0, abs=1e-6)


def test_split_half_baseline():
    env = GridWorld(slip_prob=0.1)
    d = generate_demos(expert_for(env, 0.0), env, 200, seed=0)
    g = env.spec.gamma
    a = occupancy(d.trajectories[:100], env, g)
    b = occupancy(d.trajectories[100:], env, g)
    assert occupancy_distance(a, b) < 0.1


# -- evaluation -----------------------------------------------------------------------------

def test_expert_evaluation_reproduces_demo_return():
    env = GridWorld(slip_prob=0.1)
    pol = value_iteration(env)
    demos = generate_demos(pol, env, 50, seed=9)
    res = evaluate(pol, env, 50, seed=9, demos=demos)
    assert res["mean_return"] == demos.mean_return
    assert res["occupancy_distance"] == 0.0


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(UsageError):
        evaluate(value_iteration(GridWorld()), GridWorld(), 0)


# -- training loop ---------------------------------------------------------------------------

def test_one_iteration_writes_one_row(tmp_path):
    res = train(small_cfg(tmp_path, iterations=1), demos=small_demos())
    with open(res.metrics) as fh:
        lines = fh.read().splitlines()
    assert lines[0].split(",") == METRICS_HEADER
    assert len(lines) == 2
    rows = read_metrics(res.metrics)
    assert rows[0]["iteration"] == 1 and rows[0]["wall_ms"] == 0.0


def test_rows_monotone_and_checkpoint_loads(tmp_path):
    cfg = small_cfg(tmp_path, iterations=3)
    res = train(cfg, demos=small_demos())
    assert [r["iteration"] for r in read_metrics(res.metrics)] == [1, 2, 3]
    pi, meta = load_policy(res.checkpoint, res.env)
    assert meta["iteration"] == 3
    s = res.env.reset(0)
    assert np.array_equal(pi.probs(s), res.policy.probs(s))
    with pytest.raises(ad.CompatibilityError):
        load_policy(res.checkpoint, GridWorld())


def test_training_is_deterministic(tmp_path):
    demos = small_demos()
    outputs = []
    for _ in range(2):
        res = train(small_cfg(tmp_path), demos=demos)
        outputs.append((open(res.metrics, "rb").read(), open(res.checkpoint, "rb").read()))
    assert outputs[0] == outputs[1]


def test_loop_ordering(tmp_path):
    events = []
    train(small_cfg(tmp_path, iterations=2), demos=small_demos(),
          hooks=[lambda ev, **kw: events.append((kw.get("iteration", 0), ev, kw.get("source")))])
    assert events[0] == (0, "wrap", "expert")
    for it in (1, 2):
        seq = [e for i, e, _ in events if i == it]
        assert seq[0] == "wrap" and seq[1] == "push"
        last_disc = max(k for k, e in enumerate(seq) if e == "disc_update")
        first_relabel = seq.index("relabel")
        assert last_disc < first_relabel
        assert seq.count("disc_update") == 3 and seq.count("ppo_update") == 3
        for k, e in enumerate(seq):
            if e == "ppo_update":
                assert seq[k - 1] == "relabel"
        assert seq[-1] == "iteration"


def test_inner_loop_counts_configurable(tmp_path):
    events = []
    train(small_cfg(tmp_path, "train.disc_updates_per_iter=5", "train.ppo_rounds_per_iter=1",
                    iterations=1), demos=small_demos(), hooks=[lambda ev, **kw: events.append(ev)])
    assert events.count("disc_update") == 5 and events.count("ppo_update") == 1


def test_nan_abort_keeps_last_good_checkpoint(tmp_path):
    res_holder = {}

    def poison(ev, iteration=0, **kw):
        if ev == "push" and iteration == 2:
            for p in res_holder["D"].net.parameters():
                p.data[...] = np.nan

    import advimitate.trainer as tr
    orig = tr.Discriminator.from_config

    def capture(*a, **k):
        D = orig(*a, **k)
        res_holder["D"] = D
        return D

    tr.Discriminator.from_config = capture
    try:
        with pytest.raises(TrainingAborted):
            train(small_cfg(tmp_path, iterations=3), demos=small_demos(), hooks=[poison])
    finally:
        tr.Discriminator.from_config = orig
    arrays, meta = ad.load_arrays(tmp_path / "run" / "checkpoint.ckpt")
    assert meta["iteration"] == 1
    assert all(np.all(np.isfinite(v)) for v in arrays.values())
    assert len(read_metrics(tmp_path / "run" / "metrics.csv")) == 1


def test_interrupt_flushes_checkpoint(tmp_path):
    def interrupt(ev, iteration=0, **kw):
        if ev == "push" and iteration == 2:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train(small_cfg(tmp_path, "train.checkpoint_every=10", iterations=5), demos=small_demos(),
              hooks=[interrupt])
    _, meta = ad.load_arrays(tmp_path / "run" / "checkpoint.ckpt")
    assert meta["interrupted"] and meta["iteration"] == 2


def test_demo_file_must_exist(tmp_path):
    from advimitate.config import ConfigError
    with pytest.raises(ConfigError):
        train(small_cfg(tmp_path, f"demos.path={tmp_path / 'missing.bin'}"))
    assert not (tmp_path / "run").exists()


def test_demo_env_mismatch(tmp_path):
    env = GridWorld()
    save_demos(generate_demos(expert_for(env), env, 2, seed=0), tmp_path / "d.bin")
    with pytest.raises(ad.CompatibilityError):
        train(small_cfg(tmp_path, f"demos.path={tmp_path / 'd.bin'}"))


def test_signal_queue_training_runs(tmp_path):
    env = SignalQueueWorld(max_steps=15)
    demos = generate_demos(expert_for(env, 0.1), env, 3, seed=0)
    cfg = load_config(None, SMALL[1:] + ["env.name=signal_queue", "env.params={max_steps: 15}",
                                         "train.iterations=1", f"output.dir={tmp_path}"])
    res = train(cfg, demos=demos)
    assert len(res.rows) == 1 and np.isfinite(res.rows[0].occupancy_distance)
