"""The adversarial imitation training loop, evaluation and occupancy diagnostics."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import CompatibilityError, NumericalError, UsageError
from .config import ConfigError, TrainConfig
from .demos import DemoSet, TabularPolicy, _expert_step, episode_seeds, load_demos, rollout
from .discriminator import Discriminator, disc_update, rewards_for
from .envs import Env, GridWorld, make_env, wrap_absorbing
from .kernels import discounted_occupancy
from .policy import Critic, Policy, ReturnScale, build_batch, ppo_update
from .replay import ReplayBuffer, expert_buffer, relabel

N_QUANT_BINS = 10


class TrainingAborted(RuntimeError):
    """A loss went non-finite; the last good checkpoint was kept."""


# -- metrics --------------------------------------------------------------

@dataclass
class MetricsRow:
    iteration: int
    mean_episode_return: float
    mean_shaped_return: float
    disc_loss: float
    mean_D_policy: float
    mean_D_expert: float
    policy_entropy: float
    value_loss: float
    clip_fraction: float
    occupancy_distance: float
    wall_ms: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- occupancy -------------------------------------------------------------

@dataclass
class OccupancyEstimate:
    """Discounted (state bucket, action) visitation frequencies, summing to 1."""

    bucketing: str
    probs: dict

    def total(self) -> float:
        return float(sum(self.probs.values()))


def bucketing_for(env: Env | None, state_dim: int) -> str:
    if isinstance(env, GridWorld):
        return f"tabular:{env.spec.fingerprint()}"
    return f"quantized:{state_dim}x{N_QUANT_BINS}"


def _bucket(env, state) -> object:
    if isinstance(env, GridWorld):
        return env.state_id(state)
    q = np.clip(np.floor(np.asarray(state) * N_QUANT_BINS), 0, N_QUANT_BINS - 1).astype(int)
    return tuple(q.tolist())


def occupancy(trajectories, env: Env | None, gamma: float, state_dim: int | None = None
              ) -> OccupancyEstimate:
    """Empirical occupancy: each visit weighted by gamma^t, absorbing self-loops skipped."""
    keys, bins, steps = {}, [], []
    for traj in trajectories:
        for t_idx, tr in enumerate(traj):
            if tr.absorbing:
                continue
            key = (_bucket(env, tr.state), int(tr.action))
            bins.append(keys.setdefault(key, len(keys)))
            steps.append(t_idx)
    if not bins:
        raise UsageError("occupancy needs at least one non-absorbing transition")
    if state_dim is None:
        state_dim = len(trajectories[0].transitions[0].state)
    hist = discounted_occupancy(np.array(bins), np.array(steps), gamma, len(keys))
    return OccupancyEstimate(bucketing_for(env, state_dim),
                             {k: float(hist[i]) for k, i in keys.items()})


def occupancy_distance(rho_a: OccupancyEstimate, rho_b: OccupancyEstimate) -> float:
    """Total-variation distance, half the L1 gap, in [0, 1]."""
    if rho_a.bucketing != rho_b.bucketing:
        raise UsageError(f"bucketing mismatch: {rho_a.bucketing} vs {rho_b.bucketing}")
    keys = set(rho_a.probs) | set(rho_b.probs)
    # sorted so the float sum does not depend on set iteration order
    gap = sum(abs(rho_a.probs.get(k, 0.0) - rho_b.probs.get(k, 0.0)) for k in sorted(keys, key=repr))
    return float(min(1.0, 0.5 * gap))


# -- checkpoints ------------------------------------------------------------

def _prefixed(prefix, state):
    return {f"{prefix}.{k}": v for k, v in state.items()}


def save_checkpoint(path, pi: Policy, critic: Critic, D: Discriminator, meta: dict):
    arrays = {**_prefixed("actor", pi.actor.state_dict()),
              **_prefixed("critic", critic.net.state_dict()),
              **_prefixed("disc", D.net.state_dict())}
    ad.save_arrays(path, arrays, meta)


def _unprefix(arrays, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


def load_policy(path, env: Env | None = None) -> tuple[Policy, dict]:
    arrays, meta = ad.load_arrays(path)
    try:
        state_dim, n_actions = int(meta["state_dim"]), int(meta["n_actions"])
        net = meta["net"]
    except KeyError as exc:
        raise ad.FormatError(f"{path}: checkpoint meta lacks {exc}") from None
    if env is not None and (state_dim, n_actions) != (env.spec.state_dim, env.spec.n_actions):
        raise CompatibilityError(
            f"checkpoint is for state_dim={state_dim}, n_actions={n_actions}; environment has "
            f"{env.spec.state_dim}, {env.spec.n_actions}")
    pi = Policy(state_dim, n_actions, net["actor_hidden"], net["actor_layers"])
    pi.actor.load_state_dict(_unprefix(arrays, "actor"))
    return pi, meta


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list
    checkpoint: str
    metrics: str
    policy: Policy
    critic: Critic
    discriminator: Discriminator
    demos: DemoSet
    env: Env


def _emit(hooks, event, **info):
    for h in hooks or ():
        h(event, **info)


def _mean(values, default=0.0):
    return float(np.mean(values)) if len(values) else default


def collect(env: Env, pi: Policy, n: int, env_rng, act_rng) -> list:
    """Sample ``n`` raw (unwrapped) episodes from the current policy."""
    seeds = env_rng.integers(0, 2**63, size=n)
    return [rollout(env, lambda s: pi.act(s, act_rng), int(s)) for s in seeds]


def train(cfg: TrainConfig, hooks=None, demos: DemoSet | None = None,
          out_dir: str | None = None) -> TrainResult:
    """Run the full loop; returns the in-memory models and output paths.

    ``hooks`` are callables ``hook(event, **info)`` fired on 'wrap', 'push',
    'disc_update', 'relabel', 'ppo_update' and 'iteration'.
    """
    env = make_env(cfg.env.name, **cfg.env.params)
    if demos is None:
        if not os.path.exists(cfg.demos.path):
            raise ConfigError(f"demo file {cfg.demos.path} does not exist")
        demos = load_demos(cfg.demos.path, env)
    else:
        demos.bind(env)
    spec = env.spec
    loop = cfg.train
    out_dir = out_dir if out_dir is not None else cfg.output.dir
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, cfg.output.checkpoint)
    metrics_path = os.path.join(out_dir, cfg.output.metrics)

    seeds = np.random.SeedSequence(loop.seed).spawn(7)
    rng_actor, rng_critic, rng_disc, env_rng, act_rng, disc_rng, ppo_rng = (
        np.random.default_rng(s) for s in seeds)
    pi = Policy(spec.state_dim, spec.n_actions, cfg.net.actor_hidden, cfg.net.actor_layers,
                cfg.ppo.lr, rng_actor)
    critic = Critic(spec.state_dim, spec.n_actions, cfg.net.critic_hidden, cfg.net.critic_layers,
                    cfg.ppo.lr, cfg.net.critic_state_action, rng_critic)
    D = Discriminator.from_config(spec.state_dim, spec.n_actions, cfg.disc, rng_disc)

    expert_trajs = [wrap_absorbing(t, spec) for t in demos.trajectories]
    _emit(hooks, "wrap", source="expert", n=len(expert_trajs))
    R_E = expert_buffer(expert_trajs, state_dim=spec.state_dim)
    R = ReplayBuffer(loop.policy_capacity, seed=loop.seed, state_dim=spec.state_dim)
    rho_expert = occupancy(expert_trajs, env, spec.gamma, spec.state_dim)

    meta = {"config": cfg.to_dict(), "env_fingerprint": spec.fingerprint(),
            "state_dim": spec.state_dim, "n_actions": spec.n_actions,
            "net": {"actor_hidden": cfg.net.actor_hidden, "actor_layers": cfg.net.actor_layers},
            "iteration": 0}
    save_checkpoint(ckpt_path, pi, critic, D, meta)

    rows = []
    fh = open(metrics_path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    iteration = 0
    scaler = ReturnScale(cfg.gae.gamma) if cfg.ppo.scale_rewards else None
    reward_scale = 1.0
    try:
        for iteration in range(1, loop.iterations + 1):
            t0 = time.perf_counter()
            raw = collect(env, pi, loop.episodes_per_iter, env_rng, act_rng)
            trajs = [wrap_absorbing(t, spec) for t in raw]
            _emit(hooks, "wrap", source="policy", n=len(trajs), iteration=iteration)
            for t in trajs:
                R.push_trajectory(t)
            _emit(hooks, "push", n=len(trajs), iteration=iteration)

            n_tau = len(trajs)
            d_stats = []
            for _ in range(loop.disc_updates_per_iter or n_tau):
                d_stats.append(disc_update(D, R, R_E, pi, cfg.disc, loop.batch_size, disc_rng))
                _emit(hooks, "disc_update", iteration=iteration)

            # Loop 2. D is frozen here, so relabeling this iteration's
            # trajectories is the same in every round; the advantages are
            # standardised over all of them and the rows are dealt into
            # |tau| random shards, round j training on shard j mod |tau|.
            # (A shard per trajectory would hand a failed episode's
            # uniformly negative advantages to one round on their own.)
            # Once a round stops the actor early on the KL limit, later
            # rounds of the iteration train the critic only.
            p_stats = []
            round_cfg = replace(cfg.ppo, normalize_advantages=False)
            n_rounds = loop.ppo_rounds_per_iter or n_tau
            n_rows = sum(len(t.transitions) for t in trajs)
            shards = np.array_split(ppo_rng.permutation(n_rows), min(n_tau, n_rows))
            actor_on = True
            for j in range(n_rounds):
                sampled = R.sample(loop.batch_size, seed=int(ppo_rng.integers(2**31)))
                R.relabel(sampled, rewards_for(D, sampled, cfg.reward))
                for t in trajs:
                    relabel(t.transitions, rewards_for(D, t.transitions, cfg.reward))
                _emit(hooks, "relabel", iteration=iteration)
                if j == 0 and scaler is not None:
                    reward_scale = scaler.update(trajs)
                batch = build_batch(trajs, critic, cfg.gae, reward_scale)
                if cfg.ppo.normalize_advantages:
                    batch = batch.normalized()
                rows_j = batch.rows(np.sort(shards[j % len(shards)]))
                p_stats.append(ppo_update(pi, critic, rows_j, round_cfg, ppo_rng, actor_on))
                actor_on = actor_on and not p_stats[-1]["early_stopped"]
                _emit(hooks, "ppo_update", iteration=iteration)

            shaped = [float(np.sum(rewards_for(D, t.transitions, cfg.reward))) for t in trajs]
            rho = occupancy(trajs, env, spec.gamma, spec.state_dim)
            wall = (time.perf_counter() - t0) * 1e3 if loop.record_wall_ms else 0.0
            row = MetricsRow(
                iteration=iteration,
                mean_episode_return=_mean([t.env_return for t in trajs]),
                mean_shaped_return=_mean(shaped),
                disc_loss=_mean([s["disc_loss"] for s in d_stats], float("nan")),
                mean_D_policy=_mean([s["mean_D_policy"] for s in d_stats], float("nan")),
                mean_D_expert=_mean([s["mean_D_expert"] for s in d_stats], float("nan")),
                policy_entropy=_mean([s["entropy"] for s in p_stats], float("nan")),
                value_loss=_mean([s["value_loss"] for s in p_stats], float("nan")),
                clip_fraction=_mean([s["clip_fraction"] for s in p_stats], float("nan")),
                occupancy_distance=occupancy_distance(rho, rho_expert),
                wall_ms=wall)
            rows.append(row)
            writer.writerow([_fmt(getattr(row, k)) for k in METRICS_HEADER])
            fh.flush()
            _emit(hooks, "iteration", iteration=iteration, row=row)
            if iteration % loop.checkpoint_every == 0 or iteration == loop.iterations:
                meta["iteration"] = iteration
                save_checkpoint(ckpt_path, pi, critic, D, meta)
    except NumericalError as exc:
        fh.close()
        raise TrainingAborted(f"iteration {iteration}: {exc}; kept checkpoint from "
                              f"iteration {meta['iteration']}") from exc
    except KeyboardInterrupt:
        meta["iteration"] = iteration
        meta["interrupted"] = True
        save_checkpoint(ckpt_path, pi, critic, D, meta)
        raise
    finally:
        if not fh.closed:
            fh.close()
    return TrainResult(rows, ckpt_path, metrics_path, pi, critic, D, demos, env)


# -- evaluation ------------------------------------------------------------------

def _chooser(source, env):
    if isinstance(source, Policy):
        return lambda s: (source.greedy(s), 0.0)
    if isinstance(source, TabularPolicy):
        greedy = source.with_epsilon(0.0)
        return lambda s: _expert_step(greedy, env, s, None)
    if callable(source):
        return source
    raise UsageError(f"cannot evaluate a {type(source).__name__}")


def evaluate(source, env: Env, n_episodes: int = 100, seed: int = 0,
             demos: DemoSet | None = None) -> dict:
    """Greedy evaluation of a policy, checkpoint path, or tabular expert.

    Episodes use the same per-episode seeds as demo generation, so a
    deterministic expert reproduces its demo returns exactly.
    """
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    if isinstance(source, (str, os.PathLike)):
        source, _ = load_policy(source, env)
    elif isinstance(source, Policy) and (source.actor.in_dim, source.n_actions) != (
            env.spec.state_dim, env.spec.n_actions):
        raise CompatibilityError("policy dimensions do not match the environment")
    choose = _chooser(source, env)
    trajs = [wrap_absorbing(rollout(env, choose, s), env.spec) for s in episode_seeds(seed, n_episodes)]
    returns = np.array([t.env_return for t in trajs])
    lengths = np.array([sum(not tr.absorbing for tr in t) for t in trajs])
    out = {"n_episodes": n_episodes, "mean_return": float(returns.mean()),
           "std_return": float(returns.std()), "mean_length": float(lengths.mean()),
           "occupancy_distance": None}
    if demos is not None:
        demos.bind(env)
        rho_d = occupancy(demos.trajectories, env, env.spec.gamma, env.spec.state_dim)
        out["occupancy_distance"] = occupancy_distance(
            occupancy(trajs, env, env.spec.gamma, env.spec.state_dim), rho_d)
    out["trajectories"] = trajs
    return out
