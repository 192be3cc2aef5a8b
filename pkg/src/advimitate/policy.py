"""Actor-critic networks, GAE and the PPO update (clipped or adaptive-KL)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Mlp, NumericalError, Tensor, UsageError
from .kernels import gae_advantages


@dataclass
class GaeConfig:
    gamma: float = 0.995
    lambda_g: float = 0.97

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise UsageError("gae.gamma must lie in (0, 1)")
        if not 0.0 <= self.lambda_g <= 1.0:
            raise UsageError("gae.lambda_g must lie in [0, 1]")


@dataclass
class PpoConfig:
    epsilon: float = 0.2
    epochs: int = 4
    minibatch: int = 5
    variant: str = "clip"
    beta_kl: float = 1.0
    d_target: float = 0.01
    lr: float = 0.003
    entropy_coef: float = 1e-3
    normalize_advantages: bool = True
    value_coef: float = 1.0
    target_kl: float = 0.0  # > 0: stop actor steps once KL to the behavior policy passes 1.5x this
    scale_rewards: bool = False  # divide rewards by a running std of discounted returns

    def __post_init__(self):
        if self.epsilon <= 0:
            raise UsageError("ppo.epsilon must be > 0")
        if self.target_kl < 0:
            raise UsageError("ppo.target_kl must be >= 0 (0 disables early stopping)")
        if self.epochs < 1 or self.minibatch < 1:
            raise UsageError("ppo.epochs and ppo.minibatch must be >= 1")
        if self.variant not in ("clip", "adaptive_kl"):
            raise UsageError(f"unknown ppo.variant {self.variant!r}")


class Policy:
    """Softmax actor over a discrete action set."""

    def __init__(self, state_dim, n_actions, hidden=256, n_hidden=4, lr=0.003, rng=None,
                 head_scale=0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.actor = Mlp([state_dim] + [hidden] * n_hidden + [n_actions], "softmax", rng,
                         output_scale=head_scale)
        self.opt = Adam(self.actor.parameters(), lr=lr)
        self.theta_version = 0
        self.beta_kl = None

    @property
    def n_actions(self):
        return self.actor.out_dim

    def log_probs(self, states) -> Tensor:
        return ad.log_softmax(self.actor.logits(states))

    def probs(self, states) -> np.ndarray:
        with ad.no_grad():
            return np.exp(self.log_probs(np.atleast_2d(states)).data)

    def act(self, state, rng) -> tuple[int, float]:
        """Sample an action; returns (action, log pi(action|state))."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        with ad.no_grad():
            logp = self.log_probs(np.asarray(state)[None, :]).data[0]
        p = np.exp(logp)
        a = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                    len(p) - 1))
        return a, float(logp[a])

    def greedy(self, state) -> int:
        with ad.no_grad():
            return int(np.argmax(self.actor.logits(np.asarray(state)[None, :]).data[0]))


def act(pi: Policy, state, seed) -> tuple[int, float]:
    return pi.act(state, seed)


class Critic:
    """State-value network; ``state_action=True`` feeds a one-hot action too."""

    def __init__(self, state_dim, n_actions, hidden=256, n_hidden=4, lr=0.003,
                 state_action=False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.state_action = state_action
        self.n_actions = n_actions
        in_dim = state_dim + (n_actions if state_action else 0)
        self.net = Mlp([in_dim] + [hidden] * n_hidden + [1], "identity", rng)
        self.opt = Adam(self.net.parameters(), lr=lr)

    def inputs(self, states, actions=None):
        states = np.atleast_2d(states)
        if not self.state_action:
            return states
        onehot = np.zeros((len(states), self.n_actions))
        onehot[np.arange(len(states)), np.asarray(actions, dtype=int)] = 1.0
        return np.concatenate([states, onehot], axis=1)

    def value(self, states, actions=None) -> Tensor:
        return ad.reshape(self.net(self.inputs(states, actions)), (-1,))

    def values(self, states, actions=None) -> np.ndarray:
        with ad.no_grad():
            return self.value(states, actions).data.copy()


def entropy(log_probs: Tensor) -> Tensor:
    """Mean per-row entropy -sum p log p of a batch of log-probability rows."""
    return ad.neg(ad.mean(ad.tsum(ad.mul(ad.exp(log_probs), log_probs), axis=-1)))


def entropy_estimate(pi: Policy, states) -> float:
    states = np.atleast_2d(states)
    if len(states) == 0:
        raise UsageError("entropy needs at least one state")
    with ad.no_grad():
        return max(0.0, float(entropy(pi.log_probs(states)).data))


def gae(rewards, values, cfg: GaeConfig):
    """Generalised advantage estimates and returns-to-go for one episode.

    ``values`` has one more entry than ``rewards``: the last one is the
    bootstrap value (0 when the episode ended in the absorbing state).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(rewards) + 1,):
        raise UsageError(f"need {len(rewards) + 1} values for {len(rewards)} rewards, got {values.shape}")
    adv = gae_advantages(rewards, values, cfg.gamma, cfg.lambda_g)
    return adv, adv + values[:-1]


def ppo_clip_terms(logp_new: Tensor, logp_old, advantages, epsilon: float) -> Tensor:
    ratio = ad.exp(ad.add(logp_new, -np.asarray(logp_old)))
    adv = np.asarray(advantages, dtype=float)
    return ad.minimum(ad.mul(ratio, adv), ad.mul(ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon), adv))


def ppo_clip_objective(logp_new, logp_old, advantages, epsilon: float = 0.2) -> Tensor:
    return ad.mean(ppo_clip_terms(ad.as_tensor(logp_new), logp_old, advantages, epsilon))


def categorical_kl(p_old, log_p_new: Tensor) -> Tensor:
    """Row-wise KL(p_old || p_new) with p_new given by its log."""
    p_old = np.asarray(p_old, dtype=float)
    log_old = np.log(np.clip(p_old, 1e-300, None))
    return ad.tsum(ad.mul(p_old, ad.add(log_old, ad.neg(log_p_new))), axis=-1)


def adaptive_kl_objective(logp_new, logp_old, advantages, probs_new, probs_old, beta_kl) -> Tensor:
    """mean(ratio * A) - beta * mean(KL(old || new)); ``probs_new`` is a Tensor of rows."""
    ratio = ad.exp(ad.add(ad.as_tensor(logp_new), -np.asarray(logp_old)))
    surrogate = ad.mean(ad.mul(ratio, np.asarray(advantages, dtype=float)))
    kl = ad.mean(categorical_kl(probs_old, ad.log(ad.as_tensor(probs_new))))
    return ad.add(surrogate, ad.mul(kl, -float(beta_kl)))


def beta_update(d: float, d_target: float, beta: float) -> float:
    return beta / 2.0 if d < d_target * 1.5 else beta * 2.0


@dataclass
class RolloutBatch:
    """Flattened on-policy data ready for the PPO epochs."""

    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    actor_mask: np.ndarray  # False on absorbing self-loops (no policy decision there)
    segments: np.ndarray = None  # trajectory index of each row

    def rows(self, idx) -> "RolloutBatch":
        idx = np.asarray(idx)
        return RolloutBatch(self.states[idx], self.actions[idx], self.logp_old[idx],
                            self.advantages[idx], self.returns[idx], self.actor_mask[idx],
                            None if self.segments is None else self.segments[idx])

    def normalized(self) -> "RolloutBatch":
        """Copy with advantages standardised over the actor rows."""
        adv = normalize_advantages(self.advantages, self.actor_mask)
        return RolloutBatch(self.states, self.actions, self.logp_old, adv, self.returns,
                            self.actor_mask, self.segments)


def normalize_advantages(adv, mask) -> np.ndarray:
    adv = np.array(adv, dtype=float)
    idx = np.flatnonzero(mask)
    if len(idx) > 1:
        a = adv[idx]
        adv[idx] = (a - a.mean()) / (a.std() + 1e-8)
    return adv


class ReturnScale:
    """Running standard deviation of discounted returns-to-go.

    Dividing rewards by it keeps critic targets near unit scale however
    large the learned rewards get; the estimate is an exponential moving
    average over calls to ``update``.
    """

    def __init__(self, gamma: float, decay: float = 0.9):
        self.gamma, self.decay = gamma, decay
        self.var = None

    def update(self, trajectories) -> float:
        rets = []
        for traj in trajectories:
            acc = 0.0
            for t in reversed(traj.transitions):
                acc = t.reward + self.gamma * acc
                rets.append(acc)
        var = float(np.var(rets)) if rets else 0.0
        self.var = var if self.var is None else self.decay * self.var + (1 - self.decay) * var
        return self.scale

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.var)) if self.var and self.var > 1e-12 else 1.0


def build_batch(trajectories, critic: Critic, gae_cfg: GaeConfig,
                reward_scale: float = 1.0) -> RolloutBatch:
    """Run GAE over each trajectory's current reward slots.

    Truncated episodes bootstrap from the critic and an unwrapped terminal
    transition bootstraps 0. Rewards are divided by ``reward_scale`` first,
    so the critic works in those units.
    """
    cols = {k: [] for k in ("s", "a", "lp", "adv", "ret", "m", "seg")}
    for i, traj in enumerate(trajectories):
        ts = traj.transitions
        states = np.stack([t.state for t in ts])
        actions = np.array([t.action for t in ts], dtype=int)
        v = critic.values(states, actions)
        rewards = np.array([t.reward for t in ts]) / reward_scale
        # A terminated episode ends for good unless it was routed into the
        # absorbing state. s_a loops on itself forever with a fixed reward,
        # so its value is known exactly: r(s_a) / (1 - gamma). Bootstrapping
        # the critic's own estimate there instead feeds V(s_a) back into
        # its target at gamma ~ 1, which diverges.
        last = ts[-1]
        if last.absorbing:
            boot = rewards[-1] / (1.0 - gae_cfg.gamma)
        elif traj.terminal:
            boot = 0.0
        else:
            boot = float(critic.values(last.next_state, [0])[0])
        adv, ret = gae(rewards, np.append(v, boot), gae_cfg)
        cols["s"].append(states)
        cols["a"].append(actions)
        cols["lp"].append([t.behavior_logp for t in ts])
        cols["adv"].append(adv)
        cols["ret"].append(ret)
        cols["m"].append([not t.absorbing for t in ts])
        cols["seg"].append(np.full(len(ts), i))
    cat = {k: np.concatenate([np.asarray(x) for x in v]) for k, v in cols.items()}
    return RolloutBatch(cat["s"], cat["a"], cat["lp"].astype(float), cat["adv"], cat["ret"],
                        cat["m"].astype(bool), cat["seg"].astype(int))


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} during PPO update")


def approx_kl(pi: Policy, states, actions, logp_behavior) -> float:
    """Sample estimate of KL(behavior || pi) from the actions the behavior policy took."""
    with ad.no_grad():
        logp = pi.log_probs(states).data[np.arange(len(actions)), actions]
    log_ratio = logp - logp_behavior
    # (r - 1) - log r: non-negative, unbiased, low variance
    return float(np.mean(np.expm1(log_ratio) - log_ratio))


def ppo_update(pi: Policy, critic: Critic, batch: RolloutBatch, cfg: PpoConfig, rng,
               update_actor: bool = True) -> dict:
    """Several epochs of shuffled minibatch Adam steps on actor and critic.

    The actor maximises the clipped (or KL-penalised) surrogate plus
    ``entropy_coef`` times the policy entropy; the critic minimises squared
    error to the returns-to-go. With ``target_kl > 0`` the actor skips the
    remaining steps once the estimated KL from the behavior policy, checked
    before every actor step, exceeds ``1.5 * target_kl`` (the critic keeps
    training). ``update_actor=False`` trains the critic alone.
    """
    n = len(batch.states)
    if n == 0:
        raise UsageError("empty rollout batch")
    act_idx = np.flatnonzero(batch.actor_mask)
    if cfg.normalize_advantages:
        adv = normalize_advantages(batch.advantages, batch.actor_mask)
    else:
        adv = batch.advantages.copy()
    if pi.beta_kl is None:
        pi.beta_kl = cfg.beta_kl
    probs_old = pi.probs(batch.states) if cfg.variant == "adaptive_kl" else None
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0}
    n_actor = n_critic = 0
    actor_active = update_actor
    stats["early_stopped"] = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            mb = order[lo:lo + cfg.minibatch]
            amb = mb[batch.actor_mask[mb]] if actor_active else mb[:0]
            if len(amb) and cfg.target_kl:
                kl = approx_kl(pi, batch.states[act_idx], batch.actions[act_idx],
                               batch.logp_old[act_idx])
                stats["approx_kl"] = kl
                if kl > 1.5 * cfg.target_kl:
                    actor_active, amb = False, mb[:0]
                    stats["early_stopped"] = True
            if len(amb):
                states = batch.states[amb]
                logp_all = pi.log_probs(states)
                logp = ad.take(logp_all, (np.arange(len(amb)), batch.actions[amb]))
                if cfg.variant == "clip":
                    surrogate = ppo_clip_objective(logp, batch.logp_old[amb], adv[amb], cfg.epsilon)
                else:
                    surrogate = adaptive_kl_objective(logp, batch.logp_old[amb], adv[amb],
                                                      ad.exp(logp_all), probs_old[amb], pi.beta_kl)
                objective = surrogate
                if cfg.entropy_coef:
                    objective = ad.add(objective, ad.mul(entropy(logp_all), cfg.entropy_coef))
                loss = ad.neg(objective)
                _check_finite(loss.item(), "policy loss")
                pi.opt.zero_grad()
                loss.backward()
                pi.opt.step()
                ratio = np.exp(logp.data - batch.logp_old[amb])
                stats["clip_fraction"] += float(np.mean(np.abs(ratio - 1.0) > cfg.epsilon))
                stats["policy_loss"] += loss.item()
                n_actor += 1
            v = critic.value(batch.states[mb], batch.actions[mb])
            vloss = ad.mul(ad.mean(ad.square(ad.add(v, -batch.returns[mb]))), cfg.value_coef)
            _check_finite(vloss.item(), "value loss")
            critic.opt.zero_grad()
            vloss.backward()
            critic.opt.step()
            stats["value_loss"] += vloss.item()
            n_critic += 1
    pi.theta_version += 1
    if cfg.variant == "adaptive_kl":
        with ad.no_grad():
            d = float(ad.mean(categorical_kl(probs_old, pi.log_probs(batch.states))).data)
        stats["kl"] = d
        pi.beta_kl = beta_update(d, cfg.d_target, pi.beta_kl)
    stats["policy_loss"] /= max(n_actor, 1)
    stats["clip_fraction"] /= max(n_actor, 1)
    stats["value_loss"] /= max(n_critic, 1)
    stats["entropy"] = entropy_estimate(pi, batch.states[act_idx]) if len(act_idx) else 0.0
    return stats
