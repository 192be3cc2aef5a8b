"""Discriminator, its gradient-penalised off-policy loss, and the learned rewards.

Orientation: D -> 1 on expert samples and D -> 0 on replay (policy) samples,
so the reward ``log D - log(1 - D)`` is high where the policy looks like the
expert. The loss minimised is the bounded cross-entropy

    -E_R[w log(1 - D)] - E_E[log D] - lam*H + gp*E_E[(|grad D| - 1)^2]

Descending on ``E_R[w log D] + E_E[log(1 - D)]`` instead would label the same
way but has its largest gradients on samples that are already classified
correctly and vanishing ones on mistakes; with overlapping inputs D then
saturates at the clamp everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Mlp, NumericalError, Tensor, UsageError
from .envs import absorbing_state
from .replay import stack

MODES = ("basic", "next_state", "shaped")


@dataclass
class RewardConfig:
    lambda_i: float = 1.0
    beta_env: float = 1.0
    gamma: float = 0.995
    mode: str = "shaped"
    absorbing_via: str = "replay"

    def __post_init__(self):
        if self.lambda_i < 0 or self.beta_env < 0:
            raise UsageError("reward.lambda_i and reward.beta_env must be >= 0")
        if self.mode not in MODES:
            raise UsageError(f"unknown reward.mode {self.mode!r}")
        if self.absorbing_via not in ("replay", "closed_form"):
            raise UsageError(f"unknown reward.absorbing_via {self.absorbing_via!r}")


@dataclass
class DiscConfig:
    hidden: int = 128
    n_hidden: int = 2
    lr: float = 0.003
    clip_eps: float = 1e-6
    gp_coef: float = 10.0
    gp_anchor: str = "expert"
    lambda_ent: float = 1e-3
    importance_weights: bool = True
    w_min: float = 0.1
    w_max: float = 10.0
    use_next_state: bool = False

    def __post_init__(self):
        if self.gp_anchor not in ("expert", "interpolate"):
            raise UsageError(f"unknown disc.gp_anchor {self.gp_anchor!r}")
        if not 0.0 < self.clip_eps < 0.5:
            raise UsageError("disc.clip_eps must lie in (0, 0.5)")
        if not 0.0 < self.w_min <= 1.0 <= self.w_max:
            raise UsageError("need disc.w_min <= 1 <= disc.w_max")


class Discriminator:
    """Sigmoid MLP on concat(state, one-hot action[, next_state]), output clamped."""

    def __init__(self, state_dim, n_actions, hidden=128, n_hidden=2, use_next_state=False,
                 clip_eps=1e-6, lr=0.003, rng=None):
        rng = rng if rng is not None else np.random.default_rng(2)
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.use_next_state = use_next_state
        self.clip_eps = clip_eps
        in_dim = state_dim + n_actions + (state_dim if use_next_state else 0)
        self.net = Mlp([in_dim] + [hidden] * n_hidden + [1], "sigmoid", rng)
        self.opt = Adam(self.net.parameters(), lr=lr)

    @classmethod
    def from_config(cls, state_dim, n_actions, cfg: DiscConfig, rng=None):
        return cls(state_dim, n_actions, cfg.hidden, cfg.n_hidden, cfg.use_next_state,
                   cfg.clip_eps, cfg.lr, rng)

    def inputs(self, states, actions, next_states=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_1d(np.asarray(actions, dtype=int))
        if states.shape[1] != self.state_dim:
            raise UsageError(f"state width {states.shape[1]} != {self.state_dim}")
        if np.any((actions < 0) | (actions >= self.n_actions)) or len(actions) != len(states):
            raise UsageError("actions must be one valid index per state")
        onehot = np.zeros((len(states), self.n_actions))
        onehot[np.arange(len(states)), actions] = 1.0
        parts = [states, onehot]
        if self.use_next_state:
            if next_states is None:
                raise UsageError("this discriminator also needs next states")
            next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
            if next_states.shape != states.shape:
                raise UsageError("next_states must match states in shape")
            parts.append(next_states)
        return np.concatenate(parts, axis=1)

    def prob(self, x) -> Tensor:
        """Clamped D on an already-encoded input batch, shape (n,)."""
        d = ad.reshape(self.net(x), (-1,))
        return ad.clip(d, self.clip_eps, 1.0 - self.clip_eps)

    def batch_inputs(self, batch) -> np.ndarray:
        states, actions, next_states, _ = stack(batch)
        return self.inputs(states, actions, next_states)


def d_value(D: Discriminator, s, a, s_next=None):
    """Clamped discriminator output; scalar for a single (s, a), else an array."""
    single = np.ndim(s) == 1
    with ad.no_grad():
        out = D.prob(D.inputs(s, a if not single else [a],
                              None if s_next is None else s_next)).data.copy()
    return float(out[0]) if single else out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def reward_basic(D: Discriminator, s, a, s_next=None):
    """log D - log(1 - D); finite because D is clamped away from 0 and 1."""
    return logit(d_value(D, s, a, s_next))


def absorbing_reward(D: Discriminator) -> float:
    s_a = absorbing_state(D.state_dim)
    return float(reward_basic(D, s_a, 0, s_a if D.use_next_state else None))


def rewards_for(D: Discriminator, batch, cfg: RewardConfig) -> np.ndarray:
    """Learned rewards for a list of transitions under ``cfg.mode``.

    basic/next_state: the plain logit, and 0 on absorbing self-loops (the
    implicit zero reward after termination).
    shaped: ``lambda_i * (logit + absorbing_term) + beta_env * r_e``. With
    ``absorbing_via='replay'`` the self-loops carry their own learned reward
    and the absorbing term is 0; with ``'closed_form'`` the terminal
    transition gets ``gamma/(1-gamma) * r(s_a, 0)`` and self-loops get 0.
    """
    if not batch:
        return np.zeros(0)
    if cfg.mode == "next_state" and not D.use_next_state:
        raise UsageError("next_state mode needs a discriminator built with use_next_state")
    r = np.asarray(reward_basic(D, *_columns(D, batch)), dtype=float)
    absorbing = np.array([t.absorbing for t in batch])
    if cfg.mode != "shaped":
        return np.where(absorbing, 0.0, r)
    if any(t.state.shape[-1] != D.state_dim for t in batch):
        raise UsageError("shaped rewards need absorbing-flagged states")
    env_r = np.array([t.env_reward for t in batch])
    if cfg.absorbing_via == "closed_form":
        ends = np.array([t.terminal and not t.absorbing for t in batch])
        tail = cfg.gamma / (1.0 - cfg.gamma) * absorbing_reward(D) if ends.any() else 0.0
        r = np.where(absorbing, 0.0, r + np.where(ends, tail, 0.0))
        return cfg.lambda_i * r + cfg.beta_env * np.where(absorbing, 0.0, env_r)
    return cfg.lambda_i * r + cfg.beta_env * env_r


def reward_shaped(D: Discriminator, transition, cfg: RewardConfig) -> float:
    if cfg.mode != "shaped":
        raise UsageError("reward_shaped needs reward.mode == 'shaped'")
    return float(rewards_for(D, [transition], cfg)[0])


def _columns(D, batch):
    states, actions, next_states, _ = stack(batch)
    return states, actions, (next_states if D.use_next_state else None)


def importance_weights(pi, batch, cfg: DiscConfig) -> np.ndarray:
    """clip(pi_theta(a|s) / pi_behavior(a|s), w_min, w_max); 1 on absorbing self-loops."""
    if not cfg.importance_weights or pi is None:
        return np.ones(len(batch))
    states, actions, _, behavior = stack(batch)
    with ad.no_grad():
        logp = pi.log_probs(states).data[np.arange(len(batch)), actions]
    w = np.clip(np.exp(logp - behavior), cfg.w_min, cfg.w_max)
    absorbing = np.array([t.absorbing for t in batch])
    return np.where(absorbing, 1.0, w)


def policy_entropy(pi, batch) -> float:
    if pi is None:
        return 0.0
    from .policy import entropy_estimate
    states = np.stack([t.state for t in batch if not t.absorbing] or [batch[0].state])
    return entropy_estimate(pi, states)


def gradient_penalty(D: Discriminator, x: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """mean((|dD/dx| - 1)^2) at the rows of ``x``; also returns the norms."""
    xt = Tensor(x, requires_grad=True)
    norms = ad.grad_norm(D.prob(xt), xt)
    return ad.mean(ad.square(ad.add(norms, -1.0))), norms.data.copy()


def disc_loss_from_inputs(D: Discriminator, x_policy, x_expert, weights, entropy_value: float,
                          cfg: DiscConfig, gp_points=None):
    """Loss node plus logging stats for pre-encoded policy/expert inputs."""
    d_pol = D.prob(x_policy)
    d_exp = D.prob(x_expert)
    # Bounded cross-entropy with expert label 1: D maximizes
    # E_R[w log(1 - D)] + E_E[log D], so we descend on its negation.
    loss = ad.neg(ad.add(ad.mean(ad.mul(ad.log(ad.add(1.0, ad.neg(d_pol))),
                                        np.asarray(weights, dtype=float))),
                         ad.mean(ad.log(d_exp))))
    loss = ad.add(loss, -cfg.lambda_ent * entropy_value)
    norms = np.zeros(0)
    if cfg.gp_coef:
        gp, norms = gradient_penalty(D, x_expert if gp_points is None else gp_points)
        loss = ad.add(loss, ad.mul(gp, cfg.gp_coef))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError("discriminator loss is not finite")
    stats = {"disc_loss": value, "mean_D_policy": float(d_pol.data.mean()),
             "mean_D_expert": float(d_exp.data.mean()),
             "grad_norm": float(norms.mean()) if norms.size else float("nan")}
    return loss, stats


def disc_loss(D: Discriminator, policy_batch, expert_batch, pi, cfg: DiscConfig, rng=None):
    if not policy_batch or not expert_batch:
        raise UsageError("disc_loss needs non-empty policy and expert batches")
    x_pol = D.batch_inputs(policy_batch)
    x_exp = D.batch_inputs(expert_batch)
    gp_points = None
    if cfg.gp_anchor == "interpolate" and cfg.gp_coef:
        rng = rng if rng is not None else np.random.default_rng(0)
        n = min(len(x_pol), len(x_exp))
        eps = rng.random((n, 1))
        gp_points = eps * x_exp[:n] + (1.0 - eps) * x_pol[:n]
    return disc_loss_from_inputs(D, x_pol, x_exp, importance_weights(pi, policy_batch, cfg),
                                 policy_entropy(pi, policy_batch), cfg, gp_points)


def disc_step(D: Discriminator, loss: Tensor):
    D.opt.zero_grad()
    loss.backward()
    D.opt.step()


def disc_update(D: Discriminator, policy_buf, expert_buf, pi, cfg: DiscConfig, batch_size: int,
                rng) -> dict:
    """Sample B from each buffer and take one Adam step on the discriminator loss."""
    if not len(policy_buf) or not len(expert_buf):
        raise UsageError("disc_update needs both buffers non-empty")
    pol = policy_buf.sample(batch_size, seed=int(rng.integers(2**31)))
    exp_ = expert_buf.sample(batch_size, seed=int(rng.integers(2**31)))
    loss, stats = disc_loss(D, pol, exp_, pi, cfg, rng)
    disc_step(D, loss)
    return stats


def accuracy(D: Discriminator, x_policy, x_expert) -> float:
    """Fraction classified correctly with expert := D >= 0.5."""
    with ad.no_grad():
        dp = D.prob(x_policy).data
        de = D.prob(x_expert).data
    return float((np.sum(dp < 0.5) + np.sum(de >= 0.5)) / (len(dp) + len(de)))
