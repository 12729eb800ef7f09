"""Multi-updates option-critic agent over goal-conditioned inputs.

Four heads share the input ``state || goal``:

* ``theta`` - critic ``Q(s, o)``, one output per option;
* ``zeta``  - intra-option Gaussian policies, one mean vector per option and a
  free per-option ``log_std``;
* ``nu``    - termination logits, ``beta(s, o) = sigmoid``;
* ``z``     - policy over options logits, ``mu(o | s) = softmax``.

Every update has a ``*_loss`` function that returns ``(loss, grads)`` for the
head it trains, with all other quantities frozen in a :class:`Constants`
bundle. Ascent objectives are returned negated so every loss is minimised.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffnet
from .diffnet import (OptimizerState, adam_update, clip_grad_norm, gaussian_entropy,
                      gaussian_log_prob_grad, init_mlp, mlp_backward, mlp_forward, sigmoid,
                      softmax)
from .envs import extract_positions
from .errors import ContractViolation, require


@dataclass
class AgentParams:
    z: dict
    zeta: dict
    nu: dict
    theta: dict
    n_options: int
    action_dim: int
    # fixed affine map applied to every head's input: (x - offset) * scale
    input_offset: float = 0.0
    input_scale: float = 1.0

    @property
    def input_dim(self):
        return self.theta["W0"].shape[1]

    def named(self):
        out = {}
        for head in ("z", "zeta", "nu", "theta"):
            for k, v in getattr(self, head).items():
                out[f"{head}.{k}"] = v
        return out


def init_params(input_dim, action_dim, n_options, rng, hidden=64):
    require(n_options >= 1, "need at least one option")
    zeta = init_mlp(input_dim, hidden, n_options * action_dim, rng)
    zeta["log_std"] = np.zeros((n_options, action_dim))
    return AgentParams(
        z=init_mlp(input_dim, hidden, n_options, rng),
        zeta=zeta,
        nu=init_mlp(input_dim, hidden, n_options, rng),
        theta=init_mlp(input_dim, hidden, n_options, rng),
        n_options=n_options,
        action_dim=action_dim,
    )


@dataclass
class UpdateConfig:
    gamma: float = 0.98
    lr_critic: float = 1e-4
    lr_policy: float = 1e-4
    lr_termination: float = 1e-4
    lr_meta: float = 1e-4
    entropy_coef: float = 0.0
    rho_max: float = 2.0
    single_option: bool = False
    # False restores the raw one-step value estimate in the policy gradient
    advantage: bool = True
    normalize_advantage: bool = False
    # rate multiplier for the state-independent log_std of the policies
    log_std_lr_scale: float = 1.0
    max_grad_norm: Optional[float] = 5.0


@dataclass
class OptimizerStates:
    z: OptimizerState
    zeta: OptimizerState
    nu: OptimizerState
    theta: OptimizerState

    @classmethod
    def for_params(cls, params: AgentParams):
        return cls(*(OptimizerState.like(getattr(params, h)) for h in ("z", "zeta", "nu", "theta")))


# --------------------------------------------------------------------------- heads

def _forward(params, head, x):
    x = (np.asarray(x, dtype=float) - params.input_offset) * params.input_scale
    return mlp_forward(getattr(params, head), x)


def q_values(params, x):
    return _forward(params, "theta", x)[0]


def option_probs(params, x):
    return softmax(_forward(params, "z", x)[0])


def termination_probs(params, x):
    return sigmoid(_forward(params, "nu", x)[0])


def policy_means(params, x):
    """Per-option action means in (-1, 1), shape ``(..., n_options, action_dim)``."""
    y = np.tanh(_forward(params, "zeta", x)[0])
    return y.reshape(y.shape[:-1] + (params.n_options, params.action_dim))


def log_probs_all_options(params, x, actions):
    """``log pi(a_b | x_b, o)`` for every option, shape ``(B, n)``."""
    means = policy_means(params, x)
    logp, _, _ = gaussian_log_prob_grad(means, params.zeta["log_std"], actions[:, None, :])
    return logp


# --------------------------------------------------------------------------- acting

def select_option(params, s, rng):
    probs = option_probs(params, s)
    return int(rng.choice(params.n_options, p=probs))


def sample_action(params, s, o, rng):
    """Unclamped Gaussian sample from option ``o`` and its log density."""
    mean = policy_means(params, s)[o]
    log_std = params.zeta["log_std"][o]
    sample = mean + np.exp(log_std) * rng.standard_normal(params.action_dim)
    logp, _, _ = gaussian_log_prob_grad(mean, log_std, sample)
    return sample, float(logp)


def select_action(params, s, o, rng):
    """Executed action (clamped to [-1, 1]) and the pre-clamp log density."""
    require(0 <= o < params.n_options, f"option {o} out of range")
    sample, logp = sample_action(params, s, o, rng)
    return np.clip(sample, -1.0, 1.0), logp


def option_transition_prob(params, o_tilde, s, o_bar):
    """Probability that ``o_tilde`` is active at ``s`` when ``o_bar`` was running."""
    n = params.n_options
    require(0 <= o_tilde < n and 0 <= o_bar < n, "option index out of range")
    beta = termination_probs(params, s)[o_bar]
    mu = option_probs(params, s)[o_tilde]
    return (1.0 - beta) * (o_tilde == o_bar) + beta * mu


# --------------------------------------------------------------------------- batches

@dataclass
class Transition:
    state_in: np.ndarray
    option: int
    action: np.ndarray
    behavior_logp: float
    reward: float
    state_next: np.ndarray
    prev_option: int
    next_option: int
    raw_state: np.ndarray
    raw_state_next: np.ndarray
    achieved_goal: np.ndarray
    achieved_goal_next: np.ndarray
    agent_pos_next: np.ndarray
    tag: str = "real"


@dataclass
class Trajectory:
    transitions: list
    desired_goal: np.ndarray
    success: bool
    ret: float

    def __len__(self):
        return len(self.transitions)


@dataclass
class Batch:
    x: np.ndarray
    x_next: np.ndarray
    option: np.ndarray
    prev_option: np.ndarray
    next_option: np.ndarray
    action: np.ndarray
    behavior_logp: np.ndarray
    reward: np.ndarray

    def __len__(self):
        return len(self.option)

    @classmethod
    def stack(cls, transitions):
        require(len(transitions) > 0, "cannot build an empty batch")
        return cls(
            x=np.array([t.state_in for t in transitions]),
            x_next=np.array([t.state_next for t in transitions]),
            option=np.array([t.option for t in transitions], dtype=int),
            prev_option=np.array([t.prev_option for t in transitions], dtype=int),
            next_option=np.array([t.next_option for t in transitions], dtype=int),
            action=np.array([t.action for t in transitions]),
            behavior_logp=np.array([t.behavior_logp for t in transitions], dtype=float),
            reward=np.array([t.reward for t in transitions], dtype=float),
        )


def _as_batch(batch):
    if isinstance(batch, Batch):
        require(len(batch) > 0, "empty batch")
        return batch
    return Batch.stack(list(batch))


# --------------------------------------------------------------------------- frozen quantities

@dataclass
class Constants:
    """Quantities held fixed while one head is differentiated."""

    weights: Optional[np.ndarray] = None      # p(o~ | s, o_bar), (B, n)
    target: Optional[np.ndarray] = None       # (B, n)
    rho: Optional[np.ndarray] = None          # (B, n)
    q: Optional[np.ndarray] = None            # Q(s, .), (B, n)
    q_next: Optional[np.ndarray] = None       # Q(s', .), (B, n)
    v_next: Optional[np.ndarray] = None       # V(s'), (B,)
    beta_next: Optional[np.ndarray] = None    # beta(s', .), (B, n)
    extra: dict = field(default_factory=dict)


def occupancy_weights(params, batch, single_option=False):
    b = np.arange(len(batch))
    n = params.n_options
    if single_option:
        w = np.zeros((len(batch), n))
        w[b, batch.option] = 1.0
        return w
    beta = termination_probs(params, batch.x)[b, batch.prev_option]
    mu = option_probs(params, batch.x)
    w = beta[:, None] * mu
    w[b, batch.prev_option] += 1.0 - beta
    return w


def _next_values(params, batch):
    q_next = q_values(params, batch.x_next)
    mu_next = option_probs(params, batch.x_next)
    v_next = (mu_next * q_next).sum(axis=1)
    return q_next, mu_next, v_next


def td_targets(params, batch, gamma, rho_max):
    """Importance-weighted one-step targets for every option.

    Returns ``(target, rho)``, each ``(B, n)``.
    """
    q_next, _, v_next = _next_values(params, batch)
    beta_next = termination_probs(params, batch.x_next)
    u = (1.0 - beta_next) * q_next + beta_next * v_next[:, None]
    target = batch.reward[:, None] + gamma * u
    logp = log_probs_all_options(params, batch.x, batch.action)
    rho = np.exp(np.minimum(logp - batch.behavior_logp[:, None], np.log(rho_max)))
    return target, rho


def td_target(params, tr: Transition, o_tilde, gamma, rho_max):
    """Scalar form of :func:`td_targets` for one transition and option."""
    require(0.0 <= gamma < 1.0, "gamma must lie in [0, 1)")
    target, rho = td_targets(params, Batch.stack([tr]), gamma, rho_max)
    return float(target[0, o_tilde]), float(rho[0, o_tilde])


# --------------------------------------------------------------------------- losses

def evaluation_constants(params, batch, cfg: UpdateConfig):
    target, rho = td_targets(params, batch, cfg.gamma, cfg.rho_max)
    return Constants(weights=occupancy_weights(params, batch, cfg.single_option),
                     target=target, rho=rho)


def evaluation_loss(params, batch, const: Constants):
    q, cache = _forward(params, "theta", batch.x)
    err = const.target - q
    coef = const.weights * const.rho
    B = len(batch)
    loss = float(0.5 * (coef * err * err).sum() / B)
    grads, _ = mlp_backward(params.theta, cache, -coef * err / B)
    return loss, grads


def improvement_constants(params, batch, cfg: UpdateConfig):
    target, _ = td_targets(params, batch, cfg.gamma, cfg.rho_max)
    if cfg.advantage:
        adv = target - q_values(params, batch.x)
    else:
        adv = target
    weights = occupancy_weights(params, batch, cfg.single_option)
    if cfg.normalize_advantage:
        total = weights.sum()
        mean = (weights * adv).sum() / total
        std = np.sqrt((weights * (adv - mean) ** 2).sum() / total)
        adv = (adv - mean) / (std + 1e-8)
    c = Constants(weights=weights, target=target)
    c.extra["adv"] = adv
    c.extra["entropy_coef"] = cfg.entropy_coef
    return c


def improvement_loss(params, batch, const: Constants):
    """Negated weighted policy-gradient-plus-entropy objective."""
    n, A = params.n_options, params.action_dim
    B = len(batch)
    y, cache = _forward(params, "zeta", batch.x)
    squashed = np.tanh(y)
    means = squashed.reshape(B, n, A)
    log_std = params.zeta["log_std"]
    logp, dmean, dlog_std = gaussian_log_prob_grad(means, log_std, batch.action[:, None, :])
    w = const.weights
    adv = const.extra["adv"]
    ent_coef = const.extra["entropy_coef"]
    entropy = gaussian_entropy(log_std)                       # (n,)
    objective = (w * (logp * adv + ent_coef * entropy[None, :])).sum() / B
    # d objective / d mean and d log_std
    g_mean = (w * adv)[:, :, None] * dmean / B                # (B, n, A)
    g_log_std = ((w * adv)[:, :, None] * dlog_std).sum(axis=0) / B
    g_log_std += ent_coef * w.sum(axis=0)[:, None] / B
    g_out = g_mean.reshape(B, n * A) * (1.0 - squashed ** 2)
    grads, _ = mlp_backward(params.zeta, cache, -g_out)
    grads["log_std"] = -g_log_std
    return -float(objective), grads


def termination_constants(params, batch, cfg: UpdateConfig):
    q_next, _, v_next = _next_values(params, batch)
    b = np.arange(len(batch))
    c = Constants(q_next=q_next, v_next=v_next)
    c.extra["adv"] = q_next[b, batch.option] - v_next
    return c


def termination_loss(params, batch, const: Constants):
    B = len(batch)
    b = np.arange(B)
    logits, cache = _forward(params, "nu", batch.x_next)
    beta = sigmoid(logits)[b, batch.option]
    adv = const.extra["adv"]
    loss = float((beta * adv).sum() / B)
    dlogits = np.zeros_like(logits)
    dlogits[b, batch.option] = beta * (1.0 - beta) * adv / B
    grads, _ = mlp_backward(params.nu, cache, dlogits)
    return loss, grads


def meta_constants(params, batch, cfg: UpdateConfig):
    b = np.arange(len(batch))
    q_next = q_values(params, batch.x_next)
    beta = termination_probs(params, batch.x_next)[b, batch.option]
    c = Constants(q_next=q_next)
    c.extra["scale"] = beta * q_next[b, batch.next_option]
    return c


def meta_policy_loss(params, batch, const: Constants):
    """Negated ``beta * mu(o_next | s') * Q(s', o_next)``, probability-gradient form."""
    B = len(batch)
    b = np.arange(B)
    logits, cache = _forward(params, "z", batch.x_next)
    mu = softmax(logits)
    picked = mu[b, batch.next_option]
    scale = const.extra["scale"]
    objective = float((scale * picked).sum() / B)
    onehot = np.zeros_like(mu)
    onehot[b, batch.next_option] = 1.0
    # d mu_k / d logits = mu_k (e_k - mu)
    g_logits = (scale * picked)[:, None] * (onehot - mu) / B
    grads, _ = mlp_backward(params.z, cache, -g_logits)
    return -objective, grads


# --------------------------------------------------------------------------- updates

def _apply(params, head, grads, opt_state, lr, max_norm, lr_scale=None):
    grads, _ = clip_grad_norm(grads, max_norm)
    new, _ = adam_update(getattr(params, head), grads, opt_state, lr, lr_scale)
    return replace(params, **{head: new})


def evaluation_step(params, opt_states: OptimizerStates, batch, cfg: UpdateConfig):
    batch = _as_batch(batch)
    const = evaluation_constants(params, batch, cfg)
    _, grads = evaluation_loss(params, batch, const)
    return _apply(params, "theta", grads, opt_states.theta, cfg.lr_critic, cfg.max_grad_norm)


def improvement_step(params, opt_states: OptimizerStates, batch, cfg: UpdateConfig):
    batch = _as_batch(batch)
    const = improvement_constants(params, batch, cfg)
    _, grads = improvement_loss(params, batch, const)
    return _apply(params, "zeta", grads, opt_states.zeta, cfg.lr_policy, cfg.max_grad_norm,
                  {"log_std": cfg.log_std_lr_scale})


def termination_update(params, opt_states: OptimizerStates, batch, cfg: UpdateConfig):
    batch = _as_batch(batch)
    const = termination_constants(params, batch, cfg)
    _, grads = termination_loss(params, batch, const)
    return _apply(params, "nu", grads, opt_states.nu, cfg.lr_termination, cfg.max_grad_norm)


def meta_policy_update(params, opt_states: OptimizerStates, batch, cfg: UpdateConfig):
    batch = _as_batch(batch)
    const = meta_constants(params, batch, cfg)
    _, grads = meta_policy_loss(params, batch, const)
    return _apply(params, "z", grads, opt_states.z, cfg.lr_meta, cfg.max_grad_norm)


def train_minibatch(params, opt_states, batch, cfg: UpdateConfig):
    """Evaluation, improvement, termination, then policy-over-options."""
    batch = _as_batch(batch)
    params = evaluation_step(params, opt_states, batch, cfg)
    params = improvement_step(params, opt_states, batch, cfg)
    params = termination_update(params, opt_states, batch, cfg)
    params = meta_policy_update(params, opt_states, batch, cfg)
    return params


# --------------------------------------------------------------------------- collection

def goal_input(obs):
    return np.concatenate([obs.state, obs.desired_goal])


def run_episode(params, env, rng):
    desc = env.desc
    obs = env.reset()
    x = goal_input(obs)
    option = select_option(params, x, rng)
    prev = option
    transitions = []
    ret = 0.0
    success = False
    for t in range(desc.horizon):
        action, logp = sample_action(params, x, option, rng)
        res = env.step(action)
        nobs = res.observation
        x_next = goal_input(nobs)
        if t == desc.horizon - 1:
            next_option = select_option(params, x_next, rng)
        elif rng.random() < termination_probs(params, x_next)[option]:
            next_option = select_option(params, x_next, rng)
        else:
            next_option = option
        agent_next, _ = extract_positions(nobs.state, desc)
        transitions.append(Transition(
            state_in=x, option=option, action=action, behavior_logp=logp,
            reward=res.reward, state_next=x_next, prev_option=prev,
            next_option=next_option, raw_state=obs.state, raw_state_next=nobs.state,
            achieved_goal=obs.achieved_goal, achieved_goal_next=nobs.achieved_goal,
            agent_pos_next=agent_next,
        ))
        ret += res.reward
        success = res.is_success
        prev, option = option, next_option
        obs, x = nobs, x_next
    return Trajectory(transitions, obs.desired_goal.copy(), success, ret)


def collect_iteration(params, env, rng, steps_per_iteration):
    horizon = env.desc.horizon
    if steps_per_iteration % horizon:
        raise ContractViolation(
            f"steps_per_iteration={steps_per_iteration} is not a multiple of horizon={horizon}")
    return [run_episode(params, env, rng) for _ in range(steps_per_iteration // horizon)]


def params_from_named(named, n_options, action_dim):
    heads = {"z": {}, "zeta": {}, "nu": {}, "theta": {}}
    for key, arr in named.items():
        head, name = key.split(".", 1)
        heads[head][name] = arr
    return AgentParams(n_options=n_options, action_dim=action_dim, **heads)


def save_params(params: AgentParams, path):
    diffnet.write_params(path, params.named())
