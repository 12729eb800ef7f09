"""Hindsight relabeling (HER) and the dual-objective variant (2HER).

Relabeled transitions are ordinary :class:`~moc2her.agent.Transition` objects
whose ``tag`` is ``"her"`` or ``"2her"``. They keep the logged option, action,
behavior log-probability and previous option; rewards are always recomputed.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial
from typing import Optional

import numpy as np

from .agent import Transition, Trajectory
from .envs import EnvDescriptor, compute_sparse_reward, extract_positions, substitute_object_position
from .errors import require

STRATEGIES = ("final", "future", "episode")


@dataclass(frozen=True)
class HindsightConfig:
    k0: int = 4
    k_decay_interval: int = 10 ** 9
    c_r: float = 0.8
    delta_displacement: float = 1e-3
    disable_2her_at: Optional[int] = None
    strategy: str = "future"
    # emit goal-relabeled and object-substituted transitions as two sets
    separate_sets: bool = False
    # also overwrite the object slice of the start state (not only the next state)
    substitute_state_in: bool = False

    def __post_init__(self):
        require(self.k0 >= 0, "k0 must be >= 0")
        require(self.k_decay_interval >= 1, "k_decay_interval must be >= 1")
        require(0.0 <= self.c_r <= 1.0, "c_r must lie in [0, 1]")
        require(self.delta_displacement >= 0, "delta_displacement must be >= 0")
        require(self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}")


def sparse_reward_fn(desc: EnvDescriptor):
    return partial(compute_sparse_reward, epsilon=desc.epsilon_reward)


def k_schedule(iteration, cfg: HindsightConfig):
    require(iteration >= 0, "iteration must be >= 0")
    return max(0, cfg.k0 - iteration // cfg.k_decay_interval)


def her_active_variant(variant, iteration, cfg: HindsightConfig):
    """Relabeling actually applied at ``iteration``: ``none``, ``her`` or ``2her``."""
    if variant == "2her" and cfg.disable_2her_at is not None and iteration >= cfg.disable_2her_at:
        return "her"
    return variant


def displacement_filter(traj: Trajectory, delta, desc: EnvDescriptor):
    if not desc.has_object:
        return True
    _, start = extract_positions(traj.transitions[0].raw_state, desc)
    _, end = extract_positions(traj.transitions[-1].raw_state_next, desc)
    return bool(np.linalg.norm(end - start) > delta)


def sample_future_indices(t, T, k, rng):
    """``k`` state indices drawn uniformly, with replacement, from ``t+1 .. T``."""
    require(0 <= t < T, f"step {t} outside trajectory of length {T}")
    if k == 0:
        return []
    return [int(j) for j in rng.integers(t + 1, T + 1, size=k)]


def sample_indices(t, T, k, rng, strategy="future"):
    if strategy == "future":
        return sample_future_indices(t, T, k, rng)
    require(0 <= t < T, f"step {t} outside trajectory of length {T}")
    if k == 0:
        return []
    if strategy == "final":
        return [T] * k
    return [int(j) for j in rng.integers(0, T + 1, size=k)]


def achieved_goal_at(traj: Trajectory, j):
    """Achieved goal of state ``s_j`` (``s_0`` is the episode start)."""
    if j == 0:
        return traj.transitions[0].achieved_goal
    return traj.transitions[j - 1].achieved_goal_next


def agent_pos_at(traj: Trajectory, j, desc):
    if j == 0:
        return extract_positions(traj.transitions[0].raw_state, desc)[0]
    return traj.transitions[j - 1].agent_pos_next


def _with_goal(tr: Transition, goal, reward, tag, state_in=None, state_next=None):
    s_in = tr.raw_state if state_in is None else state_in
    s_next = tr.raw_state_next if state_next is None else state_next
    return replace(
        tr,
        state_in=np.concatenate([s_in, goal]),
        state_next=np.concatenate([s_next, goal]),
        reward=float(reward),
        tag=tag,
    )


def relabel_her(traj: Trajectory, cfg: HindsightConfig, k, reward_fn, desc, rng):
    out = []
    T = len(traj)
    for t, tr in enumerate(traj.transitions):
        for j in sample_indices(t, T, k, rng, cfg.strategy):
            goal = achieved_goal_at(traj, j)
            out.append(_with_goal(tr, goal, reward_fn(tr.achieved_goal_next, goal), "her"))
    return out


def dual_reward(r_goal, r_obj, c_r):
    return (1.0 - c_r) * r_goal + c_r * r_obj


def relabel_2her(traj: Trajectory, cfg: HindsightConfig, k, reward_fn, desc, rng):
    """Goal relabeling plus a future agent position substituted as the object.

    Without an object this is exactly :func:`relabel_her`, rng draws included.
    """
    if not desc.has_object:
        return relabel_her(traj, cfg, k, reward_fn, desc, rng)
    out = []
    T = len(traj)
    for t, tr in enumerate(traj.transitions):
        goal_idx = sample_indices(t, T, k, rng, cfg.strategy)
        agent_idx = sample_indices(t, T, k, rng, cfg.strategy)
        for j, jp in zip(goal_idx, agent_idx):
            goal = achieved_goal_at(traj, j)
            fake_obj = agent_pos_at(traj, jp, desc)
            r_goal = reward_fn(tr.achieved_goal_next, goal)
            r_obj = reward_fn(tr.agent_pos_next, fake_obj)
            s_next = substitute_object_position(tr.raw_state_next, fake_obj, desc)
            s_in = None
            if cfg.substitute_state_in:
                s_in = substitute_object_position(tr.raw_state, fake_obj, desc)
            if cfg.separate_sets:
                out.append(_with_goal(tr, goal, r_goal, "her"))
                orig_goal = tr.state_in[desc.state_dim:]
                r_goal = reward_fn(tr.achieved_goal_next, orig_goal)
                out.append(_with_goal(tr, orig_goal, dual_reward(r_goal, r_obj, cfg.c_r),
                                      "2her", s_in, s_next))
            else:
                out.append(_with_goal(tr, goal, dual_reward(r_goal, r_obj, cfg.c_r),
                                      "2her", s_in, s_next))
    return out


def relabel_iteration(trajectories, cfg: HindsightConfig, variant, iteration, desc, rng,
                      reward_fn=None):
    """Filter and relabel one iteration's trajectories.

    Returns ``(relabeled, n_accepted)``.
    """
    active = her_active_variant(variant, iteration, cfg)
    k = k_schedule(iteration, cfg)
    if active == "none" or k == 0:
        return [], 0
    reward_fn = reward_fn or sparse_reward_fn(desc)
    relabel = relabel_2her if active == "2her" else relabel_her
    out, accepted = [], 0
    for traj in trajectories:
        if not displacement_filter(traj, cfg.delta_displacement, desc):
            continue
        accepted += 1
        out.extend(relabel(traj, cfg, k, reward_fn, desc, rng))
    return out, accepted


def merge_shuffle_partition(real, relabeled, minibatch_size, rng):
    require(minibatch_size >= 1, "minibatch_size must be >= 1")
    pool = list(real) + list(relabeled)
    if not pool:
        return []
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[lo:lo + minibatch_size]]
            for lo in range(0, len(pool), minibatch_size)]
