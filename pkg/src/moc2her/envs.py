"""Goal-conditioned sparse-reward point environments.

Two kinematic analogs of the Fetch tasks live here: ``point-reach`` (move the
agent onto the goal) and ``point-push`` (move an object onto the goal by
carrying it in contact). Both share the multi-goal observation layout used by
hindsight relabeling: an environment state plus an achieved goal and a desired
goal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation, require

WORKSPACE_LOW = 0.0
WORKSPACE_HIGH = 1.0


@dataclass(frozen=True)
class GoalObservation:
    state: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray


@dataclass(frozen=True)
class EnvDescriptor:
    state_dim: int
    goal_dim: int
    action_dim: int
    has_object: bool
    agent_pos_indices: tuple[int, int]
    object_pos_indices: Optional[tuple[int, int]]
    epsilon_reward: float
    epsilon_success: float
    horizon: int

    def __post_init__(self):
        require((self.object_pos_indices is not None) == self.has_object,
                "object_pos_indices must be set iff has_object")
        require(self.epsilon_reward > 0, "epsilon_reward must be positive")
        require(self.epsilon_success >= self.epsilon_reward,
                "epsilon_success must be >= epsilon_reward")
        require(self.horizon > 0, "horizon must be positive")
        ranges = [self.agent_pos_indices]
        if self.object_pos_indices is not None:
            ranges.append(self.object_pos_indices)
        for lo, hi in ranges:
            require(0 <= lo < hi <= self.state_dim, f"index range {(lo, hi)} outside state")
        if len(ranges) == 2:
            (a0, a1), (b0, b1) = ranges
            require(a1 <= b0 or b1 <= a0, "agent and object index ranges overlap")


@dataclass(frozen=True)
class StepResult:
    observation: GoalObservation
    reward: float
    is_success: bool
    done: bool


def compute_sparse_reward(achieved, desired, epsilon):
    """0.0 when ``achieved`` lies strictly within ``epsilon`` of ``desired``, else -1.0."""
    if not isinstance(achieved, np.ndarray):
        achieved = np.asarray(achieved, dtype=float)
    if not isinstance(desired, np.ndarray):
        desired = np.asarray(desired, dtype=float)
    if achieved.shape != desired.shape:
        raise ContractViolation(
            f"goal length mismatch: {achieved.shape} vs {desired.shape}")
    require(epsilon > 0, "epsilon must be positive")
    d = achieved - desired
    return 0.0 if math.sqrt(float(d @ d)) < epsilon else -1.0


def extract_positions(state, desc: EnvDescriptor):
    state = np.asarray(state, dtype=float)
    if state.shape != (desc.state_dim,):
        raise ContractViolation(
            f"state has shape {state.shape}, descriptor expects ({desc.state_dim},)")
    lo, hi = desc.agent_pos_indices
    agent = state[lo:hi].copy()
    if not desc.has_object:
        return agent, None
    lo, hi = desc.object_pos_indices
    return agent, state[lo:hi].copy()


def substitute_object_position(state, new_pos, desc: EnvDescriptor):
    """Copy of ``state`` with the object slice overwritten by ``new_pos``.

    Only the object slice is touched; derived features such as the
    agent-object offset keep their logged values.
    """
    if not desc.has_object:
        raise ContractViolation("environment has no object to substitute")
    out = np.array(state, dtype=float, copy=True)
    lo, hi = desc.object_pos_indices
    new_pos = np.asarray(new_pos, dtype=float)
    require(new_pos.shape == (hi - lo,), "new object position has wrong length")
    out[lo:hi] = new_pos
    return out


class PointEnv:
    """Shared point-mass kinematics on the unit square.

    Episodes run for exactly ``horizon`` steps. Stepping a finished episode
    raises :class:`ContractViolation`.
    """

    env_id = ""

    def __init__(self, seed=None, step_size=0.05, horizon=50, epsilon_reward=0.05,
                 epsilon_success=0.05):
        self.step_size = step_size
        self.rng = np.random.default_rng(seed)
        self.desc = self._make_descriptor(horizon, epsilon_reward, epsilon_success)
        self.agent = np.zeros(2)
        self.goal = np.zeros(2)
        self.t = horizon  # must reset before stepping

    def _make_descriptor(self, horizon, eps_r, eps_s) -> EnvDescriptor:
        raise NotImplementedError

    def _uniform_point(self):
        return self.rng.uniform(WORKSPACE_LOW, WORKSPACE_HIGH, size=2)

    def reset(self) -> GoalObservation:
        self.agent = self._uniform_point()
        self.goal = self._uniform_point()
        self.t = 0
        self._reset_extra()
        return self.observe()

    def _reset_extra(self):
        pass

    def observe(self) -> GoalObservation:
        raise NotImplementedError

    def _move_agent(self, action):
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        require(action.shape == (self.desc.action_dim,), "action has wrong length")
        new = np.clip(self.agent + self.step_size * action, WORKSPACE_LOW, WORKSPACE_HIGH)
        disp = new - self.agent
        return action, disp

    def step(self, action) -> StepResult:
        if self.t >= self.desc.horizon:
            raise ContractViolation("episode is past its horizon; call reset()")
        self._apply(action)
        self.t += 1
        obs = self.observe()
        reward = compute_sparse_reward(obs.achieved_goal, obs.desired_goal,
                                       self.desc.epsilon_reward)
        dist = np.linalg.norm(obs.achieved_goal - obs.desired_goal)
        return StepResult(obs, reward, bool(dist < self.desc.epsilon_success),
                          self.t == self.desc.horizon)

    def _apply(self, action):
        raise NotImplementedError


class PointReachEnv(PointEnv):
    """State: ``[agent_x, agent_y, last_action_x, last_action_y]``."""

    env_id = "point-reach"

    def _make_descriptor(self, horizon, eps_r, eps_s):
        return EnvDescriptor(state_dim=4, goal_dim=2, action_dim=2, has_object=False,
                             agent_pos_indices=(0, 2), object_pos_indices=None,
                             epsilon_reward=eps_r, epsilon_success=eps_s, horizon=horizon)

    def _reset_extra(self):
        self.last_action = np.zeros(2)

    def _apply(self, action):
        action, disp = self._move_agent(action)
        self.agent = self.agent + disp
        self.last_action = action

    def observe(self):
        state = np.concatenate([self.agent, self.last_action])
        return GoalObservation(state, self.agent.copy(), self.goal.copy())


class PointPushEnv(PointEnv):
    """State: ``[agent(2), object(2), agent - object(2)]``.

    The object start is drawn once at construction and reused by every reset.
    While the agent is within ``contact_radius`` of the object (measured before
    the move) the object takes the agent's displacement.
    """

    env_id = "point-push"

    def __init__(self, seed=None, step_size=0.05, horizon=50, epsilon_reward=0.05,
                 epsilon_success=0.07, contact_radius=0.06):
        super().__init__(seed, step_size, horizon, epsilon_reward, epsilon_success)
        self.contact_radius = contact_radius
        self.object_start = self._uniform_point()
        self.obj = self.object_start.copy()

    def _make_descriptor(self, horizon, eps_r, eps_s):
        return EnvDescriptor(state_dim=6, goal_dim=2, action_dim=2, has_object=True,
                             agent_pos_indices=(0, 2), object_pos_indices=(2, 4),
                             epsilon_reward=eps_r, epsilon_success=eps_s, horizon=horizon)

    def _reset_extra(self):
        self.obj = self.object_start.copy()

    def _apply(self, action):
        in_contact = np.linalg.norm(self.agent - self.obj) < self.contact_radius
        _, disp = self._move_agent(action)
        self.agent = self.agent + disp
        if in_contact:
            self.obj = np.clip(self.obj + disp, WORKSPACE_LOW, WORKSPACE_HIGH)

    def observe(self):
        state = np.concatenate([self.agent, self.obj, self.agent - self.obj])
        return GoalObservation(state, self.obj.copy(), self.goal.copy())


ENVIRONMENTS = {
    PointReachEnv.env_id: PointReachEnv,
    PointPushEnv.env_id: PointPushEnv,
}


def make_env(env_id, seed=None, **kwargs) -> PointEnv:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; "
                         f"choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed, **kwargs)
