"""Classic-control tasks re-implemented with Gymnasium's reference equations.

Constants and update order follow CartPole-v0, MountainCarContinuous-v0 and
Pendulum-v1. The step function is pure: all randomness lives in
:func:`env_reset`.

CartPole
    g = 9.8, cart mass 1.0, pole mass 0.1, pole half-length 0.5, force
    +-10, dt = 0.02, explicit Euler. Terminates when |theta| > 12 degrees or
    |p| > 2.4; 200-step limit; reward +1 per step.
MountainCarContinuous
    ``v' = v + 0.0015 u - 0.0025 cos(3p)`` clipped to +-0.07, ``p' = p + v'``
    clipped to [-1.2, 0.6] (velocity zeroed at the left wall). Goal
    ``p >= 0.45`` with ``v >= 0`` pays +100; each step costs ``0.1 u^2``;
    999-step limit.
Pendulum
    ``theta'' = 3g/(2l) sin(theta) + 3/(m l^2) u`` with g = 10, m = l = 1,
    dt = 0.05, torque in [-2, 2], speed clipped to [-8, 8]; velocity is
    updated first. Reward ``-(theta^2 + 0.1 thetadot^2 + 0.001 u^2)``;
    200-step limit.
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import InputError
from .policy import Task, wrap_angle

__all__ = [
    "EnvState",
    "StepResult",
    "env_reset",
    "env_step",
    "solved_threshold",
    "worst_return",
    "max_episode_steps",
    "pendulum_energy",
]

# CartPole
CP_GRAVITY = 9.8
CP_MASSCART = 1.0
CP_MASSPOLE = 0.1
CP_TOTAL_MASS = CP_MASSCART + CP_MASSPOLE
CP_LENGTH = 0.5
CP_POLEMASS_LENGTH = CP_MASSPOLE * CP_LENGTH
CP_FORCE_MAG = 10.0
CP_TAU = 0.02
CP_THETA_LIMIT = 12 * 2 * math.pi / 360
CP_X_LIMIT = 2.4

# MountainCarContinuous
MC_MIN_POSITION = -1.2
MC_MAX_POSITION = 0.6
MC_MAX_SPEED = 0.07
MC_GOAL_POSITION = 0.45
MC_GOAL_VELOCITY = 0.0
MC_POWER = 0.0015

# Pendulum
PD_MAX_SPEED = 8.0
PD_MAX_TORQUE = 2.0
PD_DT = 0.05
PD_G = 10.0
PD_M = 1.0
PD_L = 1.0

_TIME_LIMIT = {Task.CARTPOLE: 200, Task.MOUNTAINCAR: 999, Task.PENDULUM: 200}
_SOLVED = {Task.CARTPOLE: 195.0, Task.MOUNTAINCAR: 90.0, Task.PENDULUM: -200.0}
_STATE_DIM = {Task.CARTPOLE: 4, Task.MOUNTAINCAR: 2, Task.PENDULUM: 2}


@dataclass(frozen=True)
class EnvState:
    task: Task
    x: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        task = Task.parse(self.task)
        if x.size != _STATE_DIM[task]:
            raise InputError(f"{task.value} state must have {_STATE_DIM[task]} entries")
        x.setflags(write=False)
        object.__setattr__(self, "task", task)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    done_reason: str = None  # "time_limit", "state_bound" or "goal_reached"


def max_episode_steps(task):
    return _TIME_LIMIT[Task.parse(task)]


def solved_threshold(task):
    """Average return at which a task counts as solved."""
    return _SOLVED[Task.parse(task)]


def worst_return(task):
    """Lowest return an episode can record; used for aborted episodes."""
    task = Task.parse(task)
    if task is Task.CARTPOLE:
        return 0.0
    if task is Task.MOUNTAINCAR:
        return -0.1 * _TIME_LIMIT[task]
    per_step = math.pi ** 2 + 0.1 * PD_MAX_SPEED ** 2 + 0.001 * PD_MAX_TORQUE ** 2
    return -per_step * _TIME_LIMIT[task]


def env_reset(task, rng):
    """Draw an initial state.

    ``rng`` is a ``numpy.random.Generator``.
    """
    task = Task.parse(task)
    if task is Task.CARTPOLE:
        x = rng.uniform(-0.05, 0.05, size=4)
    elif task is Task.MOUNTAINCAR:
        x = np.array([rng.uniform(-0.6, -0.4), 0.0])
    else:
        x = np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])
    return EnvState(task, x, 0)


def _cartpole_step(x, action):
    if action not in (0, 1):
        raise InputError(f"cartpole action must be 0 or 1, got {action!r}")
    p, p_dot, theta, theta_dot = x
    force = CP_FORCE_MAG if action == 1 else -CP_FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + CP_POLEMASS_LENGTH * theta_dot ** 2 * sintheta) / CP_TOTAL_MASS
    thetaacc = (CP_GRAVITY * sintheta - costheta * temp) / (
        CP_LENGTH * (4.0 / 3.0 - CP_MASSPOLE * costheta ** 2 / CP_TOTAL_MASS))
    xacc = temp - CP_POLEMASS_LENGTH * thetaacc * costheta / CP_TOTAL_MASS
    p = p + CP_TAU * p_dot
    p_dot = p_dot + CP_TAU * xacc
    theta = theta + CP_TAU * theta_dot
    theta_dot = theta_dot + CP_TAU * thetaacc
    out = (p < -CP_X_LIMIT or p > CP_X_LIMIT
           or theta < -CP_THETA_LIMIT or theta > CP_THETA_LIMIT)
    return np.array([p, p_dot, theta, theta_dot]), 1.0, out, False


def _continuous_action(action, limit, task):
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.size != 1 or not np.isfinite(a[0]) or abs(a[0]) > limit:
        raise InputError(f"{task} action must be a scalar in [-{limit}, {limit}], got {action!r}")
    return float(a[0])


def _mountaincar_step(x, action):
    force = _continuous_action(action, 1.0, "mountaincar")
    position, velocity = x
    velocity += force * MC_POWER - 0.0025 * math.cos(3 * position)
    velocity = min(max(velocity, -MC_MAX_SPEED), MC_MAX_SPEED)
    position += velocity
    position = min(max(position, MC_MIN_POSITION), MC_MAX_POSITION)
    if position == MC_MIN_POSITION and velocity < 0:
        velocity = 0.0
    goal = bool(position >= MC_GOAL_POSITION and velocity >= MC_GOAL_VELOCITY)
    reward = (100.0 if goal else 0.0) - 0.1 * force ** 2
    return np.array([position, velocity]), reward, False, goal


def _pendulum_step(x, action):
    u = _continuous_action(action, PD_MAX_TORQUE, "pendulum")
    th, thdot = x
    cost = wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
    newthdot = thdot + (3 * PD_G / (2 * PD_L) * math.sin(th)
                        + 3.0 / (PD_M * PD_L ** 2) * u) * PD_DT
    newthdot = min(max(newthdot, -PD_MAX_SPEED), PD_MAX_SPEED)
    newth = wrap_angle(th + newthdot * PD_DT)
    return np.array([newth, newthdot]), -cost, False, False


_STEP = {
    Task.CARTPOLE: _cartpole_step,
    Task.MOUNTAINCAR: _mountaincar_step,
    Task.PENDULUM: _pendulum_step,
}


def env_step(state, action):
    """Advance one step under the reference dynamics.

    Raises
    ------
    InputError
        If ``action`` is not valid for the task.
    """
    x, reward, out_of_bounds, goal = _STEP[state.task](state.x, action)
    count = state.step_count + 1
    if out_of_bounds:
        reason = "state_bound"
    elif goal:
        reason = "goal_reached"
    elif count >= _TIME_LIMIT[state.task]:
        reason = "time_limit"
    else:
        reason = None
    return StepResult(EnvState(state.task, x, count), float(reward), reason is not None, reason)


def pendulum_energy(x):
    """Mechanical energy per unit inertia: ``thetadot^2/2 + 3g/(2l) cos(theta)``."""
    return 0.5 * x[1] ** 2 + 1.5 * PD_G / PD_L * math.cos(x[0])
