"""Gradient ascent on the variables of an LQR / piecewise-LQR controller.

The controller is made stochastic by adding Gaussian noise ``eps`` to the
LQR control. With ``u = F_v(x) + eps`` and ``eps ~ N(0, sigma^2 I)``, the
score of the applied control with respect to ``v`` is
``J(x)' eps / sigma^2``, where ``J = du/dv`` is obtained by differentiating
the Riccati equation. Each episode contributes one ascent step

    v <- v + eta * sum_t gamma^t (G_t - V(x_t)) J_t' eps_t / sigma^2

with ``V`` a small ReLU value network fitted to the returns-to-go.
"""

from dataclasses import dataclass, field, asdict
import logging
import time

import numpy as np
from scipy.special import log_ndtr

from .envs import env_reset, env_step, max_episode_steps, solved_threshold, worst_return
from .errors import CareError, DimensionError, EstimatorError, InputError, UpdateRejected
from .linalg import care_sensitivities, solve_care
from .policy import (
    Task, VariableVector, affine_structure, build_dynamics, map_action,
    region_decisions, select_partition, state_error,
)

__all__ = [
    "LearnerConfig",
    "ValueBaseline",
    "Rollout",
    "TrainHistory",
    "discounted_returns",
    "sample_exploratory_action",
    "action_score",
    "policy_variable_jacobian",
    "estimate_gradient",
    "advantages",
    "gradient_ascent_step",
    "update_value_baseline",
    "region_gains",
    "gains_reversed",
    "train",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters of one training run.

    ``value_scale`` divides the regression targets of the value network so
    that its outputs stay O(1); it does not change the advantages.
    With ``bootstrap_truncated`` an episode cut off by the time limit is
    credited the baseline's value of its final state instead of zero.
    With ``gain_guard`` an ascent step is refused when it would reverse the
    LQR gain of some region or leave it without a stabilizing solution.
    With ``action_score`` the estimator uses the score of the action the
    environment actually received (see :func:`action_score`) instead of
    ``eps / sigma^2``. ``gae_lambda < 1`` replaces the Monte-Carlo advantage
    by the lambda-weighted sum of temporal-difference residuals.
    """

    gamma: float = 0.99
    eta: float = 0.05
    sigma: float = 0.5
    decay: float = 0.99
    episodes: int = 500
    grad_clip: float = 5.0
    baseline_lr: float = 1e-3
    baseline_momentum: float = 0.9
    baseline_hidden: int = 128
    baseline_steps: int = 1
    value_scale: float = 1.0
    bootstrap_truncated: bool = True
    gain_guard: bool = True
    action_score: bool = True
    gae_lambda: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InputError("gamma must lie in (0, 1)")
        if not self.eta > 0.0:
            raise InputError("eta must be positive")
        if not self.sigma >= 0.0:
            raise InputError("sigma must be nonnegative")
        if not 0.0 < self.decay <= 1.0:
            raise InputError("decay must lie in (0, 1]")
        if self.episodes < 0:
            raise InputError("episodes must be nonnegative")
        if self.grad_clip < 0.0:
            raise InputError("grad_clip must be nonnegative")
        if self.baseline_steps < 0 or self.value_scale <= 0.0:
            raise InputError("invalid baseline settings")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InputError("gae_lambda must lie in [0, 1]")

    def replace(self, **changes):
        return LearnerConfig(**{**asdict(self), **changes})


# -- value baseline ---------------------------------------------------------------

class ValueBaseline:
    """Two-hidden-layer ReLU regressor trained by SGD with momentum.

    Parameters
    ----------
    state_dim : int
    hidden : int
        Width of both hidden layers.
    lr, momentum : float
        Optimizer settings.
    scale : float
        Targets are divided by ``scale`` before fitting and predictions are
        multiplied by it.
    rng : numpy.random.Generator, optional
        Source for the He-normal initialization.
    """

    def __init__(self, state_dim, hidden=128, lr=1e-3, momentum=0.9, scale=1.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [state_dim, hidden, hidden, 1]
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.params[-2] *= 0.1
        self.velocity = [np.zeros_like(p) for p in self.params]
        self.lr = lr
        self.momentum = momentum
        self.scale = float(scale)

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._forward(X)[0] * self.scale

    def _forward(self, X):
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = X @ W1 + b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ W2 + b2
        h2 = np.maximum(z2, 0.0)
        out = (h2 @ W3 + b3)[:, 0]
        return out, (X, z1, h1, z2, h2)

    def loss_and_grads(self, X, y):
        """Mean squared error on scaled targets and its parameter gradients."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1) / self.scale
        out, (X, z1, h1, z2, h2) = self._forward(X)
        W1, b1, W2, b2, W3, b3 = self.params
        diff = out - y
        loss = float(np.mean(diff ** 2))
        g_out = (2.0 / diff.size) * diff[:, None]
        gW3 = h2.T @ g_out
        gb3 = g_out.sum(axis=0)
        g_h2 = (g_out @ W3.T) * (z2 > 0)
        gW2 = h1.T @ g_h2
        gb2 = g_h2.sum(axis=0)
        g_h1 = (g_h2 @ W2.T) * (z1 > 0)
        gW1 = X.T @ g_h1
        gb1 = g_h1.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2, gW3, gb3]

    def step(self, X, y):
        """One momentum-SGD step; returns the loss before the step."""
        loss, grads = self.loss_and_grads(X, y)
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= self.lr * g
            p += v
        return loss

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size


# -- rollouts ---------------------------------------------------------------------

def discounted_returns(rewards, gamma, bootstrap=0.0):
    """Returns-to-go ``G_t = r_t + gamma G_{t+1}`` with ``G_T = bootstrap``.

    ``bootstrap`` is zero for a terminated episode; for an episode cut off by
    the time limit it stands in for the value of the state reached.
    """
    G = np.zeros(len(rewards))
    acc = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        G[t] = acc
    return G


@dataclass
class Rollout:
    """One episode of transitions.

    Per-step arrays share their leading dimension. ``returns`` holds the
    discounted returns-to-go, computed on construction when not given.
    ``truncated`` marks an episode stopped by the time limit rather than by
    reaching a terminal state; ``final_state`` is the state it stopped in and
    ``bootstrap`` the value credited after the last step. ``scores``, when
    given, holds the per-step derivative of the action log-likelihood with
    respect to the mean control; otherwise ``noises / sigma^2`` is used.
    """

    states: np.ndarray
    controls: np.ndarray
    noises: np.ndarray
    actions: list
    rewards: np.ndarray
    partitions: np.ndarray
    dones: np.ndarray
    gamma: float = 0.99
    returns: np.ndarray = None
    truncated: bool = False
    final_state: np.ndarray = None
    bootstrap: float = 0.0
    scores: np.ndarray = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.asarray(self.controls, dtype=float).reshape(len(self.states), -1)
        self.noises = np.asarray(self.noises, dtype=float).reshape(self.controls.shape)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.partitions = np.asarray(self.partitions, dtype=int).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        lengths = {len(self.states), len(self.controls), len(self.noises), len(self.actions),
                   len(self.rewards), len(self.partitions), len(self.dones)}
        if len(lengths) != 1:
            raise DimensionError(f"rollout sequences have different lengths: {sorted(lengths)}")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float).reshape(self.controls.shape)
        if self.returns is None:
            self.returns = discounted_returns(self.rewards, self.gamma, self.bootstrap)

    def with_bootstrap(self, value):
        """Set the terminal value and recompute the returns-to-go."""
        self.bootstrap = float(value)
        self.returns = discounted_returns(self.rewards, self.gamma, self.bootstrap)
        return self

    def __len__(self):
        return len(self.rewards)

    @property
    def episode_return(self):
        return float(np.sum(self.rewards))


def sample_exploratory_action(mean, sigma, rng):
    """Gaussian exploration around ``mean``; returns ``(u, eps)``."""
    mean = np.asarray(mean, dtype=float)
    if sigma < 0:
        raise InputError("sigma must be nonnegative")
    if sigma == 0:
        eps = np.zeros_like(mean)
    else:
        eps = rng.normal(0.0, sigma, size=mean.shape)
    return mean + eps, eps


def _mills(z):
    """``phi(z) / Phi(z)``, stable for large negative ``z``."""
    return np.exp(-0.5 * z * z - 0.5 * np.log(2.0 * np.pi) - log_ndtr(z))


def action_score(mean, u, sigma, task):
    """Derivative of ``log P(action | mean)`` with respect to ``mean``.

    The environment never sees ``u`` itself: CartPole sees only its sign and
    the continuous tasks clip it to the actuator range. Conditioning on the
    action the environment received gives a score with the same expectation
    as ``eps / sigma^2`` but without the noise that the action discards.

    * Inside the actuator range the action equals ``u`` and the score is
      ``(u - mean) / sigma^2``.
    * At a clipped limit ``L`` the action has probability
      ``Phi((mean - L) / sigma)`` (upper) or ``Phi((-L - mean) / sigma)``
      (lower) and the score is the corresponding ``+-phi/Phi / sigma``.
    * For CartPole ``P(push right) = Phi(mean / sigma)``.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if not sigma > 0:
        raise EstimatorError("the action score needs sigma > 0")
    task = Task.parse(task)
    if task is Task.CARTPOLE:
        sign = np.where(u >= 0.0, 1.0, -1.0)
        return sign * _mills(sign * mean / sigma) / sigma
    limit = 1.0 if task is Task.MOUNTAINCAR else 2.0
    score = (u - mean) / sigma ** 2
    upper = u >= limit
    lower = u <= -limit
    score[upper] = _mills((mean[upper] - limit) / sigma) / sigma
    score[lower] = -_mills((-limit - mean[lower]) / sigma) / sigma
    return score


# -- jacobian of the control with respect to v ------------------------------------

class _LocalLaw:
    """Cached LQR solution and gain sensitivities for one partition."""

    __slots__ = ("spec", "sol", "dK", "dff")

    def __init__(self, v, decision, cost):
        spec = build_dynamics(v, decision, cost)
        sol = solve_care(spec.A, spec.B, spec.Qbar, spec.R, term_scaled=True)
        _, dA, _, dB, _, dff = affine_structure(v.template, decision)
        _, dK = care_sensitivities(sol, spec.A, spec.B, spec.R, dA, dB)
        self.spec = spec
        self.sol = sol
        self.dK = dK  # (d, m, n)
        self.dff = dff  # (d, m)

    def control(self, x, decision):
        e = state_error(x, decision.target, self.spec.periodic)
        return -self.sol.K @ e + self.spec.feedforward, e

    def jacobian(self, e, decision):
        J = -np.einsum("dmn,n->md", self.dK, e) + self.dff.T
        if decision.target_jacobian is not None:
            J = J + self.sol.K @ decision.target_jacobian
        return J


def policy_variable_jacobian(v, decision, x, cost=None):
    """Derivative of the LQR control with respect to the variables.

    Column ``j`` is ``-dK_j (x - x*) + K dx*/dv_j + dff/dv_j`` where ``dK_j``
    comes from differentiating the Riccati equation along the unit
    perturbation of variable ``j``.

    Returns
    -------
    (m, d) ndarray

    Raises
    ------
    CareError
        If the Riccati equation has no stabilizing solution at ``v``.
    """
    law = _LocalLaw(v, decision, cost)
    _, e = law.control(x, decision)
    return law.jacobian(e, decision)


# -- estimator and update ---------------------------------------------------------

def advantages(rollout, values, gamma, lam=1.0):
    """Advantage estimates for every step of ``rollout``.

    ``values`` are the baseline's predictions at the rollout states. With
    ``lam = 1`` this is ``G_t - V(x_t)``. Otherwise it is the
    generalized advantage ``sum_k (gamma lam)^k delta_{t+k}`` with
    ``delta_t = r_t + gamma V(x_{t+1}) - V(x_t)``, where the value after the
    last step is the rollout's ``bootstrap``.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if lam == 1.0:
        return discounted_returns(rollout.rewards, gamma, rollout.bootstrap) - values
    nxt = np.append(values[1:], rollout.bootstrap)
    delta = rollout.rewards + gamma * nxt - values
    return discounted_returns(delta, gamma * lam)


def estimate_gradient(rollout, jacobians, baseline, sigma, gamma, grad_clip=0.0, lam=1.0):
    """Score-function estimate of the return gradient with respect to ``v``.

    ``sum_t gamma^t (G_t - V(x_t)) J_t' s_t`` with ``s_t = eps_t / sigma^2``,
    or the rollout's own ``scores`` when it carries them.

    Parameters
    ----------
    rollout : Rollout
    jacobians : (T, m, d) array_like
        ``du/dv`` at every step.
    baseline : callable
        Maps a (T, n) state batch to (T,) value estimates.
    sigma : float
        Exploration standard deviation; must be positive.
    gamma : float
        Discount applied both to the returns and to the per-step weights.
    grad_clip : float
        If positive, the estimate is rescaled to at most this norm.
    lam : float
        Advantage weighting, see :func:`advantages`.
    """
    if not sigma > 0:
        raise EstimatorError("the score-function estimator needs sigma > 0")
    if len(rollout) == 0:
        raise EstimatorError("empty rollout")
    J = np.asarray(jacobians, dtype=float)
    if J.ndim != 3 or J.shape[0] != len(rollout):
        raise DimensionError(f"jacobians must be (T, m, d) with T={len(rollout)}")
    adv = advantages(rollout, baseline(rollout.states), gamma, lam)
    weights = gamma ** np.arange(len(rollout)) * adv
    scores = rollout.noises / sigma ** 2 if rollout.scores is None else rollout.scores
    g = np.einsum("t,tmd,tm->d", weights, J, scores)
    if grad_clip > 0:
        norm = np.linalg.norm(g)
        if norm > grad_clip:
            g = g * (grad_clip / norm)
    return g


def gradient_ascent_step(v, grad, eta):
    """``v + eta * grad``, projected onto the template's variable floors.

    Refuses non-finite steps with :class:`UpdateRejected`.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != v.values.shape:
        raise DimensionError(f"gradient has shape {grad.shape}, expected {v.values.shape}")
    if not eta > 0:
        raise InputError("eta must be positive")
    if not np.all(np.isfinite(grad)):
        raise UpdateRejected("gradient has non-finite entries; v left unchanged")
    new = v.values + eta * grad
    if not np.all(np.isfinite(new)):
        raise UpdateRejected("update produced non-finite variables; v left unchanged")
    for i, floor in v.template.lower_bounds:
        new[i] = max(new[i], floor)
    return v.replace(new)


def update_value_baseline(baseline, rollout):
    """One regression step of ``baseline`` towards the rollout's returns-to-go.

    Returns the mean squared error (on the baseline's scaled targets) before
    the step.
    """
    if len(rollout) == 0:
        raise InputError("empty rollout")
    return baseline.step(rollout.states, rollout.returns)


def region_gains(v, cost=None):
    """LQR gains of every local model of ``v``, in :func:`region_decisions` order.

    Raises
    ------
    CareError
        If some local model has no stabilizing solution.
    """
    gains = []
    for dec in region_decisions(v.template):
        spec = build_dynamics(v, dec, cost)
        gains.append(solve_care(spec.A, spec.B, spec.Qbar, spec.R, term_scaled=True).K)
    return gains


def gains_reversed(old, new):
    """True if any region's gain turned by more than 90 degrees.

    Along a path of controllable models the gain moves continuously, so a
    short step cannot reverse it; a reversal means the step jumped across a
    model that cannot be controlled (for example an input gain through zero).
    """
    return any(float(np.sum(a * b)) < 0.0 for a, b in zip(old, new))


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainHistory:
    returns: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    variables: list = field(default_factory=list)
    aborted: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    baseline_losses: list = field(default_factory=list)
    rejected: list = field(default_factory=list)


def _run_episode(task, v, cost, config, rng):
    """Collect one exploratory episode; returns (rollout, jacobians)."""
    state = env_reset(task, rng)
    laws = {}
    states, controls, noises, actions, rewards, parts, dones = [], [], [], [], [], [], []
    jac, scores = [], []
    limit = max_episode_steps(task)
    for _ in range(limit):
        x = state.x
        decision = select_partition(task, x, v)
        law = laws.get(decision.key)
        if law is None:
            law = laws[decision.key] = _LocalLaw(v, decision, cost)
        mean, e = law.control(x, decision)
        u, eps = sample_exploratory_action(mean, config.sigma, rng)
        action = map_action(u, task)
        result = env_step(state, action)
        states.append(x)
        controls.append(u)
        noises.append(eps)
        actions.append(action)
        rewards.append(result.reward)
        parts.append(decision.partition_id)
        dones.append(result.done)
        jac.append(law.jacobian(e, decision))
        if config.action_score and config.sigma > 0:
            scores.append(action_score(mean, u, config.sigma, task))
        state = result.next_state
        if result.done:
            break
    rollout = Rollout(states, controls, noises, actions, rewards, parts, dones,
                      gamma=config.gamma, truncated=result.done_reason == "time_limit",
                      final_state=state.x, scores=scores or None)
    return rollout, np.array(jac)


def _guard(proposal, gains, cost):
    """Gains at ``proposal``, or :class:`UpdateRejected` if the step is unsafe."""
    try:
        new = region_gains(proposal, cost)
    except CareError:
        raise UpdateRejected("step leaves the stabilizable models; v left unchanged") from None
    if gains_reversed(gains, new):
        raise UpdateRejected("step reverses an LQR gain; v left unchanged")
    return new


def train(task, v0, config, seed, cost=None, clock=time.monotonic, callback=None):
    """Learn the controller variables for ``task`` starting from ``v0``.

    Each episode solves the Riccati equation of every visited partition,
    acts with Gaussian exploration, fits the value baseline, and takes one
    ascent step on ``v``. The step size is multiplied by ``config.decay``
    after every episode whose return reaches the solved threshold.

    An episode whose Riccati equation has no stabilizing solution is
    aborted: it records the task's worst possible return, no update is
    taken, and ``v`` returns to the last value whose episode completed.
    With ``config.gain_guard`` such values are normally never reached,
    because steps into them are refused (see :func:`gains_reversed`).

    Parameters
    ----------
    task : Task or str
    v0 : VariableVector
    config : LearnerConfig
    seed : int
    cost : CostConfig, optional
    clock : callable
        Returns seconds; pass a constant function for reproducible output.
    callback : callable, optional
        Called as ``callback(episode, history)`` after each episode.

    Returns
    -------
    TrainHistory
        ``seconds`` is cumulative time since the start of training; ``etas``
        and ``variables`` are the values in force during each episode.
    """
    task = Task.parse(task)
    if v0.template_id != task.value:
        raise InputError(f"variables for {v0.template_id!r} cannot drive task {task.value!r}")
    env_seq, net_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(env_seq)
    baseline = ValueBaseline(
        v0.template.n, hidden=config.baseline_hidden, lr=config.baseline_lr,
        momentum=config.baseline_momentum, scale=config.value_scale,
        rng=np.random.default_rng(net_seq))
    threshold = solved_threshold(task)
    v = last_good = v0
    eta = config.eta
    history = TrainHistory()
    gains = None
    if config.gain_guard:
        try:
            gains = region_gains(v, cost)
        except CareError:
            gains = None
    start = clock()
    for episode in range(config.episodes):
        history.etas.append(eta)
        history.variables.append(v.values.copy())
        aborted = False
        rejected = False
        grad_norm = float("nan")
        loss = float("nan")
        try:
            rollout, jac = _run_episode(task, v, cost, config, rng)
        except CareError as exc:
            log.info("episode %d aborted: %s", episode, exc)
            aborted = True
            ep_return = worst_return(task)
            v = last_good
        else:
            last_good = v
            ep_return = rollout.episode_return
            if rollout.truncated and config.bootstrap_truncated:
                rollout.with_bootstrap(baseline(rollout.final_state[None, :])[0])
            for _ in range(config.baseline_steps):
                loss = update_value_baseline(baseline, rollout)
            if config.sigma > 0:
                grad = estimate_gradient(rollout, jac, baseline, config.sigma,
                                         config.gamma, config.grad_clip, config.gae_lambda)
                grad_norm = float(np.linalg.norm(grad))
                try:
                    proposal = gradient_ascent_step(v, grad, eta)
                    if gains is not None:
                        gains = _guard(proposal, gains, cost)
                    v = proposal
                except UpdateRejected as exc:
                    rejected = True
                    log.info("episode %d: %s", episode, exc)
            if ep_return >= threshold:
                eta *= config.decay
        history.returns.append(float(ep_return))
        history.seconds.append(float(clock() - start))
        history.aborted.append(aborted)
        history.rejected.append(rejected)
        history.grad_norms.append(grad_norm)
        history.baseline_losses.append(loss)
        if callback is not None:
            callback(episode, history)
    history.final_variables = v.values.copy()
    return history
