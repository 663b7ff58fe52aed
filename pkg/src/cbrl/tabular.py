"""Finite-MDP bench for the CBRL operator, its fixed point and Q-learning rule.

A policy set is a finite list of deterministic policies ``F_v``; a CBRL Q
table ``qt[x, v]`` stores the value of applying ``F_v(x)`` at ``x`` and acting
optimally (within the set) afterwards.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

__all__ = [
    "TabularMdp",
    "PolicySet",
    "FixedPointResult",
    "bellman_optimal",
    "policy_evaluation",
    "cbrl_operator_apply",
    "cbrl_fixed_point",
    "cbrl_q_learning",
    "refinement_experiment",
    "random_mdp",
    "all_deterministic_policies",
    "greedy_policy",
]


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP.

    Parameters
    ----------
    transition : array_like, shape (S, U, S)
        ``transition[x, u, y] = P(y | x, u)``.
    reward : array_like, shape (S, U)
    gamma : float
        Discount in (0, 1).
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise InputError("transition must have shape (S, U, S)")
        if r.shape != P.shape[:2]:
            raise InputError(f"reward must have shape {P.shape[:2]}, got {r.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise InputError("transition rows must be probability vectors")
        if not np.all(np.isfinite(r)):
            raise InputError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise InputError("gamma must lie in (0, 1)")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def with_gamma(self, gamma):
        return TabularMdp(self.transition, self.reward, gamma)


@dataclass(frozen=True)
class PolicySet:
    """Finite family of deterministic policies.

    ``policies[v, x]`` is the action ``F_v(x)``.
    """

    policies: np.ndarray

    def __post_init__(self):
        F = np.array(self.policies, dtype=np.int64)
        if F.ndim == 1:
            F = F[None, :]
        if F.ndim != 2 or F.shape[0] == 0:
            raise InputError("policies must have shape (n_policies, n_states)")
        F.setflags(write=False)
        object.__setattr__(self, "policies", F)

    def __len__(self):
        return self.policies.shape[0]

    def check(self, mdp):
        if self.policies.shape[1] != mdp.n_states:
            raise InputError("policy length does not match the number of states")
        if self.policies.min() < 0 or self.policies.max() >= mdp.n_actions:
            raise InputError("policy maps a state to an invalid action")

    def contains(self, other):
        """True when every policy of ``other`` appears in this set."""
        mine = {tuple(p) for p in self.policies}
        return all(tuple(p) in mine for p in other.policies)

    def extended(self, extra):
        extra = PolicySet(extra).policies
        return PolicySet(np.vstack([self.policies, extra]))


@dataclass
class FixedPointResult:
    q: np.ndarray
    iterations: int
    residual: float
    iterates: list = field(default_factory=list, repr=False)


def _backup_terms(mdp, policies):
    policies.check(mdp)
    F = policies.policies
    states = np.arange(mdp.n_states)
    r = mdp.reward[states[None, :], F].T  # (S, V)
    P = mdp.transition[states[None, :], F].transpose(1, 0, 2)  # (S, V, S)
    return r, P


def bellman_optimal(mdp, tol=1e-12, max_iter=1_000_000):
    """Optimal action values by value iteration.

    Stops once the sup-norm distance to the fixed point is guaranteed to be
    at most ``tol``.
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    g = mdp.gamma
    stop = tol * (1.0 - g) / max(g, 1e-300)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        new = mdp.reward + g * mdp.transition @ q.max(axis=1)
        delta = np.max(np.abs(new - q))
        q = new
        if delta <= stop:
            break
    return q


def policy_evaluation(mdp, policy):
    """Action values of a single deterministic policy by a direct solve."""
    F = PolicySet(policy)
    r, P = _backup_terms(mdp, F)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P[:, 0, :], r[:, 0])
    return mdp.reward + mdp.gamma * mdp.transition @ V


def greedy_policy(q):
    return np.argmax(q, axis=1)


def cbrl_operator_apply(mdp, policies, qt):
    """One application of the CBRL operator.

    ``(T q)(x, v) = sum_y P(y | x, F_v(x)) [r(x, F_v(x)) + gamma max_v' q(y, v')]``
    """
    r, P = _backup_terms(mdp, policies)
    qt = np.asarray(qt, dtype=float)
    if qt.shape != r.shape:
        raise InputError(f"table must have shape {r.shape}, got {qt.shape}")
    return r + mdp.gamma * P @ qt.max(axis=1)


def cbrl_fixed_point(mdp, policies, tol=1e-10, q0=None, max_iter=1_000_000, keep_iterates=False):
    """Iterate the CBRL operator to its fixed point.

    The loop stops when the successive change is below
    ``tol * min(1, (1 - gamma) / gamma)``, which bounds the distance to the
    true fixed point (and the fixed-point residual) by ``tol``.

    Returns
    -------
    FixedPointResult
    """
    if tol <= 0:
        raise InputError("tol must be positive")
    r, P = _backup_terms(mdp, policies)
    g = mdp.gamma
    stop = tol * min(1.0, (1.0 - g) / g)
    q = np.zeros_like(r) if q0 is None else np.array(q0, dtype=float)
    iterates = [q.copy()] if keep_iterates else []
    delta = np.inf
    it = 0
    while it < max_iter:
        new = r + g * P @ q.max(axis=1)
        delta = np.max(np.abs(new - q))
        q = new
        it += 1
        if keep_iterates:
            iterates.append(q.copy())
        if delta <= stop:
            break
    residual = float(np.max(np.abs(r + g * P @ q.max(axis=1) - q)))
    return FixedPointResult(q, it, residual, iterates)


def cbrl_q_learning(mdp, policies, steps, rng, c=1.0, q0=None):
    """Tabular CBRL Q-learning with uniform exploring starts.

    Each step draws a (state, policy index) pair uniformly, samples the next
    state and applies ``q += alpha (r + gamma max q(y) - q)`` with
    ``alpha = c / (visits + 1)``.

    Parameters
    ----------
    steps : int
    rng : numpy.random.Generator
    c : float
        Step-size scale in [0, 1]; ``c = 0`` freezes the table.
    """
    if not 0.0 <= c <= 1.0:
        raise InputError("step-size scale c must lie in [0, 1]")
    if steps < 0:
        raise InputError("steps must be non-negative")
    r, P = _backup_terms(mdp, policies)
    S, V = r.shape
    g = mdp.gamma
    q = np.zeros((S, V)) if q0 is None else np.array(q0, dtype=float)
    if steps == 0 or c == 0.0:
        return q

    xs = rng.integers(0, S, size=steps)
    vs = rng.integers(0, V, size=steps)
    # inverse-CDF sampling of the successor for every step at once
    cdf = np.cumsum(P, axis=2)
    cdf[..., -1] = 1.0
    u = rng.random(steps)
    ys = (u[:, None] > cdf[xs, vs]).sum(axis=1)

    table = q.tolist()
    best = [max(row) for row in table]
    visits = [[0] * V for _ in range(S)]
    rl = r.tolist()
    for x, v, y in zip(xs.tolist(), vs.tolist(), ys.tolist()):
        n = visits[x][v]
        alpha = c / (n + 1)
        row = table[x]
        row[v] += alpha * (rl[x][v] + g * best[y] - row[v])
        visits[x][v] = n + 1
        best[x] = max(row)
    return np.array(table)


def refinement_experiment(mdp, nested_policy_sets, tol=1e-10):
    """Gap to the Bellman optimum for each set in a nested chain.

    Returns
    -------
    gaps : list of float
        ``max_x |max_v q_k(x, v) - max_u Q*(x, u)|`` for each set.
    """
    sets = [ps if isinstance(ps, PolicySet) else PolicySet(ps) for ps in nested_policy_sets]
    if not sets:
        raise InputError("need at least one policy set")
    for prev, cur in zip(sets, sets[1:]):
        if not cur.contains(prev):
            raise InputError("policy sets are not nested")
    v_star = bellman_optimal(mdp, tol).max(axis=1)
    gaps = []
    for ps in sets:
        q = cbrl_fixed_point(mdp, ps, tol).q
        gaps.append(float(np.max(np.abs(q.max(axis=1) - v_star))))
    return gaps


def random_mdp(n_states, n_actions, gamma, rng, deterministic=False):
    """Random finite MDP with rewards in [0, 1)."""
    if deterministic:
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        P = np.zeros((n_states, n_actions, n_states))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        P = rng.random((n_states, n_actions, n_states))
        P /= P.sum(axis=2, keepdims=True)
        # renormalize once more so rows sum to one to rounding
        P /= P.sum(axis=2, keepdims=True)
    r = rng.random((n_states, n_actions))
    return TabularMdp(P, r, gamma)


def all_deterministic_policies(n_states, n_actions):
    """Every deterministic policy, as a ``(n_actions**n_states, n_states)`` array."""
    grids = np.meshgrid(*[np.arange(n_actions)] * n_states, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)
