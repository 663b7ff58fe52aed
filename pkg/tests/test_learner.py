import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbrl.errors import CareError, EstimatorError, InputError, UpdateRejected
from cbrl.learner import (
    LearnerConfig, Rollout, ValueBaseline, action_score, advantages, discounted_returns, estimate_gradient,
    gains_reversed, gradient_ascent_step, policy_variable_jacobian, region_gains,
    sample_exploratory_action, train, update_value_baseline,
)
from cbrl.linalg import care_sensitivities, solve_care
from cbrl.policy import (
    PENDULUM_D0_MIN, CostConfig, PartitionDecision, VariableVector, build_dynamics,
    select_partition, state_error,
)


# -- one-step scalar LQR oracle -------------------------------------------------
#
# Plant dx = a x + b u with Q = R = 1, so k(a, b) = (a + sqrt(a^2 + b^2)) / b.
# One step from x0 with u = -k x0 + eps pays r = -(x0^2 + u^2), hence
# E[r] = -(x0^2 (1 + k^2) + sigma^2).

def scalar_gain(v):
    a, b = v
    return (a + math.sqrt(a * a + b * b)) / b


def expected_one_step_return(v, x0, sigma):
    return -(x0 ** 2 * (1 + scalar_gain(v) ** 2) + sigma ** 2)


def scalar_jacobian(v, e):
    """du/dv through the Riccati sensitivities (the code under test)."""
    a, b = v
    A, B, I = np.array([[a]]), np.array([[b]]), np.eye(1)
    sol = solve_care(A, B, I, I)
    dAs = np.array([[[1.0]], [[0.0]]])
    dBs = np.array([[[0.0]], [[1.0]]])
    _, dK = care_sensitivities(sol, A, B, I, dAs, dBs)
    return -np.einsum("dmn,n->md", dK, np.atleast_1d(e)), sol.K


def one_step_estimates(v, x0, sigma, n, rng, shift=0.0):
    J, K = scalar_jacobian(v, x0)
    mean = -K @ np.array([x0])
    out = np.empty((n, 2))
    baseline = lambda X: np.full(len(X), shift)
    for i in range(n):
        u, eps = sample_exploratory_action(mean, sigma, rng)
        r = -(x0 ** 2 + float(u[0]) ** 2)
        roll = Rollout([[x0]], [u], [eps], [u], [r], [1], [True], gamma=0.9)
        out[i] = estimate_gradient(roll, J[None], baseline, sigma, gamma=0.9)
    return out


# -- exploration ------------------------------------------------------------------

def test_zero_sigma_is_deterministic():
    u, eps = sample_exploratory_action(np.array([0.3, -1.0]), 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(u, [0.3, -1.0])
    np.testing.assert_array_equal(eps, 0.0)


def test_exploration_repeatable():
    a = sample_exploratory_action(np.ones(2), 0.7, np.random.default_rng(4))
    b = sample_exploratory_action(np.ones(2), 0.7, np.random.default_rng(4))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_exploration_moments():
    rng = np.random.default_rng(1)
    draws = np.array([sample_exploratory_action(np.array([2.0]), 1.0, rng)[0][0]
                      for _ in range(100_000)])
    assert abs(draws.mean() - 2.0) <= 0.02
    assert abs(draws.var() - 1.0) <= 0.05


def test_negative_sigma_rejected():
    with pytest.raises(InputError):
        sample_exploratory_action(np.zeros(1), -0.1, np.random.default_rng(0))


# -- jacobian ---------------------------------------------------------------------

def test_scalar_jacobian_matches_finite_differences():
    v, e, h = np.array([0.0, 1.0]), 1.0, 1e-6
    J, _ = scalar_jacobian(v, e)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        fd = (-scalar_gain(v + step) * e + scalar_gain(v - step) * e) / (2 * h)
        assert J[0, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
    # closed form at a = 0, b = 1: dk/da = 1 and dk/db = 0
    np.testing.assert_allclose(J, [[-1.0, 0.0]], atol=1e-12)


def test_mountaincar_feedforward_derivative():
    v = VariableVector("mountaincar", [0.4, -0.2, 2.0, 0.5])
    dec = PartitionDecision("mountaincar", 2, np.array([0.6, 0.0]), anchor=0.6)
    J = policy_variable_jacobian(v, dec, np.array([0.6, 0.0]))
    assert J[0, 3] == pytest.approx(math.cos(1.8), abs=1e-12)
    # at the target the gain sensitivities drop out
    np.testing.assert_allclose(J[0, :3], 0.0, atol=1e-12)


def _control(task, values, decision, x, cost):
    spec = build_dynamics(VariableVector(task, values), decision, cost)
    K = solve_care(spec.A, spec.B, spec.Qbar, spec.R).K
    e = state_error(x, decision.target, spec.periodic)
    return (-K @ e + spec.feedforward)[0]


@pytest.mark.parametrize("task, values, x", [
    ("cartpole", [0.1, 0.2, -1.0, 0.1, 0.0, 0.1, 15.0, 0.3, 1.0, -1.5], [0.02, -0.1, 0.05, 0.2]),
    ("mountaincar", [0.4, -0.2, 2.0, 0.5], [-0.5, 0.01]),
    ("pendulum", [15.0, -0.1, 3.0, 5.0, 30.0], [2.5, -1.0]),
])
def test_policy_jacobian_matches_finite_differences(task, values, x):
    cost = CostConfig((1.0,) * (4 if task == "cartpole" else 2), 1.0)
    v = VariableVector(task, values)
    x = np.array(x)
    dec = select_partition(task, x, v)
    J = policy_variable_jacobian(v, dec, x, cost)
    h = 1e-5
    for j in range(v.template.d):
        step = np.zeros(v.template.d)
        step[j] = h
        # the target moves with v too, so re-derive the decision at each point
        up = np.asarray(values) + step
        dn = np.asarray(values) - step
        dec_up = select_partition(task, x, VariableVector(task, up))
        dec_dn = select_partition(task, x, VariableVector(task, dn))
        fd = (_control(task, up, dec_up, x, cost) - _control(task, dn, dec_dn, x, cost)) / (2 * h)
        assert J[0, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)


# -- estimator --------------------------------------------------------------------

def _tiny_rollout(noises, rewards):
    T = len(rewards)
    return Rollout(np.zeros((T, 2)), np.zeros((T, 1)), np.reshape(noises, (T, 1)),
                   [0.0] * T, rewards, [1] * T, [False] * (T - 1) + [True], gamma=0.9)


def test_zero_advantage_gives_zero_gradient():
    roll = _tiny_rollout([0.3, -0.2, 1.0], [1.0, 2.0, 3.0])
    J = np.ones((3, 1, 4))
    g = estimate_gradient(roll, J, lambda X: roll.returns, 0.5, 0.9)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_zero_noise_gives_zero_gradient():
    roll = _tiny_rollout([0.0, 0.0], [1.0, -1.0])
    g = estimate_gradient(roll, np.ones((2, 1, 3)), lambda X: np.zeros(len(X)), 0.5, 0.9)
    np.testing.assert_array_equal(g, 0.0)


def test_estimator_hand_value():
    # G = [1 + 0.9 * 2, 2] = [2.8, 2]; weights gamma^t G / sigma^2
    roll = _tiny_rollout([0.5, -1.0], [1.0, 2.0])
    J = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
    g = estimate_gradient(roll, J, lambda X: np.zeros(len(X)), 0.5, 0.9)
    np.testing.assert_allclose(g, [2.8 * 0.5 / 0.25, 0.9 * 2.0 * 2.0 * -1.0 / 0.25], rtol=1e-14)


def test_estimator_clip():
    roll = _tiny_rollout([1.0], [100.0])
    g = estimate_gradient(roll, np.ones((1, 1, 2)), lambda X: np.zeros(1), 0.5, 0.9, grad_clip=5.0)
    assert np.linalg.norm(g) == pytest.approx(5.0)


def test_estimator_requires_noise():
    roll = _tiny_rollout([0.0], [1.0])
    with pytest.raises(EstimatorError):
        estimate_gradient(roll, np.ones((1, 1, 2)), lambda X: np.zeros(1), 0.0, 0.9)


def test_estimator_unbiased_on_one_step_lqr():
    v, x0, sigma, n = np.array([0.3, 1.2]), 1.0, 0.5, 100_000
    est = one_step_estimates(v, x0, sigma, n, np.random.default_rng(0))
    h = 1e-5
    fd = np.array([(expected_one_step_return(v + h * e, x0, sigma)
                    - expected_one_step_return(v - h * e, x0, sigma)) / (2 * h)
                   for e in np.eye(2)])
    se = est.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(est.mean(axis=0) - fd) <= 3 * se)


def test_baseline_shift_does_not_bias():
    v, x0, sigma, n = np.array([0.3, 1.2]), 1.0, 0.5, 50_000
    plain = one_step_estimates(v, x0, sigma, n, np.random.default_rng(1))
    shifted = one_step_estimates(v, x0, sigma, n, np.random.default_rng(2), shift=5.0)
    se = np.sqrt(plain.var(axis=0, ddof=1) / n + shifted.var(axis=0, ddof=1) / n)
    assert np.all(np.abs(plain.mean(axis=0) - shifted.mean(axis=0)) <= 3 * se)


# -- score of the applied action ----------------------------------------------------

def test_action_score_inside_range_is_gaussian_score():
    s = action_score([0.3], [0.8], 0.5, "pendulum")
    np.testing.assert_allclose(s, [0.5 / 0.25], rtol=1e-15)


def test_action_score_cartpole_closed_form():
    # P(right) = Phi(m / sigma); at m = 0 the score is +-phi(0) / (Phi(0) sigma)
    expected = math.sqrt(2 / math.pi) / 0.5
    np.testing.assert_allclose(action_score([0.0], [0.1], 0.5, "cartpole"), [expected])
    np.testing.assert_allclose(action_score([0.0], [-0.1], 0.5, "cartpole"), [-expected])


def test_action_score_stable_in_far_tail():
    s = action_score([-40.0], [3.0], 1.0, "pendulum")
    # phi(z)/Phi(z) ~ -z for z -> -inf, here z = -42
    assert s[0] == pytest.approx(42.0, rel=1e-2)


@pytest.mark.parametrize("task, mean, reward", [
    ("pendulum", 1.6, lambda a: -(a - 0.5) ** 2),
    ("mountaincar", -0.7, lambda a: a ** 3),
    ("cartpole", 0.2, lambda a: 3.0 * a + 1.0),
])
def test_action_score_is_unbiased(task, mean, reward):
    # E[f(a) score] must equal d/dm E[f(a)], computed here by quadrature
    from scipy import integrate, stats
    sigma = 0.6
    limit = {"pendulum": 2.0, "mountaincar": 1.0}.get(task)

    def expected(m):
        if task == "cartpole":
            p = stats.norm.cdf(m / sigma)
            return p * reward(1) + (1 - p) * reward(0)
        inside = integrate.quad(lambda u: reward(u) * stats.norm.pdf(u, m, sigma), -limit, limit)[0]
        return (inside + reward(limit) * stats.norm.sf(limit, m, sigma)
                + reward(-limit) * stats.norm.cdf(-limit, m, sigma))

    h = 1e-5
    target = (expected(mean + h) - expected(mean - h)) / (2 * h)
    rng = np.random.default_rng(0)
    n = 200_000
    u = mean + sigma * rng.normal(size=n)
    if task == "cartpole":
        a = (u >= 0).astype(float)
    else:
        a = np.clip(u, -limit, limit)
    s = action_score(np.full(n, mean), u, sigma, task)
    vals = reward(a) * s
    se = vals.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean() - target) <= 3 * se
    # and it never has more variance than the raw Gaussian score
    raw = reward(a) * (u - mean) / sigma ** 2
    assert vals.var() <= raw.var()


# -- ascent step ------------------------------------------------------------------

def test_ascent_step_arithmetic():
    v = VariableVector("two_group_1_1", [1.0, 2.0, 0.0, 0.0, 1.0, 1.0])
    out = gradient_ascent_step(v, [0.5, -1.0, 0.0, 0.0, 0.0, 0.0], 0.1)
    np.testing.assert_allclose(out.values[:2], [1.05, 1.9], rtol=1e-15)
    same = gradient_ascent_step(v, np.zeros(6), 0.1)
    np.testing.assert_array_equal(same.values, v.values)


def test_ascent_step_rejects_non_finite():
    v = VariableVector("mountaincar", [0.4, -0.2, 2.0, 0.5])
    with pytest.raises(UpdateRejected):
        gradient_ascent_step(v, [np.nan, 0.0, 0.0, 0.0], 0.1)
    np.testing.assert_array_equal(v.values, [0.4, -0.2, 2.0, 0.5])


# -- value baseline ---------------------------------------------------------------

def test_baseline_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = ValueBaseline(3, hidden=8, rng=rng)
    X = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    _, grads = net.loss_and_grads(X, y)
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = net.get_flat().copy()
    h = 1e-6
    for i in rng.choice(theta.size, size=40, replace=False):
        tp = theta.copy()
        tp[i] += h
        net.set_flat(tp)
        up = net.loss_and_grads(X, y)[0]
        tp[i] -= 2 * h
        net.set_flat(tp)
        dn = net.loss_and_grads(X, y)[0]
        net.set_flat(theta)
        fd = (up - dn) / (2 * h)
        assert abs(analytic[i] - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_baseline_exact_fit_is_stationary():
    net = ValueBaseline(2, rng=np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(5, 2))
    roll = Rollout(X, np.zeros((5, 1)), np.zeros((5, 1)), [0.0] * 5, np.zeros(5),
                   [1] * 5, [False] * 5, returns=net(X))
    before = net.get_flat().copy()
    loss = update_value_baseline(net, roll)
    assert loss <= 1e-12
    assert np.linalg.norm(net.get_flat() - before) <= 1e-9


def test_baseline_fits_constant_targets():
    net = ValueBaseline(2, lr=1e-3, rng=np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(32, 2))
    y = np.full(32, 3.0)
    for _ in range(5000):
        net.step(X, y)
    assert net.loss_and_grads(X, y)[0] < 1e-4


def test_baseline_small_step_decreases_loss():
    net = ValueBaseline(4, lr=1e-5, momentum=0.0, rng=np.random.default_rng(5))
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    before = net.step(X, y)
    assert net.loss_and_grads(X, y)[0] < before


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4))
def test_baseline_output_finite(x):
    net = ValueBaseline(len(x), rng=np.random.default_rng(0))
    assert np.all(np.isfinite(net(np.array(x))))


# -- rollouts and training --------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(rewards=st.lists(st.floats(-10, 10), min_size=1, max_size=30),
       gamma=st.floats(0.01, 0.99), tail=st.floats(-10, 10))
def test_discounted_recursion(rewards, gamma, tail):
    G = discounted_returns(rewards, gamma, tail)
    assert G[-1] == rewards[-1] + gamma * tail
    for t in range(len(rewards) - 1):
        assert G[t] == rewards[t] + gamma * G[t + 1]


def test_bootstrap_recomputes_returns():
    roll = _tiny_rollout([0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(roll.returns, [1.9, 1.0])
    roll.with_bootstrap(10.0)
    # G_1 = 1 + 0.9 * 10 and G_0 = 1 + 0.9 * G_1
    np.testing.assert_allclose(roll.returns, [10.0, 10.0], rtol=1e-14)


def test_advantage_limits():
    roll = _tiny_rollout([0.0, 0.0, 0.0], [1.0, -2.0, 3.0])
    roll.with_bootstrap(4.0)
    values = np.array([0.5, 1.5, -1.0])
    # lam = 1 is the Monte-Carlo advantage, lam = 0 the one-step residual
    np.testing.assert_allclose(advantages(roll, values, 0.9, 1.0), roll.returns - values)
    delta = roll.rewards + 0.9 * np.array([1.5, -1.0, 4.0]) - values
    np.testing.assert_allclose(advantages(roll, values, 0.9, 0.0), delta, atol=1e-14)
    # lam = 0.5 by hand: A_2 = d_2, A_1 = d_1 + 0.45 d_2, A_0 = d_0 + 0.45 A_1
    a2 = delta[2]
    a1 = delta[1] + 0.45 * a2
    np.testing.assert_allclose(advantages(roll, values, 0.9, 0.5), [delta[0] + 0.45 * a1, a1, a2])


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(eta=0.0), dict(sigma=-1.0), dict(decay=0.0),
                dict(episodes=-1), dict(grad_clip=-1.0), dict(gae_lambda=1.5)):
        with pytest.raises(InputError):
            LearnerConfig(**bad)


MC_V = VariableVector("mountaincar", [0.41, -0.27, 2.55, -0.1])
MC_COST = CostConfig((1.0, 1.0), 10.0)


def test_train_is_deterministic():
    cfg = LearnerConfig(episodes=3, eta=0.02, sigma=0.5)
    a = train("mountaincar", MC_V, cfg, seed=11, cost=MC_COST, clock=lambda: 0.0)
    b = train("mountaincar", MC_V, cfg, seed=11, cost=MC_COST, clock=lambda: 0.0)
    assert a.returns == b.returns
    np.testing.assert_array_equal(np.array(a.variables), np.array(b.variables))
    np.testing.assert_array_equal(a.final_variables, b.final_variables)


def test_step_size_decays_only_on_solved_episodes():
    cfg = LearnerConfig(episodes=6, eta=0.02, sigma=0.5, decay=0.5)
    h = train("mountaincar", MC_V, cfg, seed=0, cost=MC_COST)
    for t in range(1, 6):
        expected = h.etas[t - 1] * (0.5 if h.returns[t - 1] >= 90 else 1.0)
        assert h.etas[t] == expected
    assert any(r >= 90 for r in h.returns[:-1])


def test_care_failure_aborts_episode():
    # b0 = 0 makes the car model uncontrollable and a0 > 0 makes it unstable
    bad = VariableVector("mountaincar", [1.0, 0.5, 0.0, 0.0])
    with pytest.raises(CareError):
        dec = select_partition("mountaincar", np.array([-0.5, 0.0]), bad)
        policy_variable_jacobian(bad, dec, np.array([-0.5, 0.0]))
    h = train("mountaincar", bad, LearnerConfig(episodes=2), seed=0)
    assert h.aborted == [True, True]
    assert h.returns == [-99.9, -99.9]
    np.testing.assert_array_equal(h.final_variables, bad.values)


def test_wrong_task_rejected():
    with pytest.raises(InputError):
        train("pendulum", MC_V, LearnerConfig(episodes=1), seed=0)


# -- gain guard ---------------------------------------------------------------------

def test_region_gains_cover_every_model():
    v = VariableVector("pendulum", [15.0, 0.0, 3.0, 5.0, 30.0])
    gains = region_gains(v)
    assert len(gains) == 4
    x = np.array([2.0, 0.5])
    dec = select_partition("pendulum", x, v)
    spec = build_dynamics(v, dec)
    K = solve_care(spec.A, spec.B, spec.Qbar, spec.R).K
    assert any(np.allclose(K, G, atol=1e-9) for G in gains)


def test_input_gain_through_zero_reverses_gain():
    before = region_gains(VariableVector("mountaincar", [0.4, -0.2, 0.01, 0.5]))
    after = region_gains(VariableVector("mountaincar", [0.4, -0.2, -0.01, 0.5]))
    assert gains_reversed(before, after)
    nearby = region_gains(VariableVector("mountaincar", [0.4, -0.2, 0.02, 0.5]))
    assert not gains_reversed(before, nearby)


def test_guard_refuses_crossing_steps(monkeypatch):
    # start just above b0 = 0 and push b0 down hard every episode
    v0 = VariableVector("mountaincar", [0.4, -0.2, 0.01, 0.5])
    cfg = LearnerConfig(episodes=2, eta=1.0, sigma=0.5, grad_clip=0.0)
    monkeypatch.setattr("cbrl.learner.estimate_gradient",
                        lambda *args, **kwargs: np.array([0.0, 0.0, -0.05, 0.0]))
    guarded = train("mountaincar", v0, cfg, seed=0)
    unguarded = train("mountaincar", v0, cfg.replace(gain_guard=False), seed=0)
    assert guarded.rejected == [True, True]
    np.testing.assert_array_equal(guarded.final_variables, v0.values)
    assert unguarded.final_variables[2] < 0


def test_ascent_projects_onto_variable_floor():
    v = VariableVector("pendulum", [1.0, 0.0, 1.0, 0.0, 0.05])
    out = gradient_ascent_step(v, np.array([1.0, 0.0, 0.0, 0.0, -1.0]), 0.5)
    np.testing.assert_allclose(out.values, [1.5, 0.0, 1.0, 0.0, PENDULUM_D0_MIN])
    # the floor does not pull a feasible step
    inside = gradient_ascent_step(v, np.array([0.0, 0.0, 0.0, 0.0, 1.0]), 0.5)
    assert inside.values[4] == 0.55
