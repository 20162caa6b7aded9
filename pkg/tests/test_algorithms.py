import math

import numpy as np
import pytest

from btpp.algorithms import (
    DivergenceError,
    RingWeights,
    StepSizeSchedule,
    baseline_init,
    btpp_init,
    btpp_step,
    centralized_sgd_step,
    dsgd_ring_step,
    effective_stepsize,
)
from btpp.numerics import agent_streams
from btpp.problems import QuadraticProblem, generate_logistic, generate_quadratic
from btpp.topology import build_bary_tree, consensus_projection, pull_matrix, push_matrix
from btpp.verification import conservation_gap


def dense_recursion(problem, tree, gamma, x0, streams, T):
    """Stacked recursion with dense matrices; shares only the oracle draws."""
    R = pull_matrix(tree).to_dense(float)
    C = push_matrix(tree).to_dense(float)
    n = problem.n

    def G(X, t):
        return np.stack([problem.stochastic_gradient(i, X[i], streams[i].at(t)) for i in range(n)])

    X = np.tile(x0, (n, 1))
    G_prev = G(X, 0)
    Y = G_prev.copy()
    for t in range(1, T + 1):
        X = R @ (X - gamma * Y)
        G_new = G(X, t)
        Y = C @ Y + G_new - G_prev
        G_prev = G_new
    return X, Y


@pytest.fixture(scope="module")
def logistic():
    return generate_logistic(n=10, p=4, J=30, sigma_h=0.8, reg_coeff=0.01, seed=4)


def test_init_noise_free_trackers_equal_gradients():
    prob = generate_quadratic(5, 3, 2.0, 0.0, seed=0)
    x0 = np.array([0.5, -1.0, 2.0])
    state = btpp_init(prob, x0, agent_streams(0, 5))
    for i in range(5):
        assert np.array_equal(state.Y[i], prob.local_gradient(i, x0))
        assert np.array_equal(state.X[i], x0)
    assert state.t == 0
    assert not consensus_projection(state.X, build_bary_tree(5, 2)).any()


def test_init_conservation_exact(logistic):
    state = btpp_init(logistic, np.zeros(4), agent_streams(1, 10))
    assert np.array_equal(state.Y.sum(axis=0), state.G_prev.sum(axis=0))


def test_init_dimension_mismatch(logistic):
    with pytest.raises(ValueError):
        btpp_init(logistic, np.zeros(5), agent_streams(1, 10))


def test_node_two_update(logistic):
    tree = build_bary_tree(10, 2)
    streams = agent_streams(2, 10)
    state = btpp_init(logistic, np.full(4, 0.1), streams)
    state = btpp_step(state, tree, 0.05, logistic, streams)
    nxt = btpp_step(state, tree, 0.05, logistic, streams)
    assert np.array_equal(nxt.X[1], state.X[0] - 0.05 * state.Y[0])
    g_new = logistic.stochastic_gradient(1, nxt.X[1], streams[1].at(2))
    assert np.array_equal(nxt.Y[1], (state.Y[3] + state.Y[4]) + g_new - state.G_prev[1])


def test_zero_stepsize_freezes_iterates(logistic):
    tree = build_bary_tree(10, 3)
    streams = agent_streams(0, 10)
    state = btpp_init(logistic, np.ones(4), streams)
    X0 = state.X.copy()
    for _ in range(15):
        state = btpp_step(state, tree, 0.0, logistic, streams)
        assert np.array_equal(state.X, X0)


def test_three_node_step_by_hand():
    prob = QuadraticProblem(
        diag=np.array([[1.0, 2.0], [3.0, 1.0], [2.0, 2.0]]),
        b=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        noise_sigma=0.0,
        x_star=np.zeros(2),
        f_star=0.0,
    )
    tree = build_bary_tree(3, 2)
    streams = agent_streams(0, 3)
    gamma = 0.1
    x0 = np.array([1.0, 1.0])
    state = btpp_step(btpp_init(prob, x0, streams), tree, gamma, prob, streams)
    # every node pulls x1 - gamma y1; the root collects y1 + y2 + y3, leaves collect nothing
    g0 = prob.diag * x0 - prob.b
    x_new = x0 - gamma * g0[0]
    g1 = prob.diag * x_new - prob.b
    np.testing.assert_array_equal(state.X, np.tile(x_new, (3, 1)))
    np.testing.assert_allclose(state.Y[0], g0.sum(axis=0) + g1[0] - g0[0], rtol=1e-15)
    np.testing.assert_allclose(state.Y[1:], g1[1:] - g0[1:], rtol=1e-15)


@pytest.mark.parametrize("n, B", [(10, 2), (13, 3), (21, 4), (1, 2)])
def test_matrix_form_fidelity(logistic, n, B):
    prob = generate_logistic(n=n, p=3, J=20, sigma_h=0.8, reg_coeff=0.01, seed=n)
    tree = build_bary_tree(n, B)
    streams = agent_streams(7, n)
    x0 = np.full(3, 0.2)
    state = btpp_init(prob, x0, streams)
    for _ in range(25):
        state = btpp_step(state, tree, 0.02, prob, streams)
    X, Y = dense_recursion(prob, tree, 0.02, x0, streams, 25)
    np.testing.assert_allclose(state.X, X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(state.Y, Y, rtol=1e-12, atol=1e-12)


def test_conservation_every_step(logistic):
    tree = build_bary_tree(10, 2)
    streams = agent_streams(3, 10)
    state = btpp_init(logistic, np.zeros(4), streams)
    for _ in range(200):
        state = btpp_step(state, tree, 0.03, logistic, streams)
        gap, scale = conservation_gap(state.Y, state.G_prev)
        assert gap <= 1e-9 * scale


def test_bitwise_reproducible(logistic):
    tree = build_bary_tree(10, 2)

    def run():
        streams = agent_streams(11, 10)
        s = btpp_init(logistic, np.zeros(4), streams)
        for _ in range(30):
            s = btpp_step(s, tree, 0.04, logistic, streams)
        return s

    a, b = run(), run()
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)


def test_noise_free_quadratic_contracts_over_windows():
    prob = generate_quadratic(10, 4, 3.0, 0.0, seed=5)
    tree = build_bary_tree(10, 2)
    streams = agent_streams(0, 10)
    state = btpp_init(prob, np.zeros(4), streams)
    res = [np.sum((state.X[0] - prob.x_star) ** 2)]
    for _ in range(150):
        state = btpp_step(state, tree, 0.003, prob, streams)
        res.append(np.sum((state.X[0] - prob.x_star) ** 2))
    w = 2 * tree.d
    assert all(res[t + w] < res[t] for t in range(w, len(res) - w))
    assert res[-1] < 1e-6 * res[0]


def test_divergence_names_agent_and_iteration():
    prob = generate_quadratic(4, 2, 4.0, 0.0, seed=0)
    tree = build_bary_tree(4, 2)
    streams = agent_streams(0, 4)
    state = btpp_init(prob, np.ones(2), streams)
    with pytest.raises(DivergenceError) as err, np.errstate(all="ignore"):
        for _ in range(5000):
            state = btpp_step(state, tree, 50.0, prob, streams)
    assert err.value.iteration > 0 and 0 <= err.value.agent < 4


def test_centralized_monotone_on_quadratic():
    prob = generate_quadratic(6, 3, 4.0, 0.0, seed=1)
    streams = agent_streams(0, 6)
    state = baseline_init(prob, np.zeros(3))
    gaps = []
    for _ in range(40):
        x = state.X[0]
        gaps.append(np.mean([prob.local_loss(i, x) for i in range(6)]) - prob.f_star)
        state = centralized_sgd_step(state, 0.4, prob, streams)  # gamma < 2/L = 0.5
    above_roundoff = [g for g in gaps if g > 1e-13]
    assert len(above_roundoff) > 5
    assert all(b < a for a, b in zip(above_roundoff, above_roundoff[1:]))


def test_centralized_scalar_step():
    prob = QuadraticProblem(
        diag=np.array([[2.0], [4.0]]), b=np.array([[1.0], [-1.0]]), noise_sigma=0.0,
        x_star=np.array([0.0]), f_star=0.0,
    )
    state = baseline_init(prob, np.array([1.5]))
    nxt = centralized_sgd_step(state, 0.1, prob, agent_streams(0, 2))
    expected = 1.5 - 0.1 * ((2 * 1.5 - 1) + (4 * 1.5 + 1)) / 2
    assert nxt.X[0, 0] == pytest.approx(expected, rel=1e-15)
    assert nxt.X[1, 0] == nxt.X[0, 0]


def test_centralized_zero_stepsize_fixed_point(logistic):
    state = baseline_init(logistic, np.ones(4))
    nxt = centralized_sgd_step(state, 0.0, logistic, agent_streams(0, 10))
    assert np.array_equal(nxt.X, state.X)


def test_ring_weights():
    for n in (1, 2, 3, 4, 9):
        W = RingWeights(n).matrix
        np.testing.assert_allclose(W.sum(axis=0), 1, rtol=1e-15)
        np.testing.assert_allclose(W.sum(axis=1), 1, rtol=1e-15)
        assert np.array_equal(W, W.T)
    W = RingWeights(6).matrix
    assert all(np.count_nonzero(row) == 3 for row in W)
    assert np.allclose(W[W > 0], 1 / 3)
    assert np.allclose(RingWeights(3).matrix, 1 / 3)


def test_ring_keeps_consensus_state():
    W = RingWeights(7).matrix
    X = np.tile([1.0, -2.0, 0.5], (7, 1))
    np.testing.assert_allclose(W @ X, X, rtol=1e-15)


def test_three_ring_is_centralized_averaging(logistic):
    prob = generate_logistic(3, 4, 10, 0.8, 0.01, seed=0)
    streams = agent_streams(0, 3)
    state = baseline_init(prob, np.zeros(4))
    state.X[:] = np.random.default_rng(0).standard_normal((3, 4))
    nxt = dsgd_ring_step(state, RingWeights(3), 0.1, prob, streams)
    G = np.stack([prob.stochastic_gradient(i, state.X[i], streams[i].at(0)) for i in range(3)])
    adapted = state.X - 0.1 * G
    np.testing.assert_allclose(nxt.X, np.tile(adapted.mean(axis=0), (3, 1)), rtol=1e-14)


def test_ring_step_matches_dense_oracle(logistic):
    streams = agent_streams(2, 10)
    state = baseline_init(logistic, np.zeros(4))
    state.X[:] = np.random.default_rng(1).standard_normal((10, 4))
    nxt = dsgd_ring_step(state, RingWeights(10), 0.2, logistic, streams)
    W = np.zeros((10, 10))
    for i in range(10):
        W[i, [(i - 1) % 10, i, (i + 1) % 10]] = 1 / 3
    G = np.stack([logistic.stochastic_gradient(i, state.X[i], streams[i].at(0)) for i in range(10)])
    np.testing.assert_allclose(nxt.X, W @ (state.X - 0.2 * G), rtol=1e-13)


def test_constant_rescaled_stepsize():
    s = StepSizeSchedule("constant", 0.3, rescale_by_n=True, n=100)
    assert all(effective_stepsize(s, t) == pytest.approx(0.003, rel=1e-15) for t in (0, 1, 500))


def test_decayed_stepsize():
    s = StepSizeSchedule("decayed", 0.3, decay_factor=0.4, decay_interval=100)
    assert effective_stepsize(s, 0) == effective_stepsize(s, 99) == 0.3
    assert effective_stepsize(s, 100) == pytest.approx(0.12, rel=1e-15)
    assert effective_stepsize(s, 199) == pytest.approx(0.12, rel=1e-15)
    assert effective_stepsize(s, 200) == pytest.approx(0.048, rel=1e-15)


def test_theorem1_stepsize_recomputed_term_by_term():
    D, s2, L, n, d, T = 2.0, 0.5, 3.0, 16, 4, 999
    first = (D / (3 * s2 * L * n * (T + 1))) ** 0.5
    second = (D / (1500 * n * n * d**6 * s2 * L * L * (T + 1))) ** (1 / 3)
    third = 1 / (100 * n * d**3 * L)
    s = StepSizeSchedule("theorem1", n=n, delta_f=D, sigma_sq=s2, L=L, d=d, T=T)
    assert effective_stepsize(s, 0) == pytest.approx(min(first, second, third), rel=1e-14)
    assert effective_stepsize(s, 0) == effective_stepsize(s, 777)


def test_theorem2_stepsize():
    L, mu, n, d, T = 4.0, 1.0, 16, 4, 10_000
    s = StepSizeSchedule("theorem2", n=n, L=L, mu=mu, d=d, T=T)
    first = 1 / (100 * n * d * d * (L / mu) * L)
    second = 16 * math.log(n * (T + 1) ** 2) / (n * (T + 1) * mu)
    assert effective_stepsize(s, 0) == pytest.approx(min(first, second), rel=1e-14)
    with pytest.raises(ValueError):
        effective_stepsize(StepSizeSchedule("theorem2", n=n, L=L, mu=mu, d=d, T=2 * d - 1), 0)


@pytest.mark.parametrize("kind", ["theorem1", "theorem2"])
def test_theorem_schedules_need_constants(kind):
    with pytest.raises(ValueError, match="needs"):
        effective_stepsize(StepSizeSchedule(kind, n=4, d=1, T=10), 0)


@pytest.mark.parametrize(
    "kwargs", [dict(kind="bogus"), dict(base=0.0), dict(decay_factor=0.0), dict(decay_factor=1.5), dict(decay_interval=0)]
)
def test_invalid_schedules(kwargs):
    with pytest.raises(ValueError):
        StepSizeSchedule(**kwargs)


def test_depth_one_tree_lags_centralized_by_one_step():
    # B >= n - 1 gives a star: the root's tracker is last round's gradient sum
    # plus its own correction, so it does not reproduce centralized SGD exactly.
    prob = generate_logistic(8, 4, 20, 0.8, 0.01, seed=9)
    tree = build_bary_tree(8, 8)
    assert tree.d == 1
    streams = agent_streams(0, 8)
    state = btpp_init(prob, np.zeros(4), streams)
    for _ in range(5):
        nxt = btpp_step(state, tree, 0.05, prob, streams)
        lagged = state.G_prev.sum(axis=0) + nxt.G_prev[0] - state.G_prev[0]
        np.testing.assert_allclose(nxt.Y[0], lagged, rtol=1e-13, atol=1e-15)
        state = nxt
    central = baseline_init(prob, np.zeros(4))
    for _ in range(5):
        central = centralized_sgd_step(central, 0.05 / 8, prob, streams)
    assert not np.allclose(central.X[0], state.X[0], rtol=1e-12)
