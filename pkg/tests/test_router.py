import math

import numpy as np
import pytest

from steproute import router
from steproute.errors import ConfigError, TrainingError, UsageError
from steproute.router import (
    AnchorParams,
    Architecture,
    RouterParams,
    anchored_loss_and_grad,
    bce_loss_and_grad,
    decide_greedy,
    init_optimizer,
    init_params,
    logit,
    logits,
    optimizer_step,
    route_prob,
    sample_decision,
)


def linear_params(w, b):
    w = np.asarray(w, dtype=float)
    arch = Architecture("linear", len(w))
    return RouterParams(arch, np.concatenate([w, [b]]))


def finite_difference(loss_fn, values):
    grad = np.zeros_like(values)
    for i in range(len(values)):
        h = 1e-6 * max(1.0, abs(values[i]))
        up = values.copy()
        up[i] += h
        down = values.copy()
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return grad


def rel_err(a, b):
    return np.abs(a - b).max() / max(1.0, np.abs(b).max())


# ---------------------------------------------------------------------------
# logit
# ---------------------------------------------------------------------------


def test_logit_zero_params():
    p = linear_params([0.0, 0.0], 0.0)
    assert logit(p, np.array([3.0, -4.0])) == 0.0


def test_logit_linear_dot_product():
    p = linear_params([1.0, -1.0], 0.5)
    assert logit(p, np.array([2.0, 1.0])) == pytest.approx(1.5)


def test_logit_mlp_matches_reference_forward():
    rng = np.random.default_rng(0)
    arch = Architecture("mlp", input_dim=5, hidden_dim=3)
    params = RouterParams(arch, rng.normal(size=arch.n_params))
    x = rng.normal(size=5)
    # straight-line re-evaluation of the same arithmetic
    v = params.values
    w1 = v[:15].reshape(3, 5)
    b1 = v[15:18]
    w2 = v[18:21]
    b2 = v[21]
    expected = float(np.tanh(w1 @ x + b1) @ w2 + b2)
    assert logit(params, x) == pytest.approx(expected, rel=1e-12)


def test_logit_shape_mismatch():
    p = linear_params([1.0, 2.0], 0.0)
    with pytest.raises(UsageError):
        logit(p, np.array([1.0, 2.0, 3.0]))


# ---------------------------------------------------------------------------
# route_prob / decisions
# ---------------------------------------------------------------------------


def test_route_prob_zero_logit_is_half():
    for gamma in (0.5, 1.0, 1.3, 7.0):
        assert route_prob(0.0, gamma) == 0.5


def test_route_prob_ln3():
    assert route_prob(math.log(3), 1.0) == pytest.approx(0.75, abs=1e-12)


def test_route_prob_paper_temperature_value():
    # independent evaluation of the logistic function at 1.3 / 1.3
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert route_prob(1.3, 1.3) == pytest.approx(expected, abs=1e-12)
    assert route_prob(1.3, 1.3) == pytest.approx(0.731059, abs=1e-6)


def test_route_prob_rejects_bad_gamma():
    with pytest.raises(ConfigError):
        route_prob(1.0, 0.0)
    with pytest.raises(ConfigError):
        route_prob(1.0, -2.0)


def test_route_prob_symmetry():
    for ell in (0.1, 0.9, 3.0, 17.0):
        for gamma in (0.5, 1.3, 4.0):
            assert route_prob(-ell, gamma) == pytest.approx(
                1.0 - route_prob(ell, gamma), abs=1e-12
            )


def test_temperature_strictly_flattens():
    # |sigma(l/gamma) - 0.5| strictly decreasing in gamma, exact comparison
    gammas = [0.5, 1.0, 1.3, 2.0, 4.0]
    for ell in (0.5, -0.5, 1.0, -1.0, 2.0, -2.0):
        gaps = [abs(route_prob(ell, g) - 0.5) for g in gammas]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_greedy_is_gamma_invariant():
    for ell in (-2.0, -0.3, 0.4, 1.7):
        decisions = {decide_greedy(route_prob(ell, g)) for g in (0.5, 1.0, 1.3, 2.0, 4.0)}
        assert decisions == {int(ell >= 0)}


def test_sample_decision_degenerate():
    rng = np.random.default_rng(1)
    assert all(sample_decision(0.0, rng) == 0 for _ in range(100))
    assert all(sample_decision(1.0, rng) == 1 for _ in range(100))


def test_sample_decision_frequency():
    rng = np.random.default_rng(2)
    n = 100_000
    draws = sum(sample_decision(0.3, rng) for _ in range(n))
    se = math.sqrt(0.3 * 0.7 / n)
    assert abs(draws / n - 0.3) <= 3 * se


def test_decide_greedy_boundary():
    assert decide_greedy(0.5, 0.5) == 1  # tie routes to cloud
    assert decide_greedy(0.49, 0.5) == 0
    assert decide_greedy(0.8, 0.9) == 0
    with pytest.raises(UsageError):
        decide_greedy(0.5, 1.0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_bce_near_zero_when_confident_and_correct():
    p = linear_params([20.0], 0.0)
    X = np.array([[1.0], [-1.0]])
    y = np.array([1, 0])
    loss, _ = bce_loss_and_grad(p, X, y)
    assert loss < 1e-8


def test_bce_single_example_half_prob():
    p = linear_params([0.0, 0.0], 0.0)
    loss, _ = bce_loss_and_grad(p, np.array([[1.0, 2.0]]), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_bce_empty_batch_rejected():
    p = linear_params([0.0], 0.0)
    with pytest.raises(UsageError):
        bce_loss_and_grad(p, np.zeros((0, 1)), np.zeros(0))


def test_bce_loss_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = linear_params(rng.normal(size=4), rng.normal())
        X = rng.normal(size=(8, 4))
        y = rng.integers(0, 2, size=8)
        loss, _ = bce_loss_and_grad(p, X, y)
        assert loss >= 0.0


@pytest.mark.parametrize("kind,hidden", [("linear", 0), ("mlp", 4)])
def test_bce_gradient_matches_finite_differences(kind, hidden):
    rng = np.random.default_rng(4)
    arch = Architecture(kind, input_dim=6, hidden_dim=hidden)
    for _ in range(5):
        params = RouterParams(arch, rng.normal(scale=0.8, size=arch.n_params))
        X = rng.normal(size=(12, 6))
        y = rng.integers(0, 2, size=12)

        def loss_at(values):
            return bce_loss_and_grad(RouterParams(arch, values.copy()), X, y)[0]

        _, grad = bce_loss_and_grad(params, X, y)
        fd = finite_difference(loss_at, params.values)
        assert rel_err(grad, fd) <= 1e-5


def test_anchored_beta_zero_equals_bce():
    rng = np.random.default_rng(5)
    arch = Architecture("linear", 3)
    params = RouterParams(arch, rng.normal(size=arch.n_params))
    anchor = AnchorParams.freeze(RouterParams(arch, rng.normal(size=arch.n_params)))
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, size=6)
    l0, g0 = bce_loss_and_grad(params, X, y)
    l1, g1 = anchored_loss_and_grad(params, anchor, X, y, beta=0.0)
    assert l1 == l0
    np.testing.assert_array_equal(g0, g1)


def test_anchored_regulariser_zero_at_anchor():
    rng = np.random.default_rng(6)
    arch = Architecture("linear", 3)
    params = RouterParams(arch, rng.normal(size=arch.n_params))
    anchor = AnchorParams.freeze(params)
    X = rng.normal(size=(4, 3))
    y = rng.integers(0, 2, size=4)
    for beta in (0.0, 0.1, 10.0):
        loss_b, grad_b = anchored_loss_and_grad(params, anchor, X, y, beta=beta)
        loss_0, grad_0 = anchored_loss_and_grad(params, anchor, X, y, beta=0.0)
        assert loss_b == loss_0
        np.testing.assert_array_equal(grad_b, grad_0)


@pytest.mark.parametrize("kind,hidden", [("linear", 0), ("mlp", 3)])
def test_anchored_gradient_matches_finite_differences(kind, hidden):
    rng = np.random.default_rng(7)
    arch = Architecture(kind, input_dim=5, hidden_dim=hidden)
    anchor = AnchorParams.freeze(RouterParams(arch, rng.normal(size=arch.n_params)))
    for beta in (0.1, 1.7):
        params = RouterParams(arch, rng.normal(size=arch.n_params))
        X = rng.normal(size=(10, 5))
        y = rng.integers(0, 2, size=10)

        def loss_at(values):
            return anchored_loss_and_grad(
                RouterParams(arch, values.copy()), anchor, X, y, beta=beta
            )[0]

        _, grad = anchored_loss_and_grad(params, anchor, X, y, beta=beta)
        fd = finite_difference(loss_at, params.values)
        assert rel_err(grad, fd) <= 1e-5


def test_anchored_shape_mismatch_rejected():
    params = linear_params([1.0, 2.0], 0.0)
    anchor = AnchorParams.freeze(linear_params([1.0, 2.0, 3.0], 0.0))
    with pytest.raises(UsageError):
        anchored_loss_and_grad(params, anchor, np.ones((1, 2)), np.array([1]), 0.1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_optimizer_zero_gradient_keeps_params():
    params = linear_params([1.0, -2.0], 0.5)
    before = params.values.copy()
    opt = init_optimizer(params, lr=0.1)
    params, opt = optimizer_step(params, opt, np.zeros(3))
    np.testing.assert_array_equal(params.values, before)
    assert opt.step_count == 1


def test_optimizer_descends_quadratic():
    arch = Architecture("linear", 1)
    params = RouterParams(arch, np.array([5.0, 0.0]))
    opt = init_optimizer(params, lr=0.1)

    def objective(v):
        return (v[0] - 1.0) ** 2

    start = objective(params.values)
    grad = np.array([2 * (params.values[0] - 1.0), 0.0])
    params, opt = optimizer_step(params, opt, grad)
    assert objective(params.values) < start


def test_optimizer_rejects_nonfinite_gradient():
    params = linear_params([1.0], 0.0)
    opt = init_optimizer(params, lr=0.1)
    with pytest.raises(TrainingError):
        optimizer_step(params, opt, np.array([np.nan, 0.0]))


def test_optimizer_solves_separable_logistic():
    rng = np.random.default_rng(8)
    n = 60
    X = np.vstack([
        rng.normal(loc=[2.0, 2.0], scale=0.4, size=(n // 2, 2)),
        rng.normal(loc=[-2.0, -2.0], scale=0.4, size=(n // 2, 2)),
    ])
    y = np.array([1] * (n // 2) + [0] * (n // 2))
    params = init_params(Architecture("linear", 2), seed=0)
    opt = init_optimizer(params, lr=0.05)
    for _ in range(500):
        _, grad = bce_loss_and_grad(params, X, y)
        params, opt = optimizer_step(params, opt, grad)
    preds = (logits(params, X) >= 0).astype(int)
    assert (preds == y).mean() == 1.0


def test_weight_decay_shrinks_params():
    params = linear_params([4.0], 0.0)
    opt = init_optimizer(params, lr=0.01, weight_decay=0.5)
    params, _ = optimizer_step(params, opt, np.zeros(2))
    assert abs(params.values[0]) < 4.0


def test_init_params_deterministic_and_bounded():
    arch = Architecture("mlp", input_dim=7, hidden_dim=5)
    a = init_params(arch, seed=3)
    b = init_params(arch, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.abs(a.values).max() <= 0.05
    # biases start at zero
    h, d = 5, 7
    np.testing.assert_array_equal(a.values[h * d : h * d + h], np.zeros(h))
    assert a.values[-1] == 0.0
