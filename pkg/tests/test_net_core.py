import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invtransfer.errors import CacheError, NumericError, ShapeError
from invtransfer.net_core import (
    LayerParams,
    NormNet,
    OptimizerState,
    backward,
    flat_grads,
    forward,
    init_net,
    opt_step,
    project_norm,
    rebalance,
    weight_norm,
)


def random_net(rng, dims, budget=1e6, scale=1.0, clamp=None):
    layers = [
        LayerParams(rng.normal(scale=scale, size=(o, i)), rng.normal(scale=scale, size=o))
        for i, o in zip(dims, dims[1:])
    ]
    return NormNet(layers, budget, clamp)


def loop_forward(net, x):
    """Scalar-loop evaluation of one input row."""
    a = list(x)
    for k, layer in enumerate(net.layers):
        z = []
        for i in range(layer.out_dim):
            s = layer.bias[i]
            for j in range(layer.in_dim):
                s += layer.weight[i, j] * a[j]
            z.append(s)
        a = [max(v, 0.0) for v in z] if k < len(net.layers) - 1 else z
    if net.output_clamp is not None:
        a = [min(max(v, -net.output_clamp), net.output_clamp) for v in a]
    return np.array(a)


def loop_kappa(net):
    last = net.layers[-1].weight
    kappa = max(sum(abs(last[i, j]) for j in range(last.shape[1])) for i in range(last.shape[0]))
    for layer in net.layers[:-1]:
        rows = []
        for i in range(layer.out_dim):
            rows.append(sum(abs(w) for w in layer.weight[i]) + abs(layer.bias[i]))
        kappa *= max(max(rows), 1.0)
    return kappa


def fd_check(net, X, T, h=1e-5):
    """Central-difference gradients of 0.5*||f(X) - T||^2 for every parameter."""
    Y, cache = forward(net, X)
    grads, gx = backward(net, cache, Y - T)
    analytic = flat_grads(net, grads)
    worst = 0.0
    for name, p in net.params().items():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            lp = 0.5 * np.sum((forward(net, X)[0] - T) ** 2)
            p[i] = old - h
            lm = 0.5 * np.sum((forward(net, X)[0] - T) ** 2)
            p[i] = old
            num[i] = (lp - lm) / (2 * h)
        err = np.abs(num - analytic[name]).max() / max(np.abs(num).max(), np.abs(analytic[name]).max(), 1e-8)
        worst = max(worst, err)
    net.touch()
    return worst


def test_zero_net_maps_to_zero():
    net = NormNet([LayerParams(np.zeros((4, 3)), np.zeros(4)), LayerParams(np.zeros((2, 4)), np.zeros(2))], 1.0)
    Y, _ = forward(net, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.array_equal(Y, np.zeros((5, 2)))


def test_identity_layer():
    net = NormNet([LayerParams(np.eye(3), np.zeros(3))], 1.0)
    Y, _ = forward(net, np.eye(3))
    assert np.array_equal(Y, np.eye(3))


def test_forward_matches_scalar_loop():
    rng = np.random.default_rng(1)
    net = random_net(rng, [4, 5, 2])
    X = rng.normal(size=(3, 4))
    Y, _ = forward(net, X)
    for i in range(3):
        np.testing.assert_allclose(Y[i], loop_forward(net, X[i]), rtol=1e-12, atol=1e-12)


def test_clamp_bounds_output():
    rng = np.random.default_rng(2)
    net = random_net(rng, [3, 6, 2], scale=5.0, clamp=0.7)
    X = rng.normal(size=(50, 3))
    Y, _ = forward(net, X)
    assert np.all(np.abs(Y) <= 0.7)
    np.testing.assert_allclose(Y[0], loop_forward(net, X[0]))


def test_dimension_mismatch():
    net = random_net(np.random.default_rng(0), [3, 2])
    with pytest.raises(ShapeError):
        forward(net, np.zeros((4, 5)))


def test_zero_cotangent_gives_zero_grads():
    rng = np.random.default_rng(3)
    net = random_net(rng, [3, 4, 2])
    Y, cache = forward(net, rng.normal(size=(6, 3)))
    grads, gx = backward(net, cache, np.zeros_like(Y))
    assert all(not dW.any() and not db.any() for dW, db in grads)
    assert not gx.any()


def test_scalar_linear_closed_form():
    net = NormNet([LayerParams([[2.0]], [0.5])], 10.0)
    x = np.array([[1.5]])
    Y, cache = forward(net, x)
    (dW, db), = backward(net, cache, np.ones((1, 1)))[0]
    assert dW[0, 0] == 1.5 and db[0] == 1.0


def test_relu_derivative_at_zero_is_zero():
    net = NormNet([LayerParams([[1.0]], [0.0]), LayerParams([[1.0]], [0.0])], 10.0)
    Y, cache = forward(net, np.zeros((1, 1)))
    grads, gx = backward(net, cache, np.ones((1, 1)))
    assert gx[0, 0] == 0.0 and grads[0][0][0, 0] == 0.0


def test_stale_cache_rejected():
    rng = np.random.default_rng(4)
    net = random_net(rng, [2, 3, 1])
    Y, cache = forward(net, rng.normal(size=(4, 2)))
    project_norm(net)
    with pytest.raises(CacheError):
        backward(net, cache, np.ones_like(Y))
    other = random_net(rng, [2, 3, 1])
    with pytest.raises(CacheError):
        backward(other, forward(net, np.ones((4, 2)))[1], np.ones_like(Y))


def test_cotangent_shape_checked():
    rng = np.random.default_rng(5)
    net = random_net(rng, [2, 3, 1])
    _, cache = forward(net, rng.normal(size=(4, 2)))
    with pytest.raises(ShapeError):
        backward(net, cache, np.ones((3, 1)))


def test_three_layer_finite_differences():
    rng = np.random.default_rng(6)
    net = random_net(rng, [3, 5, 4, 2])
    X = rng.normal(size=(7, 3))
    assert fd_check(net, X, rng.normal(size=(7, 2))) <= 1e-4


def test_gradient_correctness_twenty_nets():
    rng = np.random.default_rng(7)
    for _ in range(20):
        depth = int(rng.integers(1, 5))
        dims = [int(rng.integers(1, 6))] + [int(rng.integers(2, 17)) for _ in range(depth - 1)] + [int(rng.integers(1, 4))]
        net = random_net(rng, dims, scale=0.7)
        X = rng.normal(size=(int(rng.integers(2, 6)), dims[0]))
        assert fd_check(net, X, rng.normal(size=(X.shape[0], dims[-1]))) <= 1e-4


def test_input_cotangent_finite_differences():
    rng = np.random.default_rng(8)
    net = random_net(rng, [3, 6, 2])
    X = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 2))
    _, cache = forward(net, X)
    _, gx = backward(net, cache, c)
    h = 1e-6
    num = np.zeros_like(X)
    for i in range(4):
        for j in range(3):
            E = np.zeros_like(X)
            E[i, j] = h
            num[i, j] = (np.sum(net(X + E) * c) - np.sum(net(X - E) * c)) / (2 * h)
    np.testing.assert_allclose(gx, num, rtol=1e-6, atol=1e-8)


def test_weight_norm_single_layer():
    net = NormNet([LayerParams([[1.0]], [0.0])], 5.0)
    assert weight_norm(net) == 1.0


def test_weight_norm_two_layers():
    net = NormNet([LayerParams([[1.0, 0.5]], [0.5]), LayerParams([[3.0]], [0.0])], 100.0)
    assert weight_norm(net) == 6.0


def test_weight_norm_product_rule():
    l0 = LayerParams([[1.0, 0.5]], [0.5])  # block row sum 2
    l1 = LayerParams([[2.0], [-1.0]], [1.0, 0.0])  # block row sums 3 and 1
    l2 = LayerParams([[1.5, -1.5]], [0.0])  # final row sum 3
    net = NormNet([l0, l1, l2], 100.0)
    assert weight_norm(net) == 18.0
    two = NormNet([LayerParams([[1.5, -1.0]], [0.5]), LayerParams([[3.0]], [0.0])], 100.0)
    assert weight_norm(two) == 9.0


def test_weight_norm_ignores_final_bias_and_floors_hidden_at_one():
    net = NormNet([LayerParams([[0.1]], [0.1]), LayerParams([[3.0]], [7.0])], 100.0)
    assert weight_norm(net) == 3.0


def test_weight_norm_matches_row_sum_loop():
    rng = np.random.default_rng(9)
    for _ in range(10):
        net = random_net(rng, [3, 4, 5, 2])
        assert weight_norm(net) == pytest.approx(loop_kappa(net), rel=1e-13)


def test_projection_keeps_feasible_net():
    rng = np.random.default_rng(10)
    net = random_net(rng, [2, 3, 1], scale=0.3)
    k = weight_norm(net)
    net.norm_budget = 2 * k
    before = [l.weight.copy() for l in net.layers]
    project_norm(net)
    assert all(np.array_equal(a, l.weight) for a, l in zip(before, net.layers))


def test_projection_scales_function():
    rng = np.random.default_rng(11)
    net = random_net(rng, [3, 4, 2])
    K = weight_norm(net) / 4
    net.norm_budget = K
    X = rng.uniform(size=(5, 3))
    y0 = net(X)
    project_norm(net)
    np.testing.assert_allclose(net(X), y0 / 4, rtol=1e-12)
    assert weight_norm(net) == pytest.approx(K, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_projection_feasibility(seed, budget):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [3, 5, 4, 2], budget=budget, scale=2.0)
    project_norm(net)
    assert weight_norm(net) <= budget + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lipschitz_bound_linf(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [4, 6, 5, 3], budget=3.0)
    project_norm(net)
    K = net.norm_budget
    x, xp = rng.uniform(size=(2, 4))
    lhs = np.abs(net(x[None]) - net(xp[None])).max()
    assert lhs <= K * np.abs(x - xp).max() + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_final_layer_positive_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [3, 4, 2])
    X = rng.normal(size=(6, 3))
    y0 = net(X)
    net.layers[-1].weight *= c
    net.layers[-1].bias *= c
    net.touch()
    np.testing.assert_allclose(net(X), c * y0, rtol=1e-12, atol=1e-12)


def test_rebalance_preserves_function_and_lowers_norm():
    rng = np.random.default_rng(12)
    net = random_net(rng, [3, 8, 8, 2], scale=2.0)
    X = rng.normal(size=(10, 3))
    y0, k0 = net(X), weight_norm(net)
    rebalance(net)
    np.testing.assert_allclose(net(X), y0, rtol=1e-10, atol=1e-10)
    assert weight_norm(net) <= k0 * (1 + 1e-12)


def test_rebalance_puts_every_hidden_row_in_unit_ball():
    rng = np.random.default_rng(13)
    for _ in range(20):
        net = random_net(rng, [2, 5, 4, 6, 1], scale=3.0)
        X = rng.normal(size=(7, 2))
        y0, k0 = net(X), weight_norm(net)
        rebalance(net)
        for layer in net.layers[:-1]:
            rows = np.abs(layer.weight).sum(axis=1) + np.abs(layer.bias)
            assert rows.max() <= 1 + 1e-12
        np.testing.assert_allclose(net(X), y0, rtol=1e-10, atol=1e-10)
        assert weight_norm(net) <= k0 * (1 + 1e-12)


def test_init_net_is_feasible_and_deterministic():
    a = init_net(5, 2, 8, 3, 1.5, np.random.default_rng(3))
    b = init_net(5, 2, 8, 3, 1.5, np.random.default_rng(3))
    assert weight_norm(a) <= 1.5 + 1e-12
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(a.layers, b.layers))
    assert a.depth == 3 and a.width == 8
    assert all(not l.bias.any() for l in a.layers)


def test_opt_step_zero_grad_no_change():
    p = {"w": np.array([0.3, -1.2])}
    opt_step(OptimizerState(lr=0.1), p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [0.3, -1.2])


def test_opt_step_soft_threshold_exact_zero():
    p = {"w": np.array([0.5])}
    opt_step(OptimizerState(lr=0.1, l1={"w": 7.0}), p, {"w": np.zeros(1)})
    assert p["w"][0] == 0.0


def test_prox_sgd_reaches_lasso_solution():
    # min 0.5 * (w - a)^2 + t * |w| has the closed form soft(a, t) per coordinate
    a = np.array([2.0, 0.3, -0.05, -1.5])
    t = 0.4
    w = {"w": np.zeros(4)}
    state = OptimizerState(lr=0.5, method="sgd", l1={"w": t})
    for _ in range(200):
        opt_step(state, w, {"w": w["w"] - a})
    np.testing.assert_allclose(w["w"], [1.6, 0.0, 0.0, -1.1], atol=1e-12)
    assert w["w"][1] == 0.0 and w["w"][2] == 0.0


def test_opt_step_rejects_unknown_method():
    with pytest.raises(ValueError):
        opt_step(OptimizerState(method="lbfgs"), {"w": np.zeros(1)}, {"w": np.zeros(1)})


def test_opt_step_nonfinite_names_parameter():
    p = {"layer.weight": np.zeros(2)}
    with pytest.raises(NumericError, match="layer.weight"):
        opt_step(OptimizerState(), p, {"layer.weight": np.array([1.0, np.nan])})


def test_opt_step_quadratic_bowl_decreases():
    rng = np.random.default_rng(13)
    M = rng.normal(size=(4, 4))
    Q = M @ M.T + np.eye(4)
    w = {"w": rng.normal(size=4)}
    state = OptimizerState(lr=1e-3)
    loss = lambda v: 0.5 * v @ Q @ v
    prev = loss(w["w"])
    for _ in range(10):
        opt_step(state, w, {"w": Q @ w["w"]})
        cur = loss(w["w"])
        assert cur < prev
        prev = cur


def test_opt_step_deterministic():
    def run():
        rng = np.random.default_rng(14)
        net = init_net(3, 1, 6, 2, 4.0, rng)
        X = rng.normal(size=(8, 3))
        state = OptimizerState(lr=1e-2)
        params = net.params()
        for _ in range(5):
            Y, c = forward(net, X)
            g, _ = backward(net, c, Y - 1.0)
            opt_step(state, params, flat_grads(net, g))
            project_norm(net)
        return [l.weight.copy() for l in net.layers]

    a, b = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_hidden_bias_disabled_keeps_biases_fixed():
    rng = np.random.default_rng(15)
    net = init_net(3, 1, 4, 2, 10.0, rng, hidden_bias=False)
    _, cache = forward(net, rng.normal(size=(5, 3)))
    grads, _ = backward(net, cache, np.ones((5, 1)))
    assert grads[0][1].any()
    assert not grads[1][1].any() and not grads[2][1].any()
