import math

import numpy as np
import pytest

from invtransfer.dependence import dcov_brute
from invtransfer.downstream import (
    DownstreamModel,
    FineTuneConfig,
    evaluate,
    finetune,
    finetune_loss,
    head_step,
    init_downstream,
    loss_and_grads,
    predict,
    select_dstar,
)
from invtransfer.errors import FeasibilityError, InsufficientSamplesError, ShapeError
from invtransfer.net_core import LayerParams, NormNet, flat_grads, init_net, weight_norm
from invtransfer.synthetic import Dataset, Scenario, gen_downstream
from invtransfer.upstream import selector_net


def loop_net(net, x):
    a = list(x)
    for k, layer in enumerate(net.layers):
        z = [layer.bias[i] + sum(layer.weight[i, j] * a[j] for j in range(layer.in_dim)) for i in range(layer.out_dim)]
        a = [max(v, 0.0) for v in z] if k < len(net.layers) - 1 else z
    return a


def fixture_model(rng, d=5, r=3, d_star=2, q=True):
    h = init_net(d, r, 6, 2, 3.0, rng)
    qnet = init_net(d_star, 1, 4, 2, 3.0, rng) if q else None
    return DownstreamModel(h, rng.normal(size=r), rng.normal(size=(d_star, d)) * 0.5, qnet, q)


def test_zero_head_without_q_scores_zero():
    rng = np.random.default_rng(0)
    model = fixture_model(rng, q=False)
    model.F_T[:] = 0.0
    assert np.array_equal(predict(model, rng.uniform(size=(7, 5))), np.zeros(7))


def test_unit_head_reads_first_feature():
    rng = np.random.default_rng(1)
    model = fixture_model(rng, q=False)
    model.F_T[:] = [1.0, 0.0, 0.0]
    X = rng.uniform(size=(7, 5))
    np.testing.assert_array_equal(predict(model, X), model.h_ref(X)[:, 0])


def test_predict_matches_scalar_loop():
    rng = np.random.default_rng(2)
    model = fixture_model(rng)
    X = rng.uniform(size=(6, 5))
    scores = predict(model, X)
    for i in range(6):
        h = loop_net(model.h_ref, X[i])
        u = [sum(model.A[k, j] * X[i, j] for j in range(5)) for k in range(2)]
        expected = sum(f * v for f, v in zip(model.F_T, h)) + loop_net(model.q, u)[0]
        assert scores[i] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_predict_shape_error():
    model = fixture_model(np.random.default_rng(3))
    with pytest.raises(ShapeError):
        predict(model, np.zeros((4, 6)))


def test_constant_q_gives_zero_dcov():
    rng = np.random.default_rng(4)
    model = fixture_model(rng)
    for layer in model.q.layers:
        layer.weight[:] = 0.0
    model.q.layers[-1].bias[:] = 0.7
    model.q.touch()
    batch = Dataset(rng.uniform(size=(12, 5)), rng.normal(size=12), np.zeros(12, int))
    assert finetune_loss(model, batch, FineTuneConfig()).dcov == 0.0


def test_perfect_noiseless_model_has_zero_total():
    sc = Scenario(regime="complete", noise_scale=0.0)
    data = gen_downstream(sc, 40, np.random.default_rng(5))
    model = DownstreamModel(selector_net(sc.d, sc.select), sc.F_T_star.copy(), np.eye(2, 8), None, False)
    cfg = FineTuneConfig(kappa=0.0, chi=0.0, zeta=0.0, use_q=False)
    bd = finetune_loss(model, data, cfg)
    assert bd.total == pytest.approx(0.0, abs=1e-24)


def test_breakdown_matches_hand_assembly():
    rng = np.random.default_rng(6)
    model = fixture_model(rng)
    X, y = rng.uniform(size=(8, 5)), rng.normal(size=8)
    cfg = FineTuneConfig(kappa=2.5, chi=0.3, zeta=0.2)
    bd = finetune_loss(model, Dataset(X, y, np.zeros(8, int)), cfg)
    H = np.array([loop_net(model.h_ref, x) for x in X])
    Q = np.array([loop_net(model.q, model.A @ x)[0] for x in X])
    score = H @ model.F_T + Q
    fit = np.mean((score - y) ** 2)
    dc = dcov_brute(H, Q).value
    l1, fro = np.abs(model.F_T).sum(), (model.A**2).sum()
    assert bd.fit == pytest.approx(fit, rel=1e-12)
    assert bd.dcov == pytest.approx(dc, rel=1e-9)
    assert bd.l1 == pytest.approx(l1, rel=1e-12) and bd.fro == pytest.approx(fro, rel=1e-12)
    assert abs(bd.total - (bd.fit + 2.5 * bd.dcov + 0.3 * bd.l1 + 0.2 * bd.fro)) <= 1e-10


def test_dcov_needs_four_rows():
    rng = np.random.default_rng(7)
    model = fixture_model(rng)
    with pytest.raises(InsufficientSamplesError):
        finetune_loss(model, Dataset(rng.uniform(size=(3, 5)), np.zeros(3), np.zeros(3, int)), FineTuneConfig())


def fd_objective_check(loss_kind, seed):
    rng = np.random.default_rng(seed)
    model = fixture_model(rng)
    model.F_T[:] = [0.8, -0.6, 0.4]  # away from the L1 kink
    X = rng.uniform(size=(16, 5))
    y = (rng.uniform(size=16) < 0.5).astype(float) if loss_kind == "logistic" else rng.normal(size=16)
    cfg = FineTuneConfig(kappa=3.0, chi=0.2, zeta=0.15, loss_kind=loss_kind)
    chi = 0.2

    def total():
        model.q.touch()
        return loss_and_grads(model, model.h_ref(X), X, y, cfg, chi)[0].total

    _, gF, gA, q_grads = loss_and_grads(model, model.h_ref(X), X, y, cfg, chi, l1_subgradient=True)
    analytic = {"F_T": gF, "A": gA, **flat_grads(model.q, q_grads)}
    arrays = {"F_T": model.F_T, "A": model.A, **model.q.params()}
    worst, eps = 0.0, 1e-6
    for name, p in arrays.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = total()
            p[idx] = old - eps
            down = total()
            p[idx] = old
            num[idx] = (up - down) / (2 * eps)
        scale = max(np.abs(num).max(), np.abs(analytic[name]).max(), 1e-8)
        worst = max(worst, np.abs(num - analytic[name]).max() / scale)
    return worst


@pytest.mark.parametrize("loss_kind", ["squared", "logistic"])
def test_full_objective_gradient_matches_finite_differences(loss_kind):
    assert fd_objective_check(loss_kind, 8) <= 1e-4


def test_head_step_closed_form():
    H = np.diag([2.0, 1.0])
    assert head_step(H, "squared") == pytest.approx(1.0 / (2.0 * 2.0))
    assert head_step(H, "logistic") == pytest.approx(1.0 / (0.25 * 2.0))


def test_complete_regime_recovers_head():
    sc = Scenario(regime="complete", noise_scale=0.0)
    rng = np.random.default_rng(9)
    data = gen_downstream(sc, 400, rng)
    cfg = FineTuneConfig(kappa=0.0, zeta=0.0, chi=1e-4, use_q=False, epochs=100)
    model, _ = finetune(selector_net(sc.d, sc.select), data, cfg, rng)
    np.testing.assert_allclose(model.F_T, sc.F_T_star, atol=1e-2)


def test_none_regime_shrinks_head():
    sc = Scenario(regime="none")
    small = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        data = gen_downstream(sc, 200, rng)
        model, _ = finetune(selector_net(sc.d, sc.select), data, FineTuneConfig(epochs=60), rng)
        small += np.abs(model.F_T).sum() <= 0.1
    assert small >= 8


def test_margin_classification_fits():
    rng = np.random.default_rng(10)
    X = rng.uniform(size=(2000, 8))
    score = 12.0 * (X[:, 0] - 0.5) - 6.0 * (X[:, 2] - 0.5)
    keep = np.abs(score) >= 2
    data = Dataset(X[keep][:300], (score[keep][:300] > 0).astype(float), np.zeros(300, int))
    cfg = FineTuneConfig(loss_kind="logistic", epochs=150)
    model, _ = finetune(selector_net(8, (0, 1, 2)), data, cfg, rng)
    assert evaluate(model, data, "logistic")["accuracy"] >= 0.95


def test_freeze_and_constraints_hold_every_step():
    sc = Scenario()
    rng = np.random.default_rng(11)
    data = gen_downstream(sc, 96, rng)
    h = init_net(8, 3, 8, 2, 5.0, rng)
    before = [(l.weight.copy(), l.bias.copy()) for l in h.layers]
    cfg = FineTuneConfig(epochs=5, radius=0.5, q_norm_budget=3.0)
    seen = []

    def checks(model):
        assert np.linalg.norm(model.F_T) <= 0.5 + 1e-12
        assert np.linalg.norm(model.A) <= 0.5 + 1e-12
        assert weight_norm(model.q) <= 3.0 + 1e-9
        seen.append(1)

    model, hist = finetune(h, data, cfg, rng, checks=checks)
    assert len(seen) == 5 * 3 and len(hist) == 5
    for (w, b), layer in zip(before, h.layers):
        assert np.array_equal(w, layer.weight) and np.array_equal(b, layer.bias)
    for layer, ref in zip(model.h_ref.layers, h.layers):
        assert np.array_equal(layer.weight, ref.weight)


def test_infeasible_representation_rejected():
    h = NormNet([LayerParams(np.full((1, 8), 2.0), np.zeros(1))], 1.0)
    with pytest.raises(FeasibilityError):
        finetune(h, gen_downstream(Scenario(), 20, np.random.default_rng(0)), FineTuneConfig(epochs=1), np.random.default_rng(0))


def test_finetune_deterministic():
    sc = Scenario()
    h = selector_net(sc.d, sc.select)
    data = gen_downstream(sc, 64, np.random.default_rng(12))
    a, _ = finetune(h, data, FineTuneConfig(epochs=3), np.random.default_rng(13))
    b, _ = finetune(h, data, FineTuneConfig(epochs=3), np.random.default_rng(13))
    assert np.array_equal(a.F_T, b.F_T) and np.array_equal(a.A, b.A)
    assert all(np.array_equal(x.weight, y.weight) for x, y in zip(a.q.layers, b.q.layers))


def test_init_A_row_orthonormal_unit_frobenius():
    model = init_downstream(selector_net(8, (0, 1, 2)), FineTuneConfig(d_star=3), np.random.default_rng(14))
    G = model.A @ model.A.T
    np.testing.assert_allclose(G, np.eye(3) / 3, atol=1e-12)
    assert np.linalg.norm(model.A) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        FineTuneConfig(batch_size=4)
    FineTuneConfig(batch_size=4, kappa=0.0)
    with pytest.raises(ValueError):
        FineTuneConfig(loss_kind="hinge")
    assert FineTuneConfig().chi_for(400) == pytest.approx(0.05)


def test_evaluate_perfect_regressor():
    sc = Scenario(regime="complete", noise_scale=0.0)
    data = gen_downstream(sc, 50, np.random.default_rng(15))
    model = DownstreamModel(selector_net(sc.d, sc.select), sc.F_T_star.copy(), np.eye(2, 8), None, False)
    assert evaluate(model, data, "squared")["loss"] == pytest.approx(0.0, abs=1e-24)


def test_evaluate_constant_half_classifier():
    rng = np.random.default_rng(16)
    data = Dataset(rng.uniform(size=(30, 8)), (rng.uniform(size=30) < 0.5).astype(float), np.zeros(30, int))
    model = DownstreamModel(selector_net(8, (0, 1, 2)), np.zeros(3), np.eye(2, 8), None, False)
    ev = evaluate(model, data, "logistic")
    assert ev["log_loss"] == pytest.approx(math.log(2.0), rel=1e-12)


def test_evaluate_matches_scalar_loop():
    rng = np.random.default_rng(17)
    model = fixture_model(rng, d=8)
    X = rng.uniform(size=(9, 8))
    y = (rng.uniform(size=9) < 0.5).astype(float)
    ev = evaluate(model, Dataset(X, y, np.zeros(9, int)), "logistic")
    losses, hits = [], 0
    for i in range(9):
        h = loop_net(model.h_ref, X[i])
        s = sum(f * v for f, v in zip(model.F_T, h)) + loop_net(model.q, model.A @ X[i])[0]
        losses.append(math.log1p(math.exp(s)) - y[i] * s)
        hits += (s > 0) == (y[i] == 1.0)
    assert ev["loss"] == pytest.approx(sum(losses) / 9, rel=1e-12)
    assert ev["accuracy"] == hits / 9


def test_select_single_candidate():
    sc = Scenario()
    rng = np.random.default_rng(18)
    tr, va = gen_downstream(sc, 64, rng), gen_downstream(sc, 32, rng)
    best, metrics = select_dstar(selector_net(sc.d, sc.select), tr, va, [2], FineTuneConfig(epochs=2))
    assert best == 2 and len(metrics) == 1


def test_select_ties_go_to_smaller():
    sc = Scenario()
    rng = np.random.default_rng(19)
    tr, va = gen_downstream(sc, 64, rng), gen_downstream(sc, 32, rng)
    cfg = FineTuneConfig(epochs=0, use_q=False)  # every candidate predicts 0
    best, metrics = select_dstar(selector_net(sc.d, sc.select), tr, va, [4, 1, 2], cfg)
    assert best == 1 and [m["d_star"] for m in metrics] == [1, 2, 4]
