import time

import numpy as np
import pytest

from robust_ssl import autodiff as ad
from robust_ssl.autodiff import Tensor
from robust_ssl.bilevel import (BilevelConfig, BilevelError, NeumannDivergenceError,
                                NonFiniteError, TrainingObjective, inner_unroll,
                                meta_weight_gradient, model_step, neumann_inverse_hvp,
                                outer_step, resolve_run, train)
from robust_ssl.data import SyntheticSpec, make_dataset
from robust_ssl.losses import LossConfig, validation_loss
from robust_ssl.nn import Model, ModelSpec, init_params
from robust_ssl.oracles import (check_meta_ift, meta_ift_gap, neumann_error, numeric_gradient,
                                quadratic_bilevel_trace, relative_error)
from robust_ssl.reweight import init_weights

SMALL = SyntheticSpec(n_unlabeled_id=120, n_test=100, n_validation=20, ood_ratio=0.5)


def _quad(theta, w, salt=0):
    # L_T = theta^2 / 2 + w theta
    w = ad.constant(0.0) if w is None else w
    return ad.add(ad.mul(0.5, ad.sum(ad.mul(theta, theta))), ad.sum(ad.mul(w, theta)))


def test_inner_unroll_analytic_step():
    out = inner_unroll(_quad, np.array([1.0]), Tensor(np.array([0.0])), 1, 0.1)
    assert out.data[0] == pytest.approx(0.9)


def test_inner_unroll_matches_hand_iteration_and_keeps_start():
    start = np.array([2.0])
    w = Tensor(np.array([0.5]), requires_grad=True)
    out = inner_unroll(_quad, start, w, 4, 0.3)
    th = 2.0
    for _ in range(4):
        th -= 0.3 * (th + 0.5)
    assert out.data[0] == pytest.approx(th)
    assert start[0] == 2.0
    with pytest.raises(BilevelError):
        inner_unroll(_quad, start, w, 0, 0.3)


def test_meta_gradient_through_unroll_analytic():
    # L_T = theta^2/2 + w theta, L_V = theta*^2/2, J=1: dL_V/dw = -alpha theta*
    alpha = 0.1
    w = Tensor(np.array([0.3]), requires_grad=True)
    ts = inner_unroll(_quad, np.array([1.0]), w, 1, alpha)
    (g,) = ad.grad(ad.mul(0.5, ad.sum(ad.mul(ts, ts))), [w])
    assert g.data[0] == pytest.approx(-alpha * ts.data[0])


def test_zero_alpha_gives_no_coupling():
    w = Tensor(np.array([0.3]), requires_grad=True)
    ts = inner_unroll(_quad, np.array([1.0]), w, 1, 1e-300)
    (g,) = ad.grad(ad.sum(ad.mul(ts, ts)), [w])
    assert abs(g.data[0]) < 1e-250


def _hvp_loss(diag):
    t = Tensor(np.zeros(len(diag)), requires_grad=True)
    return ad.mul(0.5, ad.sum(ad.mul(ad.mul(t, t), np.asarray(diag, dtype=float)))), t


def test_neumann_identity_hessian():
    loss, t = _hvp_loss([1.0, 1.0, 1.0])
    v = np.array([1.0, -2.0, 3.0])
    for p in (0, 1, 5):
        np.testing.assert_allclose(neumann_inverse_hvp(loss, t, v, p, 1.0), v)


def test_neumann_p0_is_scaled_v():
    loss, t = _hvp_loss([2.0, 4.0])
    np.testing.assert_allclose(neumann_inverse_hvp(loss, t, [1.0, 1.0], 0, 0.3), [0.3, 0.3])


def test_neumann_diagonal_inverse():
    loss, t = _hvp_loss([2.0, 4.0])
    v = np.array([1.0, 2.0])
    np.testing.assert_allclose(neumann_inverse_hvp(loss, t, v, 50, 0.2), [0.5, 0.5], atol=1e-4)


def test_neumann_matches_dense_solve_and_improves_with_order():
    assert neumann_error(0.4, 50) < 1e-4
    errs = [neumann_error(0.3, p) for p in (1, 5, 10, 20, 50)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


def test_neumann_divergence_is_reported():
    with pytest.raises(NeumannDivergenceError, match="scale"):
        neumann_error(10.0)


def test_neumann_shape_check():
    loss, t = _hvp_loss([1.0, 1.0])
    with pytest.raises(ad.ShapeError):
        neumann_inverse_hvp(loss, t, np.ones(3), 2, 0.1)


def test_ift_formula_on_analytic_quadratic():
    # L_T = theta^2/2 - w theta, L_V = (theta - 1)^2/2: theta*(w) = w, dL_V/dw = w - 1
    w0 = 0.5
    th = Tensor(np.array([w0]), requires_grad=True)
    w = Tensor(np.array([w0]), requires_grad=True)
    lt = ad.sub(ad.mul(0.5, ad.sum(ad.mul(th, th))), ad.sum(ad.mul(w, th)))
    gv = th.data - 1.0
    q = neumann_inverse_hvp(lt, th, gv, 50, 0.5)
    g = -ad.mixed_second_derivative_vector_product(lt, th, w, q).data
    assert g[0] == pytest.approx(w0 - 1.0, abs=1e-4)


def test_meta_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    spec = ModelSpec((2, 4, 2), "WBN")
    params = init_params(spec)
    model = Model(spec, params.norms)
    ws = init_weights(3, rng.integers(0, 3, 10))
    ws.cluster_weights = np.array([0.4, 0.7, 0.9])
    obj = TrainingObjective(model, rng.standard_normal((4, 2)), np.array([0, 1, 0, 1]),
                            rng.standard_normal((10, 2)), np.arange(10), ws,
                            LossConfig(method="pseudo-label", pseudo_label_threshold=0.3), 7)
    xv, yv = rng.standard_normal((8, 2)), np.arange(8) % 2
    cw = Tensor(ws.cluster_weights, requires_grad=True)
    ts = inner_unroll(obj, params.theta, cw, 2, 0.5)
    g = meta_weight_gradient(model, ts, cw, xv, yv)

    def f(w):
        t2 = inner_unroll(obj, params.theta, ad.constant(w), 2, 0.5, create_graph=False)
        return float(validation_loss(model, t2.data, xv, yv, "batch").data)

    assert relative_error(g, numeric_gradient(f, ws.cluster_weights, 1e-4)) < 1e-3


def test_meta_equals_ift_order_zero():
    assert meta_ift_gap(0, "NBN") <= 1e-8
    assert meta_ift_gap(1, "WBN", method="pi-model") <= 1e-8
    assert check_meta_ift(20)[0].passed


def test_convergence_trend_on_quadratic():
    trace = quadratic_bilevel_trace(400)
    running = np.minimum.accumulate(trace)
    assert running[-1] < trace[0] / 10
    assert np.all(np.diff(running) <= 0)


def test_outer_step_clips_and_respects_beta():
    ws = init_weights(3)
    ws.cluster_weights = np.array([0.5, 0.5, 0.5])
    np.testing.assert_array_equal(outer_step(ws, np.zeros(3), 0.1).cluster_weights, 0.5)
    np.testing.assert_array_equal(outer_step(ws, np.ones(3) * 9, 0.0).cluster_weights, 0.5)
    np.testing.assert_allclose(outer_step(ws, np.array([10.0, -10.0, 1.0]), 0.1).cluster_weights,
                               [0.0, 1.0, 0.4])
    with pytest.raises(NonFiniteError):
        outer_step(ws, np.array([np.nan, 0, 0]), 0.1)


def test_model_step_with_zero_weights_is_supervised_step():
    rng = np.random.default_rng(1)
    spec = ModelSpec((2, 4, 2))
    model = Model(spec)
    theta = init_params(spec).theta
    ws = init_weights(2, np.array([0, 1, 0, 1]))
    ws.cluster_weights = np.zeros(2)
    xl, yl = rng.standard_normal((4, 2)), np.array([0, 1, 0, 1])
    obj = TrainingObjective(model, xl, yl, rng.standard_normal((4, 2)), np.arange(4), ws,
                            LossConfig(), 0)
    a, _ = model_step(obj, theta, 0.1)
    sup = TrainingObjective(model, xl, yl, np.zeros((0, 2)), np.zeros(0, dtype=int), ws,
                            LossConfig(), 0)
    b, _ = model_step(sup, theta, 0.1)
    np.testing.assert_allclose(a, b, atol=1e-14)
    a2, _ = model_step(obj, theta, 0.1)
    np.testing.assert_array_equal(a, a2)


@pytest.mark.parametrize("bad", [dict(algorithm="cg"), dict(inner_steps=0), dict(neumann_order=-1),
                                 dict(alpha=0), dict(beta=-1), dict(neumann_scale=0),
                                 dict(batch_val=0), dict(curvature_at="x"),
                                 dict(validation_norm="weighted")])
def test_config_validation(bad):
    with pytest.raises(BilevelError):
        BilevelConfig(**bad)


def test_resolve_run_invariants():
    spec = ModelSpec((2, 4, 2), "BN")
    cfg, s, d = resolve_run(BilevelConfig(beta=0.5), spec, LossConfig(), "baseline-ssl", 3)
    assert cfg.beta == 0.0 and s.norm_mode == "BN" and s.seed == 3
    cfg, s, d = resolve_run(BilevelConfig(), spec, LossConfig(), "robust-ift", 0)
    assert cfg.algorithm == "ift" and s.norm_mode == "WBN"
    assert d["model"]["norm_mode"] == "WBN"
    with pytest.raises(BilevelError):
        resolve_run(BilevelConfig(), spec.with_norm("WBN"), LossConfig(), "baseline-ssl", 0)
    with pytest.raises(BilevelError):
        resolve_run(BilevelConfig(), spec, LossConfig(), "robust", 0)


def _run(mode, iterations=6, norm="BN", **kw):
    ds = make_dataset(SMALL)
    return train(BilevelConfig(iterations=iterations, batch_unlabeled=16, **kw), ds,
                 ModelSpec((2, 6, 2), norm), LossConfig(), mode, seed=0, eval_every=2)


@pytest.mark.parametrize("mode", ["baseline-ssl", "supervised-only", "robust-meta", "robust-ift"])
def test_train_rows_and_finals(mode):
    rep = _run(mode, neumann_order=2)
    assert len(rep.rows) == 6
    assert rep.status == "completed"
    for key in ("test_acc", "best_val_test_acc", "mean_id_weight", "mean_ood_weight",
                "wall_time_seconds"):
        assert key in rep.final
    w = np.array(rep.final["cluster_weights"])
    assert ((w >= 0) & (w <= 1)).all()
    if mode in ("baseline-ssl", "supervised-only"):
        assert (w == 1).all()


def test_train_is_deterministic():
    a, b = _run("robust-meta"), _run("robust-meta")
    assert a.metrics_csv() == b.metrics_csv()
    assert a.fingerprint == b.fingerprint


def test_fingerprint_changes_with_config():
    assert _run("robust-meta").fingerprint != _run("robust-meta", alpha=0.2).fingerprint


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_training_aborts_with_iteration():
    ds = make_dataset(SMALL)
    ds.x_labeled[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="iteration 0"):
        train(BilevelConfig(iterations=3), ds, ModelSpec((2, 4, 2)), LossConfig(), "baseline-ssl")


def test_input_width_mismatch():
    ds = make_dataset(SMALL)
    with pytest.raises(BilevelError):
        train(BilevelConfig(iterations=1), ds, ModelSpec((3, 4, 2)), LossConfig(), "baseline-ssl")


def test_meta_cost_is_within_band_of_plain_ssl():
    # one meta iteration costs about (2 + J) plain iterations; a loose sanity band
    def per_iter(mode):
        t0 = time.perf_counter()
        train(BilevelConfig(iterations=40, batch_unlabeled=64), make_dataset(SMALL),
              ModelSpec((2, 16, 16, 2), "BN"), LossConfig(), mode, seed=0, eval_every=1000)
        return (time.perf_counter() - t0) / 40

    per_iter("baseline-ssl")  # warm-up
    ratio = min(per_iter("robust-meta") / per_iter("baseline-ssl") for _ in range(2))
    assert 0.5 * 3 <= ratio <= 2 * 3, ratio
