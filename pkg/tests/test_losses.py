import numpy as np
import pytest

from robust_ssl import autodiff as ad
from robust_ssl.losses import (EmaTeacher, LossConfig, LossError, ema_update, pi_model_loss,
                               pseudo_label_terms, robust_training_loss, supervised_loss,
                               supervised_only_loss, validation_loss, vat_direction, vat_loss)
from robust_ssl.nn import Model, ModelSpec, init_params


def _model(norm="NBN", seed=0):
    spec = ModelSpec((2, 6, 2), norm, seed=seed)
    p = init_params(spec)
    return Model(spec, p.norms), p.theta


def _batch(seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((4, 2)), np.array([0, 1, 0, 1]), rng.standard_normal((10, 2)))


def test_cross_entropy_value():
    logits = ad.constant(np.array([[2.0, 0.0], [0.0, 1.0]]))
    expect = np.mean([np.log1p(np.exp(-2.0)), np.log1p(np.exp(-1.0))])
    assert supervised_loss(logits, [0, 1]).item() == pytest.approx(expect)


def test_pseudo_label_threshold_masks_uncertain_rows():
    logits = ad.constant(np.array([[5.0, 0.0], [0.1, 0.0]]))
    terms = pseudo_label_terms(logits, 0.9).data
    assert terms[0] > 0 and terms[1] == 0


def test_pi_model_zero_for_identical_branches():
    z = ad.constant(np.random.default_rng(0).standard_normal((5, 3)))
    assert pi_model_loss(z, z).item() == pytest.approx(0.0)


def test_vat_direction_is_unit_and_loss_nonnegative():
    model, theta = _model()
    x = np.random.default_rng(1).standard_normal((6, 2))
    fwd = lambda t: model.forward(theta, t, "train")  # noqa: E731
    p = np.full((6, 2), 0.5)
    d = vat_direction(fwd, x, p, 1e-6, 1, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert vat_loss(fwd, x, LossConfig(), np.random.default_rng(0)).item() >= 0


def test_ema_teacher_update():
    t = EmaTeacher.from_student(np.zeros(3), 0.9)
    ema_update(t, np.ones(3))
    np.testing.assert_allclose(t.shadow, 0.1)


@pytest.mark.parametrize("bad", [dict(method="mixmatch"), dict(batch_layout="x"),
                                 dict(consistency_coefficient=-1), dict(vat_epsilon=0),
                                 dict(method="mean-teacher", ema_decay=1.0)])
def test_loss_config_validation(bad):
    with pytest.raises(LossError):
        LossConfig(**bad)


@pytest.mark.parametrize("method", ["pseudo-label", "pi-model", "mean-teacher", "vat"])
@pytest.mark.parametrize("norm", ["NBN", "BN", "WBN"])
def test_zero_weights_reduce_to_supervised(method, norm):
    model, theta = _model(norm)
    xl, yl, xu = _batch()
    teacher = EmaTeacher.from_student(theta, 0.9)
    cfg = LossConfig(method=method, batch_layout="separate")
    full = robust_training_loss(model, theta, xl, yl, xu, np.zeros(10), cfg,
                                np.random.default_rng(0), teacher)
    sup = supervised_only_loss(model, theta, xl, yl)
    assert full.item() == pytest.approx(sup.item(), abs=1e-12)


def test_weight_gradient_is_the_per_example_term():
    # the derivative in w is the per-example unsupervised term over |U| (NBN)
    model, theta = _model()
    xl, yl, xu = _batch()
    cfg = LossConfig(method="pseudo-label", pseudo_label_threshold=1e-9)
    w = ad.Tensor(np.ones(10), requires_grad=True)
    loss = robust_training_loss(model, theta, xl, yl, xu, w, cfg, np.random.default_rng(0))
    (g,) = ad.grad(loss, [w])
    logits = model.forward(theta, xu, "train").data
    terms = pseudo_label_terms(ad.constant(logits), 1e-9).data
    np.testing.assert_allclose(g.data, terms / 10, atol=1e-12)


def test_joint_and_separate_layouts_agree_without_normalization():
    model, theta = _model("NBN")
    xl, yl, xu = _batch()
    vals = [robust_training_loss(model, theta, xl, yl, xu, np.full(10, 0.5),
                                 LossConfig(batch_layout=lay), np.random.default_rng(3)).item()
            for lay in ("joint", "separate")]
    assert vals[0] == pytest.approx(vals[1], rel=1e-12)


def test_weights_shape_and_sign_checked():
    model, theta = _model()
    xl, yl, xu = _batch()
    with pytest.raises(LossError):
        robust_training_loss(model, theta, xl, yl, xu, np.ones(3), LossConfig(),
                             np.random.default_rng(0))
    with pytest.raises(LossError):
        robust_training_loss(model, theta, xl, yl, xu, -np.ones(10), LossConfig(),
                             np.random.default_rng(0))


def test_validation_loss_modes():
    model, theta = _model("BN")
    xv, yv = np.random.default_rng(0).standard_normal((8, 2)), np.arange(8) % 2
    before = model.norms[0].running_mean.copy()
    a = validation_loss(model, theta, xv, yv, "batch").item()
    b = validation_loss(model, theta, xv, yv, "eval").item()
    np.testing.assert_array_equal(model.norms[0].running_mean, before)
    assert a != b
    with pytest.raises(LossError):
        validation_loss(model, theta, xv[:0], yv[:0])
