import json

import numpy as np
import pytest

from robust_ssl import autodiff as ad
from robust_ssl.nn import (Model, ModelError, ModelSpec, NormState, Params, batch_norm,
                           checkpoint_dict, init_params, load_checkpoint, param_layout, predict,
                           save_checkpoint, weighted_batch_norm, weighted_moments)
from robust_ssl.oracles import check_wbn, wbn_identities


def _x(seed=0, m=16, d=3):
    return np.random.default_rng(seed).standard_normal((m, d)) * 2 + 1


def test_param_layout_counts():
    spec = ModelSpec((2, 4, 3, 2), "BN")
    layout = param_layout(spec)
    # weights + biases, plus gamma and beta for the two hidden norms
    assert layout.size == (2 * 4 + 4) + (4 * 3 + 3) + (3 * 2 + 2) + 2 * (4 + 3)


def test_layout_round_trip():
    spec = ModelSpec((2, 5, 2), "WBN")
    theta = init_params(spec).theta
    layout = param_layout(spec)
    np.testing.assert_array_equal(layout.flatten(layout.unflatten(theta)), theta)


def test_init_is_seeded():
    a = init_params(ModelSpec((2, 8, 2), seed=3)).theta
    b = init_params(ModelSpec((2, 8, 2), seed=3)).theta
    c = init_params(ModelSpec((2, 8, 2), seed=4)).theta
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("bad", [dict(layer_widths=(2, 2)), dict(layer_widths=(2, 0, 2)),
                                 dict(layer_widths=(2, 3, 2), norm_mode="LN"),
                                 dict(layer_widths=(2, 3, 2), momentum=1.0)])
def test_spec_validation(bad):
    with pytest.raises(ModelError):
        ModelSpec(**bad)


def test_batch_norm_train_output_is_standardized():
    x = _x()
    out = batch_norm(ad.constant(x), np.ones(3), np.zeros(3), NormState.fresh(3), "train").data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5))


def test_running_stats_follow_momentum():
    x = _x()
    st = NormState.fresh(3, momentum=0.1)
    batch_norm(ad.constant(x), np.ones(3), np.zeros(3), st, "train")
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(axis=0))


def test_eval_mode_uses_running_stats_and_leaves_them():
    st = NormState(np.array([1.0, 2.0]), np.array([4.0, 9.0]), epsilon=0.0 + 1e-12)
    x = np.array([[3.0, 5.0]])
    out = batch_norm(ad.constant(x), np.ones(2), np.zeros(2), st, "eval").data
    np.testing.assert_allclose(out, [[1.0, 1.0]], rtol=1e-9)
    np.testing.assert_array_equal(st.running_mean, [1.0, 2.0])


def test_single_row_train_batch_norm_is_rejected():
    with pytest.raises(ModelError):
        batch_norm(ad.constant(np.ones((1, 2))), np.ones(2), np.zeros(2), NormState.fresh(2))


def test_update_stats_false_leaves_running_stats():
    st = NormState.fresh(3)
    weighted_batch_norm(ad.constant(_x()), np.ones(16), np.ones(3), np.zeros(3), st,
                        "train", update_stats=False)
    np.testing.assert_array_equal(st.running_mean, np.zeros(3))


def test_weighted_moments_match_numpy():
    x, w = _x(), np.random.default_rng(1).uniform(0, 1, 16)
    mu, var = weighted_moments(ad.constant(x), ad.constant(w))
    np.testing.assert_allclose(mu.data, np.average(x, axis=0, weights=w))
    np.testing.assert_allclose(var.data, np.average((x - mu.data) ** 2, axis=0, weights=w))


def test_wbn_zero_weight_rows_do_not_move_statistics():
    x = _x()
    far = np.vstack([x, x[:4] + 1000.0])
    w = np.r_[np.ones(16), np.zeros(4)]
    a = weighted_batch_norm(ad.constant(far), w, np.ones(3), np.zeros(3), NormState.fresh(3),
                            "train").data[:16]
    b = batch_norm(ad.constant(x), np.ones(3), np.zeros(3), NormState.fresh(3), "train").data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_wbn_running_stats_are_weighted():
    x, w = _x(), np.r_[np.ones(8), np.zeros(8)]
    st = NormState.fresh(3)
    weighted_batch_norm(ad.constant(x), w, np.ones(3), np.zeros(3), st, "train")
    np.testing.assert_allclose(st.running_mean, 0.1 * x[:8].mean(axis=0))


@pytest.mark.parametrize("w", [np.zeros(16), -np.ones(16), np.ones(15)])
def test_wbn_rejects_bad_weights(w):
    with pytest.raises(ModelError):
        weighted_batch_norm(ad.constant(_x()), w, np.ones(3), np.zeros(3), NormState.fresh(3))


def test_wbn_identities():
    r = wbn_identities()
    assert r["perfect_weights_gap"] <= 1e-10
    assert r["uniform_weights_gap"] <= 1e-12
    assert all(res.passed for res in check_wbn())


def test_wbn_model_needs_weights_in_train_mode():
    model = Model(ModelSpec((2, 4, 2), "WBN"))
    theta = init_params(model.spec).theta
    with pytest.raises(ModelError):
        model.forward(theta, np.zeros((3, 2)), "train")


def test_forward_shape_check():
    model = Model(ModelSpec((2, 4, 2)))
    with pytest.raises(ModelError):
        model.forward(init_params(model.spec).theta, np.zeros((3, 5)))


def test_fbn_never_writes_running_stats():
    spec = ModelSpec((2, 4, 2), "FBN")
    params = init_params(spec)
    model = Model(spec, params.norms)
    model.forward(params.theta, _x(d=2), "train", update_stats=True)
    np.testing.assert_array_equal(model.norms[0].running_mean, np.zeros(4))


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec((2, 6, 2), "BN", seed=2)
    params = init_params(spec)
    params.norms[0].running_mean = np.arange(6.0)
    save_checkpoint(spec, params, tmp_path / "m.json")
    back = load_checkpoint(spec, tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta, params.theta)
    np.testing.assert_array_equal(back.norms[0].running_mean, np.arange(6.0))
    x = _x(d=2)
    np.testing.assert_array_equal(predict(spec, back, x), predict(spec, params, x))
    assert list(json.loads((tmp_path / "m.json").read_text())) == sorted(checkpoint_dict(spec, params))


def test_checkpoint_missing_entry(tmp_path):
    spec = ModelSpec((2, 3, 2))
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(ModelError):
        load_checkpoint(spec, tmp_path / "m.json")


def test_params_copy_is_deep():
    p = init_params(ModelSpec((2, 3, 2), "BN"))
    q = p.copy()
    q.theta[0] += 1
    q.norms[0].running_mean[0] = 5
    assert p.theta[0] != q.theta[0] and p.norms[0].running_mean[0] == 0
    assert isinstance(q, Params)
