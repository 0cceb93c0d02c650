"""Executable correctness properties shared by ``robust-ssl verify`` and the tests.

Every check returns an :class:`OracleResult`; none of them raise on a
failed property.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bilevel import (NeumannDivergenceError, TrainingObjective, ift_weight_gradient,
                      inner_unroll, meta_weight_gradient, neumann_inverse_hvp)
from .data import SyntheticSpec, make_dataset
from .losses import (LossConfig, cross_entropy_terms, mean_teacher_terms, pi_model_terms,
                     pseudo_label_terms, robust_training_loss, supervised_loss, validation_loss,
                     _kl_terms, _softmax_np)
from .nn import Model, ModelSpec, NormState, batch_norm, init_params, weighted_batch_norm
from .reweight import expand_weights, init_weights

FD_TOL = 1e-5


@dataclass
class OracleResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status}  {self.name}: {self.value:.3g} vs {self.tolerance:.3g}{extra}"


# finite differences --------------------------------------------------------


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradient_error(f: Callable[[Tensor], Tensor], x0: np.ndarray, h: float = 1e-6) -> float:
    """Relative max-norm gap between the reverse-mode and central-difference gradients."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    analytic = ad.grad(f(t), [t])[0].data

    def scalar(x):
        with ad.no_grad():
            return float(f(ad.constant(x)).data)

    return relative_error(analytic, numeric_gradient(scalar, x0, h))


def _net(norm: str, seed: int = 0, widths=(2, 5, 4, 3)) -> tuple[Model, np.ndarray]:
    spec = ModelSpec(widths, norm, seed=seed)
    params = init_params(spec)
    rng = np.random.default_rng(seed + 100)
    theta = params.theta + 0.1 * rng.standard_normal(params.theta.shape)
    model = Model(spec, params.norms)
    for st in model.norms:
        st.running_mean = 0.1 * rng.standard_normal(st.running_mean.shape)
        st.running_var = 1.0 + rng.uniform(0, 0.5, st.running_var.shape)
    return model, theta


def gradient_cases(seed: int = 0) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Named scalar functions and points at which to check their gradients."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 2))
    pos = rng.uniform(0.5, 2.0, (4, 3))
    wts = rng.uniform(0.2, 1.0, 6)
    x6 = rng.standard_normal((6, 3))
    c6 = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 4)
    cases: dict[str, tuple] = {
        "add/mul/sub broadcast": (lambda t: ad.sum(ad.mul(ad.sub(ad.add(t, b[0]), 0.3), t)),
                                  rng.standard_normal((4, 2))),
        "div": (lambda t: ad.sum(ad.div(a, t)), pos),
        "exp/log": (lambda t: ad.sum(ad.log(ad.add(ad.exp(t), 1.0))), a),
        "tanh": (lambda t: ad.sum(ad.mul(ad.tanh(t), a)), a),
        "relu": (lambda t: ad.sum(ad.mul(ad.relu(t), a)), a + 0.05 * np.sign(a)),
        "sqrt/power": (lambda t: ad.sum(ad.add(ad.sqrt(t), ad.power(t, 1.5))), pos),
        "maximum/where": (lambda t: ad.sum(ad.where(a > 0, ad.maximum(t, 0.1), ad.mul(t, t))),
                          pos),
        "sum/mean axes": (lambda t: ad.sum(ad.mul(ad.mean(t, axis=0), ad.sum(t, axis=0))), a),
        "softmax": (lambda t: ad.sum(ad.mul(ad.softmax(t, axis=1), a)), a),
        "log_softmax": (lambda t: ad.sum(ad.mul(ad.log_softmax(t, axis=1), a)), a),
        "matmul": (lambda t: ad.sum(ad.tanh(ad.matmul(t, b))), a),
        "linear": (lambda t: ad.sum(ad.tanh(ad.linear(a, t, b[:, 0]))),
                   rng.standard_normal((3, 3))),
        "transpose/reshape": (lambda t: ad.sum(ad.mul(ad.reshape(ad.transpose(t), (12,)),
                                                      np.arange(12.0))), a),
        "take/concatenate": (lambda t: ad.sum(ad.mul(ad.concatenate(
            [ad.take(t, np.array([0, 2, 2])), t]), 1.5)), rng.standard_normal((5, 3))),
        "standardize (x)": (lambda t: ad.sum(ad.mul(ad.standardize(t, None), c6)), x6 * 2.0),
        "standardize (x, weighted)": (lambda t: ad.sum(ad.mul(ad.standardize(t, wts), c6)),
                                      x6 * 2.0),
        "standardize (weights)": (lambda t: ad.sum(ad.mul(ad.standardize(x6, t), x6 ** 2)), wts),
        "cross-entropy": (lambda t: ad.mean(cross_entropy_terms(t, labels)), a),
        "supervised loss": (lambda t: supervised_loss(t, labels), a),
        "pseudo-label": (lambda t: ad.mean(pseudo_label_terms(ad.mul(t, 3.0), 0.5)), a),
        "pi-model": (lambda t: ad.mean(pi_model_terms(t, ad.constant(a[::-1].copy()))), a),
        "mean-teacher": (lambda t: ad.mean(mean_teacher_terms(t, ad.constant(pos))), a),
        "VAT divergence": (lambda t: ad.mean(_kl_terms(_softmax_np(pos), t)), a),
    }

    state = NormState.fresh(3)
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    cases["BN layer"] = (lambda t: ad.sum(ad.mul(batch_norm(t, gamma, beta, state, "train", False),
                                                 c6)), x6)
    cases["WBN layer (x)"] = (lambda t: ad.sum(ad.mul(weighted_batch_norm(
        t, wts, gamma, beta, state, "train", False), c6)), x6)
    cases["WBN layer (weights)"] = (lambda t: ad.sum(ad.mul(weighted_batch_norm(
        x6, t, gamma, beta, state, "train", False), x6 ** 2)), wts)

    xb = rng.standard_normal((7, 2))
    yb = rng.integers(0, 3, 7)
    for norm in ("NBN", "BN", "FBN", "WBN"):
        model, theta = _net(norm, seed)
        bw = wts[:6].tolist() + [0.5]
        for mode in ("train", "eval"):
            cases[f"MLP {norm} {mode}"] = (
                lambda t, m=model, mode=mode, bw=bw: supervised_loss(
                    m.forward(t, xb, mode, np.array(bw), update_stats=False), yb), theta)

    # the weighted training loss, in theta and in the cluster weights through
    # expand-weights and WBN (pseudo-label targets are locally constant)
    cfg = LossConfig(method="pseudo-label", pseudo_label_threshold=0.4, batch_layout="joint")
    xl, yl = rng.standard_normal((4, 2)), rng.integers(0, 3, 4)
    xu = rng.standard_normal((8, 2))
    ws = init_weights(3, rng.integers(0, 3, 8))
    cw0 = rng.uniform(0.3, 1.0, 3)
    for norm in ("NBN", "WBN"):
        model, theta = _net(norm, seed + 1)

        def loss_theta(t, m=model):
            w = expand_weights(ad.constant(cw0), ws, np.arange(8))
            return robust_training_loss(m, t, xl, yl, xu, w, cfg, np.random.default_rng(0))

        def loss_w(t, m=model, th=theta):
            return robust_training_loss(m, th, xl, yl, xu, expand_weights(t, ws, np.arange(8)),
                                        cfg, np.random.default_rng(0))

        cases[f"robust loss {norm} (theta)"] = (loss_theta, theta)
        cases[f"robust loss {norm} (cluster weights)"] = (loss_w, cw0)
        cases[f"validation loss {norm} (batch stats)"] = (
            lambda t, m=model: validation_loss(m, t, xb, yb, "batch"), theta)
    return cases


def check_gradients(seed: int = 0) -> list[OracleResult]:
    out = []
    for name, (f, x0) in gradient_cases(seed).items():
        err = gradient_error(f, x0)
        out.append(OracleResult(f"gradient {name}", err < FD_TOL, err, FD_TOL))
    return out


# second order ---------------------------------------------------------------


def check_hvp(seed: int = 0) -> list[OracleResult]:
    """HVPs against a closed-form Hessian, and against differences of gradients on an MLP."""
    rng = np.random.default_rng(seed)
    n = 5
    m = rng.standard_normal((n, n))
    a = m @ m.T
    c = rng.uniform(0.5, 1.5, n)
    x0 = rng.standard_normal(n)
    t = Tensor(x0, requires_grad=True)
    loss = ad.add(ad.mul(0.5, ad.sum(ad.mul(t, ad.reshape(ad.matmul(a, ad.reshape(t, (-1, 1))), (-1,))))), ad.sum(ad.mul(c, ad.exp(t))))
    first = ad.grad(loss, [t], create_graph=True)[0]
    hess = np.stack([ad.hessian_vector_product(None, t, e, first=first).data for e in np.eye(n)])
    exact = a + np.diag(c * np.exp(x0))
    err1 = relative_error(hess, exact)

    model, theta = _net("BN", seed)
    xb, yb = rng.standard_normal((8, 2)), rng.integers(0, 3, 8)
    v = rng.standard_normal(theta.shape)

    def g(th):
        tt = Tensor(th, requires_grad=True)
        return ad.grad(supervised_loss(model.forward(tt, xb, "train", update_stats=False), yb),
                       [tt], create_graph=True)[0]

    tt = Tensor(theta, requires_grad=True)
    lossm = supervised_loss(model.forward(tt, xb, "train", update_stats=False), yb)
    hv = ad.hessian_vector_product(lossm, tt, v).data
    h = 1e-5
    fd = (g(theta + h * v).data - g(theta - h * v).data) / (2 * h)
    err2 = relative_error(hv, fd)
    return [OracleResult("HVP vs closed-form Hessian", err1 < 1e-10, err1, 1e-10),
            OracleResult("HVP vs gradient differences (BN MLP)", err2 < FD_TOL, err2, FD_TOL)]


def _spd(seed: int, n: int = 5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(rng.uniform(1.0, 3.0, n)) @ q.T


def neumann_error(scale: float = 0.4, order: int = 50, seed: int = 0) -> float:
    """Max gap between the Neumann estimate of A^{-1} v and a dense solve.

    Raises :class:`NeumannDivergenceError` when the series blows up.
    """
    a = _spd(seed)
    v = np.random.default_rng(seed + 1).standard_normal(5)
    t = Tensor(np.zeros(5), requires_grad=True)
    loss = ad.mul(0.5, ad.sum(ad.mul(t, ad.reshape(ad.matmul(a, ad.reshape(t, (-1, 1))), (-1,)))))
    approx = neumann_inverse_hvp(loss, t, v, order, scale)
    return float(np.abs(approx - np.linalg.solve(a, v)).max())


def check_neumann(scale: float = 0.4) -> list[OracleResult]:
    out = []
    try:
        err = neumann_error(scale)
        out.append(OracleResult(f"Neumann P=50 s={scale:g} vs dense solve (SPD 5x5)",
                                err < 1e-4, err, 1e-4))
    except NeumannDivergenceError as e:
        out.append(OracleResult(f"Neumann P=50 s={scale:g} vs dense solve (SPD 5x5)",
                                False, float("inf"), 1e-4, f"diverged: {e}"))
    try:
        neumann_error(10.0)
        out.append(OracleResult("fault injection: Neumann s=10 divergence detected", False,
                                0.0, 1.0, "no divergence reported"))
    except NeumannDivergenceError as e:
        out.append(OracleResult("fault injection: Neumann s=10 divergence detected", True,
                                1.0, 1.0, str(e).split(";")[0]))
    return out


# meta(J=1) versus ift(P=0) --------------------------------------------------


def meta_ift_gap(seed: int, norm: str = "NBN", alpha: float = 0.1,
                 method: str = "vat") -> float:
    """Max elementwise gap between the two hypergradients on one random state."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec((2, 6, 5, 2), norm, seed=seed)
    params = init_params(spec)
    model = Model(spec, params.norms)
    theta = params.theta + 0.2 * rng.standard_normal(params.theta.shape)
    k, nu = 4, 12
    ws = init_weights(k, rng.integers(0, k, nu))
    ws.cluster_weights = rng.uniform(0.2, 1.0, k)
    obj = TrainingObjective(model, rng.standard_normal((4, 2)), rng.integers(0, 2, 4),
                            rng.standard_normal((nu, 2)), np.arange(nu), ws,
                            LossConfig(method=method), int(rng.integers(2**31)))
    xv, yv = rng.standard_normal((10, 2)), rng.integers(0, 2, 10)
    cw = Tensor(ws.cluster_weights, requires_grad=True)
    theta_star = inner_unroll(obj, theta, cw, 1, alpha, create_graph=True)
    meta = meta_weight_gradient(model, theta_star, cw, xv, yv, "batch")
    ift = ift_weight_gradient(obj, theta_star.data, xv, yv, 0, alpha, theta, "batch")
    return float(np.abs(meta - ift).max())


def check_meta_ift(n_states: int = 20) -> list[OracleResult]:
    gaps = [meta_ift_gap(s, ("NBN", "WBN")[s % 2]) for s in range(n_states)]
    worst = max(gaps)
    return [OracleResult(f"meta(J=1) == ift(P=0, s=alpha) over {n_states} states",
                         worst <= 1e-8, worst, 1e-8)]


# weighted batch normalization -----------------------------------------------


def wbn_identities(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((32, 4))
    xo = rng.standard_normal((32, 4)) + 100.0
    st = NormState.fresh(4)
    gamma, beta = rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)
    both = np.vstack([xi, xo])
    w = np.r_[np.ones(32), np.zeros(32)]
    with ad.no_grad():
        wbn = weighted_batch_norm(ad.constant(both), w, gamma, beta, st, "train", False).data
        bn_i = batch_norm(ad.constant(xi), gamma, beta, st, "train", False).data
        uni = weighted_batch_norm(ad.constant(both), np.full(64, 0.7), gamma, beta, st,
                                  "train", False).data
        bn_all = batch_norm(ad.constant(both), gamma, beta, st, "train", False).data

    ds = make_dataset(SyntheticSpec(ood_kind="faraway", ood_ratio=0.5, seed=seed))
    x_id, x_ood = ds.x_unlabeled[~ds.ood_mask], ds.x_unlabeled[ds.ood_mask]
    mu_i, mu_o = x_id.mean(axis=0), x_ood.mean(axis=0)
    mu_io = ds.x_unlabeled.mean(axis=0)
    with ad.no_grad():
        bn_io = batch_norm(ad.constant(ds.x_unlabeled), np.ones(2), np.zeros(2),
                           NormState.fresh(2), "train", False).data[~ds.ood_mask]
        bn_id = batch_norm(ad.constant(x_id), np.ones(2), np.zeros(2), NormState.fresh(2),
                           "train", False).data
    return {
        "perfect_weights_gap": float(np.abs(wbn[:32] - bn_i).max()),
        "uniform_weights_gap": float(np.abs(uni - bn_all).max()),
        "mean_shift": float(np.linalg.norm(mu_io - mu_i)),
        "half_separation": float(np.linalg.norm(mu_o - mu_i) / 2),
        "separation": float(np.linalg.norm(mu_o - mu_i)),
        "bn_contamination": float(np.abs(bn_io - bn_id).max()),
    }


def check_wbn(seed: int = 0) -> list[OracleResult]:
    r = wbn_identities(seed)
    margin = r["mean_shift"] - (r["half_separation"] - 1e-9)
    return [
        OracleResult("WBN perfect weights over I+O == BN over I", r["perfect_weights_gap"] <= 1e-10,
                     r["perfect_weights_gap"], 1e-10),
        OracleResult("WBN uniform weights == BN", r["uniform_weights_gap"] <= 1e-12,
                     r["uniform_weights_gap"], 1e-12),
        OracleResult("faraway premise |mu_O - mu_I| > 5", r["separation"] > 5,
                     r["separation"], 5.0),
        OracleResult("contamination |mu_IO - mu_I| > |mu_O - mu_I|/2", margin > 0,
                     r["mean_shift"], r["half_separation"]),
        OracleResult("contamination max |BN_IO - BN_I| on I > 0.5", r["bn_contamination"] > 0.5,
                     r["bn_contamination"], 0.5),
    ]


# convergence on an analytic bilevel quadratic --------------------------------


@dataclass
class QuadraticBilevel:
    """L_T = sum_i w_i |theta - a_i|^2 / (2k) + lam |theta|^2 / 2 and L_V = |theta - c|^2 / 2.

    The best response and the exact hypergradient are available in closed form.
    """

    anchors: np.ndarray
    target: np.ndarray
    lam: float = 0.1

    @classmethod
    def random(cls, seed: int = 0, k: int = 6, d: int = 3) -> "QuadraticBilevel":
        rng = np.random.default_rng(seed)
        anchors = rng.standard_normal((k, d)) * 2.0
        prob = cls(anchors, np.zeros(d))
        prob.target = prob.best_response(rng.uniform(0.3, 0.9, k))
        return prob

    @property
    def k(self) -> int:
        return len(self.anchors)

    def best_response(self, w: np.ndarray) -> np.ndarray:
        return (w @ self.anchors / self.k) / (w.sum() / self.k + self.lam)

    def hypergradient(self, w: np.ndarray) -> np.ndarray:
        th = self.best_response(w)
        jac = (self.anchors - th) / self.k / (w.sum() / self.k + self.lam)  # d theta*/dw_i rows
        return jac @ (th - self.target)

    def train_loss(self, theta: Tensor, w) -> Tensor:
        diff = ad.sub(ad.reshape(theta, (1, -1)), self.anchors)
        per = ad.sum(ad.mul(diff, diff), axis=1)
        return ad.add(ad.div(ad.sum(ad.mul(w, per)), 2.0 * self.k),
                      ad.mul(0.5 * self.lam, ad.sum(ad.mul(theta, theta))))

    def val_loss(self, theta: Tensor) -> Tensor:
        diff = ad.sub(theta, self.target)
        return ad.mul(0.5, ad.sum(ad.mul(diff, diff)))


def quadratic_bilevel_trace(iterations: int = 400, alpha: float = 0.5, beta: float = 0.5,
                            order: int = 10, inner_steps: int = 1, seed: int = 0) -> np.ndarray:
    """Exact squared hypergradient norm at each outer step of the IFT loop with constant beta."""
    prob = QuadraticBilevel.random(seed)
    w = np.ones(prob.k)
    theta = np.zeros(prob.anchors.shape[1])
    trace = []
    for _ in range(iterations + 1):
        trace.append(float(np.sum(prob.hypergradient(w) ** 2)))
        for _ in range(inner_steps):
            t = Tensor(theta, requires_grad=True)
            theta = theta - alpha * ad.grad(prob.train_loss(t, w), [t])[0].data
        t = Tensor(theta, requires_grad=True)
        gv = ad.grad(prob.val_loss(t), [t])[0].data
        wt = Tensor(w, requires_grad=True)
        lt = prob.train_loss(t, wt)
        first = ad.grad(lt, [t], create_graph=True)[0]
        q = neumann_inverse_hvp(lt, t, gv, order, alpha, first=first)
        gw = -ad.mixed_second_derivative_vector_product(lt, t, wt, q, first=first).data
        w = np.maximum(w - beta * gw, 0.0)
    return np.array(trace)


def check_convergence(iterations: int = 400) -> list[OracleResult]:
    trace = quadratic_bilevel_trace(iterations)
    ratio = float(np.minimum.accumulate(trace)[-1] / trace[0])
    return [OracleResult(f"bilevel quadratic: running-min |grad_w L_V|^2 after T={iterations}",
                         ratio < 0.1, ratio, 0.1, "ratio to initial")]


# the whole suite -------------------------------------------------------------


SUITE: dict[str, Callable[..., list[OracleResult]]] = {
    "gradients": check_gradients,
    "hvp": check_hvp,
    "neumann": check_neumann,
    "meta-ift": check_meta_ift,
    "wbn": check_wbn,
    "convergence": check_convergence,
}


def run_suite(neumann_scale: float = 0.4, report=print) -> list[OracleResult]:
    results = []
    for name, check in SUITE.items():
        t0 = time.perf_counter()
        res = check(neumann_scale) if name == "neumann" else check()
        for r in res:
            report(r.line())
        report(f"      [{name}: {time.perf_counter() - t0:.1f}s]")
        results.extend(res)
    return results


__all__ = ["OracleResult", "numeric_gradient", "relative_error", "gradient_error",
           "gradient_cases", "check_gradients", "check_hvp", "neumann_error", "check_neumann",
           "meta_ift_gap", "check_meta_ift", "wbn_identities", "check_wbn", "QuadraticBilevel",
           "quadratic_bilevel_trace", "check_convergence", "run_suite", "SUITE"]
