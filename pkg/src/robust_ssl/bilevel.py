"""Hypergradients for the unlabeled-data weights and the robust SSL training loop.

Two estimators of d L_V(theta*(w)) / dw are provided:

* meta-approximation: unroll J SGD steps on the weighted training loss with
  the graph kept, then backpropagate the validation loss through the unroll;
* implicit differentiation: run the unroll without a graph, then combine the
  mixed second derivative of the training loss with a truncated Neumann
  series for the inverse Hessian applied to grad_theta L_V.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .losses import (EmaTeacher, LossConfig, robust_training_loss, supervised_only_loss,
                     validation_loss)
from .nn import Model, ModelSpec, init_params
from .reweight import WeightState, clip_weights, cluster_unlabeled, expand_weights

log = logging.getLogger(__name__)

ALGORITHMS = ("meta", "ift")
VALIDATION_NORMS = ("batch", "eval")
RUN_MODES = ("baseline-ssl", "supervised-only", "robust-meta", "robust-ift")
NEUMANN_BLOWUP = 1e6
# what an IFT iteration does when its Neumann series blows up: abort the run,
# or keep the weights unchanged for that iteration and count it
DIVERGENCE_POLICIES = ("raise", "skip")


class BilevelError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    """A loss or parameter became NaN/Inf during training."""

    def __init__(self, msg: str, iteration: int | None = None):
        super().__init__(msg if iteration is None else f"iteration {iteration}: {msg}")
        self.iteration = iteration


class NeumannDivergenceError(NonFiniteError):
    pass


@dataclass(frozen=True)
class BilevelConfig:
    algorithm: str = "meta"
    inner_steps: int = 1
    neumann_order: int = 10
    alpha: float = 0.1
    beta: float = 0.1
    neumann_scale: float | None = None
    iterations: int = 400
    batch_labeled: int = 6
    batch_unlabeled: int = 64
    batch_val: int = 50
    n_clusters: int = 8
    w_max: float = 1.0
    same_batches: bool = False
    reuse_batches: bool = False
    curvature_at: str = "theta_star"
    validation_norm: str = "batch"
    divergence: str = "raise"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise BilevelError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.inner_steps < 1:
            raise BilevelError("inner_steps (J) must be at least 1")
        if self.neumann_order < 0:
            raise BilevelError("neumann_order (P) must be nonnegative")
        if self.alpha <= 0:
            raise BilevelError("alpha must be positive")
        if self.beta < 0:
            raise BilevelError("beta must be nonnegative")
        if self.neumann_scale is not None and self.neumann_scale <= 0:
            raise BilevelError("neumann_scale must be positive")
        if self.iterations < 0:
            raise BilevelError("iterations must be nonnegative")
        for name in ("batch_labeled", "batch_unlabeled", "batch_val", "n_clusters"):
            if getattr(self, name) < 1:
                raise BilevelError(f"{name} must be at least 1")
        if self.curvature_at not in ("theta_star", "theta"):
            raise BilevelError("curvature_at must be 'theta_star' or 'theta'")
        if self.validation_norm not in VALIDATION_NORMS:
            raise BilevelError(f"validation_norm must be one of {VALIDATION_NORMS}")
        if self.divergence not in DIVERGENCE_POLICIES:
            raise BilevelError(f"divergence must be one of {DIVERGENCE_POLICIES}")

    @property
    def scale(self) -> float:
        return self.alpha if self.neumann_scale is None else self.neumann_scale


# the weighted training loss with its batch and randomness frozen ----------


@dataclass
class TrainingObjective:
    """L_T(theta, w) on one fixed mini-batch.

    ``noise_seed`` pins the randomness of the unsupervised term (VAT start
    directions, input noise) so repeated evaluations at the same point agree.
    """

    model: Model
    xl: np.ndarray
    yl: np.ndarray
    xu: np.ndarray
    u_index: np.ndarray
    weights: WeightState
    loss_config: LossConfig
    noise_seed: int = 0
    teacher: EmaTeacher | None = None

    def __call__(self, theta, cluster_w: Tensor | None = None, update_stats: bool = False,
                 salt: int = 0) -> Tensor:
        if cluster_w is None:
            cluster_w = ad.constant(self.weights.cluster_weights)
        w = expand_weights(cluster_w, self.weights, self.u_index)
        rng = np.random.default_rng([self.noise_seed, salt])
        return robust_training_loss(self.model, theta, self.xl, self.yl, self.xu, w,
                                    self.loss_config, rng, self.teacher, update_stats)


def _check_finite(t: Tensor | np.ndarray, what: str, iteration=None) -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite {what}", iteration)


def inner_unroll(objective: TrainingObjective, theta, cluster_w: Tensor | None, steps: int,
                 alpha: float, create_graph: bool = True) -> Tensor:
    """J SGD steps on L_T from ``theta``; ``theta`` itself is not modified.

    With ``create_graph`` the result stays connected to ``cluster_w`` so the
    validation loss can be differentiated through the unroll.
    """
    if steps < 1:
        raise BilevelError("inner unroll needs at least one step")
    start = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    cur = Tensor(start, requires_grad=True)
    for j in range(steps):
        with ad.enable_grad(True):
            loss = objective(cur, cluster_w, salt=j)
        _check_finite(loss, "training loss during inner unroll")
        g = ad.grad(loss, [cur], create_graph=create_graph)[0]
        if create_graph:
            cur = ad.sub(cur, ad.mul(alpha, g))
        else:
            cur = Tensor(cur.data - alpha * g.data, requires_grad=True)
    return cur


def meta_weight_gradient(model: Model, theta_star: Tensor, cluster_w: Tensor, xv, yv,
                         validation_norm: str = "batch") -> np.ndarray:
    """d L_V(theta*(w)) / dw by backpropagating through a recorded unroll."""
    lv = validation_loss(model, theta_star, xv, yv, validation_norm)
    return ad.grad(lv, [cluster_w])[0].data


def neumann_inverse_hvp(loss: Tensor | None, theta: Tensor, v, order: int, scale: float,
                        first: Tensor | None = None) -> np.ndarray:
    """Approximate H^{-1} v as s * sum_{p=0..P} (I - s H)^p v.

    One Hessian-vector product per order; ``first`` may hold the recorded
    gradient of ``loss`` so the products share its graph.
    """
    if order < 0:
        raise BilevelError("Neumann order must be nonnegative")
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ad.ShapeError(f"vector shape {v.shape} does not match parameters {theta.shape}")
    if order > 0 and first is None:
        first = ad.grad(loss, [theta], create_graph=True)[0]
    u = v.copy()
    acc = v.copy()
    # a convergent series has shrinking terms; one this large has blown up
    limit = NEUMANN_BLOWUP * max(float(np.linalg.norm(v)), 1e-300)
    for p in range(order):
        hu = ad.hessian_vector_product(None, theta, u, first=first).data
        u = u - scale * hu
        acc = acc + u
        if not (np.all(np.isfinite(acc)) and np.linalg.norm(u) < limit):
            raise NeumannDivergenceError(
                f"Neumann series diverged at order {p + 1}; the scale {scale} is likely too "
                "large for the local curvature (needs scale * max eigenvalue < 2)")
    return scale * acc


def ift_weight_gradient(objective: TrainingObjective, theta_star, xv, yv, order: int,
                        scale: float, theta_start=None,
                        validation_norm: str = "batch",
                        diagnostics: dict | None = None) -> np.ndarray:
    """Implicit-function hypergradient: dL_V/dw - (d^2 L_T / dw dtheta^T) H^{-1} grad L_V.

    The curvature terms are evaluated at ``theta_start`` when given (the
    point the unroll began from) and at ``theta_star`` otherwise. If
    ``diagnostics`` is a dict it receives ``inner_grad_norm``, the norm of
    grad_theta L_T at the curvature point.
    """
    model = objective.model
    ts = Tensor(theta_star.data if isinstance(theta_star, Tensor) else theta_star,
                requires_grad=True)
    cluster_w = Tensor(objective.weights.cluster_weights, requires_grad=True)
    with ad.enable_grad(True):
        lv = validation_loss(model, ts, xv, yv, validation_norm)
        gv, direct = ad.grad(lv, [ts, cluster_w])
        point = ts if theta_start is None else Tensor(
            theta_start.data if isinstance(theta_start, Tensor) else theta_start,
            requires_grad=True)
        lt = objective(point, cluster_w, salt=0)
        first = ad.grad(lt, [point], create_graph=True)[0]
    if diagnostics is not None:
        diagnostics["inner_grad_norm"] = float(np.linalg.norm(first.data))
    q = neumann_inverse_hvp(lt, point, gv.data, order, scale, first=first)
    mixed = ad.mixed_second_derivative_vector_product(lt, point, cluster_w, q, first=first)
    return direct.data - mixed.data


def outer_step(ws: WeightState, grad_w: np.ndarray, beta: float) -> WeightState:
    """SGD step on the cluster weights followed by clipping to [0, w_max]."""
    grad_w = np.asarray(grad_w, dtype=np.float64)
    _check_finite(grad_w, "weight gradient")
    new = ws.copy()
    new.cluster_weights = clip_weights(ws.cluster_weights - beta * grad_w, ws.w_max)
    return new


def model_step(objective: TrainingObjective, theta: np.ndarray, alpha: float,
               update_stats: bool = True) -> tuple[np.ndarray, float]:
    """One SGD step on L_T from the original parameters, with the current weights."""
    t = Tensor(theta, requires_grad=True)
    with ad.enable_grad(True):
        loss = objective(t, None, update_stats=update_stats, salt=0)
    _check_finite(loss, "training loss")
    g = ad.grad(loss, [t])[0].data
    new = theta - alpha * g
    _check_finite(new, "parameters")
    return new, float(loss.data)


# reports ------------------------------------------------------------------


METRIC_COLUMNS = ("iteration", "train_loss", "val_loss", "val_acc", "test_acc",
                  "mean_id_weight", "mean_ood_weight", "grad_w_norm", "inner_grad_norm",
                  "neumann_diverged")


@dataclass
class RunReport:
    fingerprint: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    status: str = "running"
    error: str | None = None
    theta: np.ndarray | None = field(default=None, repr=False, compare=False)
    weights: WeightState | None = field(default=None, repr=False, compare=False)
    model: Model | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"fingerprint": self.fingerprint, "status": self.status, "error": self.error,
                "config": self.config, "final": self.final, "rows": self.rows}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["fingerprint"], d.get("config", {}), d.get("rows", []), d.get("final", {}),
                   d.get("status", "completed"), d.get("error"))

    def metrics_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r.get(c)) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# the training loop --------------------------------------------------------


def _batch(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size, replace=False))


def resolve_run(config: BilevelConfig, model_spec: ModelSpec, loss_config: LossConfig,
                run_mode: str, seed: int, eval_every: int = 1, context: dict | None = None):
    """The settings a run actually uses, and their canonical description.

    Robust modes take the algorithm from the mode and swap BN for WBN;
    the other modes never update weights (beta = 0). The model seed is the
    run seed. Returns ``(config, model_spec, description)``.
    """
    if run_mode not in RUN_MODES:
        raise BilevelError(f"run_mode must be one of {RUN_MODES}, got {run_mode!r}")
    if eval_every < 1:
        raise BilevelError("eval_every must be at least 1")
    if run_mode.startswith("robust"):
        config = replace(config, algorithm=run_mode.split("-")[1])
        if model_spec.norm_mode == "BN":
            model_spec = model_spec.with_norm("WBN")
    elif model_spec.norm_mode == "WBN":
        raise BilevelError("WBN needs learned weights; use a robust run mode")
    else:
        config = replace(config, beta=0.0)
    model_spec = replace(model_spec, seed=seed)
    description = {"bilevel": asdict(config), "model": asdict(model_spec),
                   "loss": asdict(loss_config), "run_mode": run_mode, "seed": seed,
                   "eval_every": eval_every, **(context or {})}
    return config, model_spec, json.loads(json.dumps(description, default=list))


def train(config: BilevelConfig, dataset: Dataset, model_spec: ModelSpec,
          loss_config: LossConfig, run_mode: str = "robust-meta", seed: int = 0,
          eval_every: int = 1, embed=None, context: dict | None = None) -> RunReport:
    """Train one model and return its per-iteration metrics.

    ``run_mode`` selects plain SSL with w = 1 (``baseline-ssl``), the
    labeled data alone (``supervised-only``) or the bilevel robust loop
    (``robust-meta``/``robust-ift``, which swap BN for WBN). ``context``
    (for example the data description) is stored with the configuration
    and enters the fingerprint.
    """
    config, model_spec, cfg_dict = resolve_run(config, model_spec, loss_config, run_mode,
                                                seed, eval_every, context)
    robust = run_mode.startswith("robust")
    if model_spec.layer_widths[0] != dataset.dim:
        raise BilevelError(f"model input width {model_spec.layer_widths[0]} != data dim {dataset.dim}")
    report = RunReport(fingerprint(cfg_dict), cfg_dict)
    t0 = time.perf_counter()

    rng = np.random.default_rng([seed, 104729])
    params = init_params(model_spec)
    model = Model(model_spec, params.norms)
    theta = params.theta
    xu_all = dataset.x_unlabeled
    n_u = len(xu_all)
    ood = dataset.ood_mask

    if n_u and run_mode != "supervised-only":
        k = min(config.n_clusters, n_u)
        _, ws = cluster_unlabeled(xu_all, k, seed=seed, embed=embed)
    else:
        ws = WeightState(np.ones(1), np.zeros(n_u, dtype=np.int64))
    ws.w_max = config.w_max
    teacher = EmaTeacher.from_student(theta, loss_config.ema_decay) \
        if loss_config.method == "mean-teacher" else None

    def draw_objective() -> TrainingObjective:
        li = _batch(rng, len(dataset.x_labeled), config.batch_labeled)
        ui = _batch(rng, n_u, config.batch_unlabeled) if run_mode != "supervised-only" \
            else np.zeros(0, dtype=np.int64)
        return TrainingObjective(model, dataset.x_labeled[li], dataset.y_labeled[li],
                                 xu_all[ui].reshape(len(ui), dataset.dim), ui, ws,
                                 loss_config, int(rng.integers(2**62)), teacher)

    best = (np.inf, np.inf)
    diverged = 0
    best_test = float("nan")
    test_acc = float("nan")
    for it in range(config.iterations):
        obj = draw_objective()
        grad_norm = 0.0
        inner_norm = float("nan")
        if robust:
            vi = _batch(rng, len(dataset.x_val), config.batch_val)
            xv, yv = dataset.x_val[vi], dataset.y_val[vi]
            if config.algorithm == "meta":
                cw = Tensor(ws.cluster_weights, requires_grad=True)
                theta_star = inner_unroll(obj, theta, cw, config.inner_steps, config.alpha,
                                          create_graph=True)
                _check_finite(theta_star, "inner parameters", it)
                gw = meta_weight_gradient(model, theta_star, cw, xv, yv, config.validation_norm)
            else:
                theta_star = inner_unroll(obj, theta, None, config.inner_steps, config.alpha,
                                          create_graph=False)
                _check_finite(theta_star, "inner parameters", it)
                curv = obj if config.same_batches else draw_objective()
                diag: dict = {}
                try:
                    gw = ift_weight_gradient(curv, theta_star, xv, yv, config.neumann_order,
                                             config.scale,
                                             theta if config.curvature_at == "theta" else None,
                                             config.validation_norm, diag)
                except NeumannDivergenceError as e:
                    if config.divergence == "raise":
                        raise NeumannDivergenceError(str(e), it) from None
                    gw = np.zeros(ws.k)
                    diverged += 1
                inner_norm = diag["inner_grad_norm"]
            _check_finite(gw, "weight gradient", it)
            grad_norm = float(np.linalg.norm(gw))
            ws = outer_step(ws, gw, config.beta)
            step_obj = obj if config.reuse_batches else draw_objective()
        else:
            step_obj = obj
        step_obj.weights = ws
        try:
            if run_mode == "supervised-only":
                theta, lt = _supervised_step(model, theta, step_obj, config.alpha)
            else:
                theta, lt = model_step(step_obj, theta, config.alpha)
                if model_spec.norm_mode == "FBN":
                    _refresh_frozen_stats(model, theta, step_obj)
        except NonFiniteError as e:
            raise NonFiniteError(str(e), it) from None
        if teacher is not None:
            teacher.update(theta)

        row = {"iteration": it, "train_loss": lt, "grad_w_norm": grad_norm,
               "inner_grad_norm": inner_norm, "neumann_diverged": diverged}
        if n_u:
            w_ex = ws.per_example()
            row["mean_id_weight"] = float(w_ex[~ood].mean()) if (~ood).any() else float("nan")
            row["mean_ood_weight"] = float(w_ex[ood].mean()) if ood.any() else float("nan")
        if it % eval_every == 0 or it == config.iterations - 1:
            with ad.no_grad():
                lv = float(validation_loss(model, theta, dataset.x_val, dataset.y_val).data)
            val_acc = model.accuracy(theta, dataset.x_val, dataset.y_val)
            test_acc = model.accuracy(theta, dataset.x_test, dataset.y_test)
            row.update(val_loss=lv, val_acc=val_acc, test_acc=test_acc)
            key = (1.0 - val_acc, lv)
            if key < best:
                best, best_test = key, test_acc
        report.rows.append(row)

    last = report.rows[-1] if report.rows else {}
    report.final = {
        "test_acc": test_acc if report.rows else model.accuracy(theta, dataset.x_test, dataset.y_test),
        "best_val_test_acc": best_test,
        "mean_id_weight": last.get("mean_id_weight", float("nan")),
        "mean_ood_weight": last.get("mean_ood_weight", float("nan")),
        "cluster_weights": ws.cluster_weights.tolist(),
        "neumann_diverged": diverged,
        "wall_time_seconds": time.perf_counter() - t0,
    }
    report.status = "completed"
    report.theta = theta
    report.weights = ws
    report.model = model
    return report


def _supervised_step(model: Model, theta: np.ndarray, obj: TrainingObjective, alpha: float):
    t = Tensor(theta, requires_grad=True)
    loss = supervised_only_loss(model, t, obj.xl, obj.yl, update_stats=True)
    _check_finite(loss, "training loss")
    new = theta - alpha * ad.grad(loss, [t])[0].data
    _check_finite(new, "parameters")
    return new, float(loss.data)


def _refresh_frozen_stats(model: Model, theta: np.ndarray, obj: TrainingObjective) -> None:
    """FBN: running statistics follow labeled-only batches, never unlabeled ones."""
    if len(obj.xl) < 2:
        return
    bn = Model(model.spec.with_norm("BN"), model.norms)
    with ad.no_grad():
        bn.forward(theta, obj.xl, "train", update_stats=True)
