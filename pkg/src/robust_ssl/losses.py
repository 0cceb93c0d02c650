"""Supervised and unsupervised loss terms and the weighted training loss.

Unsupervised methods are exposed as *per-example* terms ``r_j`` so that the
robust loss can weight each unlabeled example individually.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

METHODS = ("pseudo-label", "pi-model", "mean-teacher", "vat")
BATCH_LAYOUTS = ("auto", "joint", "separate")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    method: str = "vat"
    consistency_coefficient: float = 1.0
    pseudo_label_threshold: float = 0.95
    vat_epsilon: float = 0.3
    vat_xi: float = 1e-6
    vat_power_iterations: int = 1
    ema_decay: float = 0.95
    input_noise: float = 0.1
    batch_layout: str = "auto"

    def __post_init__(self):
        if self.method not in METHODS:
            raise LossError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_layout not in BATCH_LAYOUTS:
            raise LossError(f"batch_layout must be one of {BATCH_LAYOUTS}, got {self.batch_layout!r}")
        if self.consistency_coefficient < 0:
            raise LossError("consistency_coefficient must be nonnegative")
        if not 0.0 < self.pseudo_label_threshold <= 1.0 and self.method == "pseudo-label":
            raise LossError("pseudo_label_threshold must lie in (0, 1]")
        if self.method == "vat":
            if self.vat_epsilon <= 0 or self.vat_xi <= 0:
                raise LossError("vat_epsilon and vat_xi must be positive")
            if self.vat_power_iterations < 1:
                raise LossError("vat_power_iterations must be at least 1")
        if self.method == "mean-teacher" and not 0.0 < self.ema_decay < 1.0:
            raise LossError("ema_decay must lie in (0, 1)")


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ad.ShapeError(f"logit shapes differ: {a.shape} vs {b.shape}")


def cross_entropy_terms(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    if labels.shape != (m,):
        raise LossError(f"expected {m} labels, got shape {labels.shape}")
    if m and (labels.min() < 0 or labels.max() >= c):
        raise LossError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.take(logp, (np.arange(m), labels)))


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy."""
    return ad.mean(cross_entropy_terms(logits, labels))


# per-example unsupervised terms ------------------------------------------


def pseudo_label_terms(logits: Tensor, threshold: float) -> Tensor:
    """Cross-entropy against detached argmax labels, zero below the confidence threshold."""
    probs = _softmax_np(logits.data)
    targets = probs.argmax(axis=1)
    mask = (probs.max(axis=1) >= threshold).astype(np.float64)
    return ad.mul(cross_entropy_terms(logits, targets), mask)


def _squared_softmax_terms(logits: Tensor, target_logits: Tensor) -> Tensor:
    _check_same_shape(logits, target_logits)
    target = _softmax_np(target_logits.data)
    diff = ad.sub(ad.softmax(logits, axis=1), target)
    return ad.mean(ad.mul(diff, diff), axis=1)


def pi_model_terms(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Mean squared softmax difference; the second branch is the (detached) target."""
    return _squared_softmax_terms(logits_a, logits_b)


def mean_teacher_terms(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    return _squared_softmax_terms(student_logits, teacher_logits)


def _kl_terms(p: np.ndarray, logits_q: Tensor) -> Tensor:
    logp = np.log(np.clip(p, 1e-300, None))
    logq = ad.log_softmax(logits_q, axis=1)
    return ad.sum(ad.mul(p, ad.sub(logp, logq)), axis=1)


def _unit_rows(d: np.ndarray) -> np.ndarray:
    norms = np.sqrt((d * d).sum(axis=1, keepdims=True))
    return d / np.where(norms > 0, norms, 1.0)


def vat_direction(forward: Callable[[Tensor], Tensor], x: np.ndarray, p: np.ndarray,
                  xi: float, power_iterations: int, rng: np.random.Generator) -> np.ndarray:
    """Per-example unit direction that most increases KL(p || p(x + r)).

    Rows whose gradient vanishes keep the random starting direction.
    """
    start = _unit_rows(rng.standard_normal(x.shape))
    d = start
    for _ in range(power_iterations):
        r = Tensor(xi * d, requires_grad=True)
        with ad.enable_grad(True):
            kl = ad.sum(_kl_terms(p, forward(ad.add(x, r))))
            g = ad.grad(kl, [r])[0].data
        norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
        d = np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), start)
    return d


def vat_terms(forward: Callable[[Tensor], Tensor], x: np.ndarray, clean_logits: Tensor,
              config: LossConfig, rng: np.random.Generator) -> Tensor:
    """Per-example KL between clean predictions (detached) and adversarially perturbed ones."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    p = _softmax_np(clean_logits.data)
    d = vat_direction(forward, x, p, config.vat_xi, config.vat_power_iterations, rng)
    return _kl_terms(p, forward(ad.constant(x + config.vat_epsilon * d)))


# batch-level losses -------------------------------------------------------


def pseudo_label_loss(logits: Tensor, threshold: float) -> Tensor:
    return ad.mean(pseudo_label_terms(logits, threshold))


def pi_model_loss(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    return ad.mean(pi_model_terms(logits_a, logits_b))


def mean_teacher_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    return ad.mean(mean_teacher_terms(student_logits, teacher_logits))


def vat_loss(forward: Callable[[Tensor], Tensor], x, config: LossConfig,
             rng: np.random.Generator) -> Tensor:
    """VAT on a batch, with ``forward`` mapping inputs to logits."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    clean = forward(ad.constant(x))
    return ad.mean(vat_terms(forward, x, clean, config, rng))


@dataclass
class EmaTeacher:
    shadow: np.ndarray
    decay: float

    @classmethod
    def from_student(cls, theta: np.ndarray, decay: float) -> "EmaTeacher":
        return cls(np.array(theta, dtype=np.float64, copy=True), decay)

    def update(self, student: np.ndarray) -> None:
        student = np.asarray(student, dtype=np.float64)
        if student.shape != self.shadow.shape:
            raise ad.ShapeError(f"student shape {student.shape} != shadow {self.shadow.shape}")
        self.shadow = self.decay * self.shadow + (1.0 - self.decay) * student


def ema_update(teacher: EmaTeacher, student) -> EmaTeacher:
    teacher.update(student.data if isinstance(student, Tensor) else student)
    return teacher


# the weighted training loss and the validation loss ----------------------


def _norm_weights(weights: Tensor) -> Tensor:
    """Batch-normalization weights for an unlabeled pass.

    An all-zero batch falls back to uniform normalization so the loss and its
    derivative in the weights stay defined.
    """
    if weights.data.sum() > 0:
        return weights
    return ad.constant(np.ones(weights.shape))


def unsupervised_terms(model, theta: Tensor, xl: np.ndarray, xu: np.ndarray, weights: Tensor,
                       logits_u: Tensor, config: LossConfig, rng: np.random.Generator,
                       teacher: EmaTeacher | None = None) -> Tensor:
    """Per-example unsupervised terms for the unlabeled part of a joint batch.

    Extra forward passes concatenate the labeled rows so that batch
    statistics match the main pass; they never touch running statistics.
    """
    nl = len(xl)
    bw = None
    if model.spec.norm_mode == "WBN":
        bw = ad.concatenate([ad.constant(np.ones(nl)), weights]) if nl else _norm_weights(weights)

    def forward_u(xu_t):
        xs = ad.concatenate([ad.constant(xl), xu_t]) if nl else xu_t
        out = model.forward(theta, xs, "train", bw, update_stats=False)
        return ad.take(out, slice(nl, None)) if nl else out

    if config.method == "pseudo-label":
        return pseudo_label_terms(logits_u, config.pseudo_label_threshold)
    if config.method == "pi-model":
        noisy_a = forward_u(ad.constant(xu + config.input_noise * rng.standard_normal(xu.shape)))
        with ad.no_grad():
            noisy_b = forward_u(ad.constant(xu + config.input_noise * rng.standard_normal(xu.shape)))
        return pi_model_terms(noisy_a, noisy_b)
    if config.method == "mean-teacher":
        if teacher is None:
            raise LossError("mean-teacher needs an EmaTeacher")
        with ad.no_grad():
            t_logits = model.forward(teacher.shadow, xu, "eval")
        return mean_teacher_terms(logits_u, t_logits)
    return vat_terms(forward_u, xu, logits_u, config, rng)


def robust_training_loss(model, theta: Tensor, xl, yl, xu, weights, config: LossConfig,
                         rng: np.random.Generator, teacher: EmaTeacher | None = None,
                         update_stats: bool = False) -> Tensor:
    """Supervised loss plus the per-example-weighted unsupervised loss.

    ``weights`` holds one nonnegative value per unlabeled row and may be a
    recorded Tensor, in which case the result is differentiable in it.

    With a joint layout, labeled and unlabeled rows share one forward pass
    (and so one set of batch statistics, labeled rows weighing 1). With a
    separate layout each part is normalized on its own. ``"auto"`` picks
    joint for WBN models and separate otherwise.
    """
    xl = np.asarray(xl, dtype=np.float64)
    xu = np.asarray(xu, dtype=np.float64)
    weights = weights if isinstance(weights, Tensor) else ad.constant(weights)
    if weights.shape != (len(xu),):
        raise LossError(f"expected {len(xu)} weights, got shape {weights.shape}")
    if (weights.data < 0).any():
        raise LossError("per-example weights must be nonnegative")
    nl = len(xl)
    theta = model.bind(theta)
    if len(xu) == 0:
        logits = model.forward(theta, xl, "train", np.ones(nl), update_stats)
        return supervised_loss(logits, yl)
    joint = config.batch_layout == "joint" or (
        config.batch_layout == "auto" and model.spec.norm_mode == "WBN")
    if joint:
        bw = None
        if model.spec.norm_mode == "WBN":
            bw = ad.concatenate([ad.constant(np.ones(nl)), weights])
        logits = model.forward(theta, np.concatenate([xl, xu]), "train", bw, update_stats)
        logits_l = ad.take(logits, slice(0, nl))
        logits_u = ad.take(logits, slice(nl, None))
    else:
        logits_l = model.forward(theta, xl, "train", np.ones(nl), update_stats)
        logits_u = model.forward(theta, xu, "train", _norm_weights(weights), update_stats)
        xl = xl[:0]
    sup = supervised_loss(logits_l, yl)
    if config.consistency_coefficient == 0:
        return sup
    r = unsupervised_terms(model, theta, xl, xu, weights, logits_u, config, rng, teacher)
    unsup = ad.div(ad.sum(ad.mul(weights, r)), float(len(xu)))
    return ad.add(sup, ad.mul(config.consistency_coefficient, unsup))


def supervised_only_loss(model, theta: Tensor, xl, yl, update_stats: bool = False) -> Tensor:
    nl = len(xl)
    logits = model.forward(theta, np.asarray(xl, dtype=np.float64), "train", np.ones(nl),
                           update_stats)
    return supervised_loss(logits, yl)


def validation_loss(model, theta, xv, yv, mode: str = "eval") -> Tensor:
    """Mean cross-entropy on the validation set.

    ``mode="eval"`` normalizes with running statistics; ``mode="batch"``
    normalizes with the validation batch's own statistics and leaves the
    running statistics untouched.
    """
    if len(xv) == 0:
        raise LossError("validation set is empty")
    xv = np.asarray(xv, dtype=np.float64)
    if mode == "batch" and model.spec.uses_norm and len(xv) >= 2:
        logits = model.forward(theta, xv, "train", np.ones(len(xv)), update_stats=False)
    else:
        logits = model.forward(theta, xv, "eval")
    return supervised_loss(logits, yv)
