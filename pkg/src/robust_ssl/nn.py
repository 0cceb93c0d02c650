"""MLP layers with interchangeable normalization.

Parameters live in one flat float64 vector ``theta`` so the bilevel code
can treat the whole network as a single differentiable input. A
:class:`ParamLayout` maps names such as ``linear0.weight`` to slices of
that vector. Running statistics are not parameters; they live in
:class:`NormState` objects that train-mode forwards update in place.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_MODES = ("NBN", "BN", "FBN", "WBN")
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    norm_mode: str = "NBN"
    activation: str = "tanh"
    seed: int = 0
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ModelError("layer_widths needs input, at least one hidden layer and an output")
        if any(w <= 0 for w in widths):
            raise ModelError(f"layer widths must be positive, got {widths}")
        if self.norm_mode not in NORM_MODES:
            raise ModelError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if not 0.0 < self.momentum < 1.0:
            raise ModelError("momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ModelError("epsilon must be positive")

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def uses_norm(self) -> bool:
        return self.norm_mode != "NBN"

    def with_norm(self, mode: str) -> "ModelSpec":
        return ModelSpec(self.layer_widths, mode, self.activation, self.seed,
                         self.momentum, self.epsilon)


@dataclass
class NormState:
    """Running statistics of one normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, d: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "NormState":
        return cls(np.zeros(d), np.ones(d), momentum, epsilon)

    def copy(self) -> "NormState":
        return NormState(self.running_mean.copy(), self.running_var.copy(),
                         self.momentum, self.epsilon)

    def _update(self, mu: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mu
        self.running_var = np.maximum((1.0 - m) * self.running_var + m * var, 0.0)


@dataclass
class ParamLayout:
    entries: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)
    size: int = 0

    def add(self, name: str, shape: tuple[int, ...]) -> None:
        self.entries[name] = (self.size, shape)
        self.size += int(np.prod(shape))

    def view(self, theta: Tensor, name: str) -> Tensor:
        start, shape = self.entries[name]
        n = int(np.prod(shape))
        return ad.reshape(ad.take(theta, slice(start, start + n)), shape)

    def bind(self, theta) -> dict[str, Tensor]:
        """Every named view of ``theta`` at once, for reuse across forward passes."""
        if isinstance(theta, dict):
            return theta
        theta = theta if isinstance(theta, Tensor) else ad.constant(theta)
        return {name: self.view(theta, name) for name in self.entries}

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for name, (start, shape) in self.entries.items():
            out[name] = np.asarray(theta[start:start + int(np.prod(shape))]).reshape(shape)
        return out

    def flatten(self, values: dict[str, np.ndarray]) -> np.ndarray:
        theta = np.zeros(self.size)
        for name, (start, shape) in self.entries.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
            theta[start:start + arr.size] = arr.ravel()
        return theta


def param_layout(spec: ModelSpec) -> ParamLayout:
    layout = ParamLayout()
    widths = spec.layer_widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layout.add(f"linear{i}.weight", (fan_in, fan_out))
        layout.add(f"linear{i}.bias", (fan_out,))
        if i < spec.n_hidden and spec.uses_norm:
            layout.add(f"norm{i}.gamma", (fan_out,))
            layout.add(f"norm{i}.beta", (fan_out,))
    return layout


@dataclass
class Params:
    """Flat parameter vector plus the running statistics of each norm layer."""

    theta: np.ndarray
    norms: list[NormState]

    def copy(self) -> "Params":
        return Params(self.theta.copy(), [n.copy() for n in self.norms])


def init_params(spec: ModelSpec) -> Params:
    """Glorot-uniform weights, zero biases, gamma=1, beta=0, fresh running stats."""
    rng = np.random.default_rng(spec.seed)
    layout = param_layout(spec)
    values = {}
    widths = spec.layer_widths
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values[f"linear{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        values[f"linear{i}.bias"] = np.zeros(fan_out)
        if f"norm{i}.gamma" in layout.entries:
            values[f"norm{i}.gamma"] = np.ones(fan_out)
            values[f"norm{i}.beta"] = np.zeros(fan_out)
    norms = []
    if spec.uses_norm:
        norms = [NormState.fresh(w, spec.momentum, spec.epsilon) for w in widths[1:-1]]
    return Params(layout.flatten(values), norms)


# normalization -----------------------------------------------------------


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")


def _eval_norm(x: Tensor, gamma, beta, state: NormState) -> Tensor:
    scale = 1.0 / np.sqrt(state.running_var + state.epsilon)
    xhat = ad.mul(ad.sub(x, state.running_mean), scale)
    return ad.add(ad.mul(gamma, xhat), beta)


def batch_norm(x: Tensor, gamma, beta, state: NormState, mode: str = "train",
               update_stats: bool = True) -> Tensor:
    """Standard batch normalization with biased batch variance."""
    _check_mode(mode)
    if mode == "eval":
        return _eval_norm(x, gamma, beta, state)
    m = x.shape[0]
    if m < 2:
        raise ModelError(f"batch norm in train mode needs at least 2 rows, got {m}")
    if update_stats:
        state._update(x.data.mean(axis=0), x.data.var(axis=0))
    xhat = ad.standardize(x, None, state.epsilon)
    return ad.add(ad.mul(gamma, xhat), beta)


def frozen_batch_norm(x: Tensor, gamma, beta, state: NormState, mode: str = "train") -> Tensor:
    """Batch statistics in train mode, but running statistics are never written."""
    return batch_norm(x, gamma, beta, state, mode, update_stats=False)


def _check_weights(w: Tensor, m: int) -> None:
    if w.shape != (m,):
        raise ModelError(f"batch weights must have shape ({m},), got {w.shape}")
    if (w.data < 0).any():
        raise ModelError("batch weights must be nonnegative")
    if not w.data.sum() > 0:
        raise ModelError("batch weights must have a positive sum")


def weighted_moments(x: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Weighted per-feature mean and biased variance of the rows of ``x``."""
    m = x.shape[0]
    wcol = ad.reshape(w, (m, 1))
    total = ad.sum(w)
    mu = ad.div(ad.sum(ad.mul(wcol, x), axis=0), total)
    centered = ad.sub(x, mu)
    var = ad.div(ad.sum(ad.mul(wcol, ad.mul(centered, centered)), axis=0), total)
    return mu, var


def weighted_batch_norm(x: Tensor, w, gamma, beta, state: NormState, mode: str = "train",
                        update_stats: bool = True) -> Tensor:
    """Batch normalization whose statistics weight each row by ``w``.

    The weighted mean is used both for the variance and for centering, so a
    row with zero weight is normalized without contributing to the
    statistics. Gradients flow into ``w``.
    """
    _check_mode(mode)
    if mode == "eval":
        return _eval_norm(x, gamma, beta, state)
    w = ad.constant(w) if not isinstance(w, Tensor) else w
    _check_weights(w, x.shape[0])
    if update_stats:
        wd = w.data / w.data.sum()
        mu = wd @ x.data
        state._update(mu, wd @ (x.data - mu) ** 2)
    xhat = ad.standardize(x, w, state.epsilon)
    return ad.add(ad.mul(gamma, xhat), beta)


# the network -------------------------------------------------------------


def mlp_forward(spec: ModelSpec, theta, norms: list[NormState], batch, mode: str = "train",
                batch_weights=None, update_stats: bool = True,
                layout: ParamLayout | None = None) -> Tensor:
    """Logits of the MLP; ``theta`` is the flat parameter vector (or its bound views).

    ``batch_weights`` is required for WBN in train mode and ignored
    otherwise. ``update_stats=False`` runs a train-mode forward that leaves
    running statistics alone (lookahead steps, perturbed copies).
    """
    _check_mode(mode)
    layout = layout or param_layout(spec)
    views = layout.bind(theta)
    h = batch if isinstance(batch, Tensor) else ad.constant(batch)
    if h.ndim != 2 or h.shape[1] != spec.layer_widths[0]:
        raise ModelError(f"batch must have shape [m, {spec.layer_widths[0]}], got {h.shape}")
    weighted = spec.norm_mode == "WBN" and mode == "train"
    if weighted:
        if batch_weights is None:
            raise ModelError("WBN in train mode requires batch weights")
        batch_weights = batch_weights if isinstance(batch_weights, Tensor) \
            else ad.constant(batch_weights)
        _check_weights(batch_weights, h.shape[0])
    act = ACTIVATIONS[spec.activation]
    n_linear = len(spec.layer_widths) - 1
    for i in range(n_linear):
        h = ad.linear(h, views[f"linear{i}.weight"], views[f"linear{i}.bias"])
        if i == n_linear - 1:
            break
        if spec.uses_norm:
            gamma = views[f"norm{i}.gamma"]
            beta = views[f"norm{i}.beta"]
            state = norms[i]
            if spec.norm_mode == "BN":
                h = batch_norm(h, gamma, beta, state, mode, update_stats)
            elif spec.norm_mode == "FBN":
                h = frozen_batch_norm(h, gamma, beta, state, mode)
            else:
                h = weighted_batch_norm(h, batch_weights, gamma, beta, state, mode, update_stats)
        h = act(h)
    return h


class Model:
    """A network description bound to its running statistics.

    The flat parameter vector is passed to :meth:`forward` explicitly, since
    the bilevel code evaluates the same network at several parameter points.
    """

    def __init__(self, spec: ModelSpec, norms: list[NormState] | None = None):
        self.spec = spec
        self.layout = param_layout(spec)
        if norms is None:
            norms = [NormState.fresh(w, spec.momentum, spec.epsilon)
                     for w in spec.layer_widths[1:-1]] if spec.uses_norm else []
        self.norms = norms

    @property
    def n_params(self) -> int:
        return self.layout.size

    def forward(self, theta, x, mode: str = "train", batch_weights=None,
                update_stats: bool = True) -> Tensor:
        return mlp_forward(self.spec, theta, self.norms, x, mode, batch_weights,
                           update_stats, self.layout)

    def bind(self, theta) -> dict[str, Tensor]:
        """Parameter views to pass to several :meth:`forward` calls at the same point."""
        return self.layout.bind(theta)

    def predict(self, theta, x) -> np.ndarray:
        theta = theta.data if isinstance(theta, Tensor) else theta
        with ad.no_grad():
            logits = self.forward(theta, x, mode="eval")
        return logits.data.argmax(axis=1)

    def accuracy(self, theta, x, y) -> float:
        return float(np.mean(self.predict(theta, x) == np.asarray(y)))


def predict(spec: ModelSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Eval-mode class predictions."""
    with ad.no_grad():
        logits = mlp_forward(spec, params.theta, params.norms, x, mode="eval")
    return logits.data.argmax(axis=1)


# checkpoints -------------------------------------------------------------


def checkpoint_dict(spec: ModelSpec, params: Params) -> dict:
    layout = param_layout(spec)
    out = {}
    for name, arr in layout.unflatten(params.theta).items():
        out[name] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
    for i, st in enumerate(params.norms):
        out[f"norm{i}.running_mean"] = {"shape": [st.running_mean.size],
                                        "values": st.running_mean.tolist()}
        out[f"norm{i}.running_var"] = {"shape": [st.running_var.size],
                                       "values": st.running_var.tolist()}
    return dict(sorted(out.items()))


def save_checkpoint(spec: ModelSpec, params: Params, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(spec, params), sort_keys=True, indent=1))


def load_checkpoint(spec: ModelSpec, path) -> Params:
    raw = json.loads(Path(path).read_text())
    layout = param_layout(spec)
    values = {}
    for name, (_, shape) in layout.entries.items():
        if name not in raw:
            raise ModelError(f"checkpoint is missing {name}")
        values[name] = np.array(raw[name]["values"], dtype=np.float64).reshape(raw[name]["shape"])
    norms = []
    for i, d in enumerate(spec.layer_widths[1:-1] if spec.uses_norm else []):
        st = NormState.fresh(d, spec.momentum, spec.epsilon)
        st.running_mean = np.array(raw[f"norm{i}.running_mean"]["values"], dtype=np.float64)
        st.running_var = np.array(raw[f"norm{i}.running_var"]["values"], dtype=np.float64)
        norms.append(st)
    return Params(layout.flatten(values), norms)
