"""Balancing counterfactual-regression network and its SGD trainer.

Architecture (``kind="ci"``)::

    x --Phi (ReLU dense layers)--> r --concat t--> [r, t] --h (ReLU ..., linear)--> y_hat

The NN4 baseline (``kind="nn4"``) has no Phi block: the hypothesis block
receives ``[x, t]`` directly through four ReLU hidden layers.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``A @ W + b`` on a batch of rows. Dropout is inverted (train-time scaling
by ``1 / (1 - rate)``) and is applied to every hidden activation,
including the representation.

Loss on a batch of ``N`` rows::

    factual    = (1/N) sum_i w_i (y_hat_i - y_i)^2
    imbalance  = || mean(r | t=1) - mean(r | t=0) ||_2
    complexity = mean of squared h-block weight entries (biases excluded)
    total      = factual + alpha * imbalance + gamma * complexity
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError
from .mathcore import RngStream, check_finite

log = logging.getLogger(__name__)

__all__ = [
    "CIConfig",
    "LossBreakdown",
    "NetParams",
    "TrainResult",
    "backward",
    "build_nn4",
    "ci_loss",
    "discrepancy",
    "forward",
    "init_params",
    "loss_and_grad",
    "objective",
    "sample_weights",
    "update_operator",
]

Layer = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class CIConfig:
    alpha: float = 1.0
    gamma: float = 1e-3
    learning_rate: float = 1e-2
    batch_size: int = 64
    epochs: int = 64
    dropout: float = 0.0
    phi_widths: tuple[int, ...] = (25, 25)
    h_widths: tuple[int, ...] = (25, 25)
    nn4_widths: tuple[int, ...] = (25, 25, 25, 25)
    loss: str = "squared_error"

    def __post_init__(self):
        for name in ("phi_widths", "h_widths", "nn4_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.phi_widths or any(w < 1 for w in self.phi_widths + self.h_widths + self.nn4_widths):
            raise ConfigError("layer widths must be positive and Phi needs at least one layer")
        if self.loss != "squared_error":
            raise ConfigError(f"unsupported loss {self.loss!r}")

    @property
    def d_phi(self) -> int:
        return self.phi_widths[-1]

    def replace(self, **changes) -> CIConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class NetParams:
    """Network weights partitioned into a representation block and a
    hypothesis block. Instances are treated as immutable snapshots."""

    kind: str
    n_features: int
    phi: tuple[Layer, ...]
    h: tuple[Layer, ...]
    activation: str = "relu"

    def blocks(self) -> dict[str, list[np.ndarray]]:
        flat = lambda layers: [a for layer in layers for a in layer]  # noqa: E731
        if self.kind == "nn4":
            return {"net": flat(self.h)}
        return {"phi": flat(self.phi), "h": flat(self.h)}

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.phi + self.h for a in layer]

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]

    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_arrays(self, arrays: list[np.ndarray]) -> NetParams:
        it = iter(arrays)
        phi = tuple((next(it), next(it)) for _ in self.phi)
        h = tuple((next(it), next(it)) for _ in self.h)
        return replace(self, phi=phi, h=h)

    def with_flat(self, vec: np.ndarray) -> NetParams:
        out, start = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[start:start + a.size], dtype=np.float64).reshape(a.shape).copy())
            start += a.size
        return self.with_arrays(out)

    def same_structure(self, other: NetParams) -> bool:
        return (self.kind == other.kind and len(self.phi) == len(other.phi)
                and len(self.h) == len(other.h) and self.shapes() == other.shapes())

    def map(self, fn: Callable[..., np.ndarray], *others: NetParams) -> NetParams:
        for o in others:
            if not self.same_structure(o):
                raise ConfigError("parameter structures differ")
        cols = zip(self.arrays(), *(o.arrays() for o in others))
        return self.with_arrays([fn(*c) for c in cols])

    def h_weights(self) -> list[np.ndarray]:
        return [W for W, _ in self.h]


@dataclass(frozen=True)
class LossBreakdown:
    factual: float
    imbalance: float
    complexity: float
    total: float


@dataclass(frozen=True)
class TrainResult:
    params: NetParams
    train_objective: float
    val_objective: float | None
    skipped_batches: int
    steps: int
    val_curve: tuple[float, ...] = ()


# --------------------------------------------------------------------------
# construction


def _dense(rng: RngStream, fan_in: int, fan_out: int, gain: float) -> Layer:
    W = rng.standard_normal(fan_in * fan_out).reshape(fan_in, fan_out) * np.sqrt(gain / fan_in)
    return W, np.zeros(fan_out)


def init_params(config: CIConfig, n_features: int, rng: RngStream) -> NetParams:
    """He-normal initialisation for ReLU layers, ``1/fan_in`` variance for the output."""
    dims = (n_features,) + config.phi_widths
    phi = tuple(_dense(rng, a, b, 2.0) for a, b in zip(dims[:-1], dims[1:]))
    hd = (config.d_phi + 1,) + config.h_widths
    h = tuple(_dense(rng, a, b, 2.0) for a, b in zip(hd[:-1], hd[1:]))
    h += (_dense(rng, hd[-1], 1, 1.0),)
    return NetParams("ci", n_features, phi, h)


def build_nn4(config: CIConfig, n_features: int, rng: RngStream) -> NetParams:
    """Baseline network on ``[x, t]`` with four hidden layers and no Phi block.

    It is trained on the weighted factual loss only; a nonzero ``alpha`` in
    ``config`` is ignored for this network.
    """
    if config.alpha != 0:
        log.warning("NN4 has no representation block; alpha=%g is forced to 0", config.alpha)
    if len(config.nn4_widths) != 4:
        raise ConfigError(f"NN4 needs 4 hidden widths, got {config.nn4_widths}")
    dims = (n_features + 1,) + config.nn4_widths
    h = tuple(_dense(rng, a, b, 2.0) for a, b in zip(dims[:-1], dims[1:]))
    h += (_dense(rng, dims[-1], 1, 1.0),)
    return NetParams("nn4", n_features, (), h)


def zeros_like(params: NetParams) -> NetParams:
    return params.map(np.zeros_like)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class _Cache:
    records: list  # (A_in, Z, relu, mask) per layer, Phi layers first
    n_phi: int
    rep: np.ndarray
    pred: np.ndarray


def _draw_masks(params: NetParams, n: int, rate: float, rng: RngStream) -> list:
    widths = [W.shape[1] for W, _ in params.phi] + [W.shape[1] for W, _ in params.h[:-1]]
    keep = 1.0 - rate
    return [(rng.uniform(n * w).reshape(n, w) >= rate) / keep for w in widths]


def _forward(params: NetParams, X: np.ndarray, t: np.ndarray, masks: list | None) -> _Cache:
    records = []
    A = X
    layers = list(params.phi) + list(params.h)
    n_phi = len(params.phi)
    rep = X
    for i, (W, b) in enumerate(layers):
        if i == n_phi:
            rep = A
            A = np.concatenate([A, t[:, None]], axis=1)
        Z = A @ W + b
        last = i == len(layers) - 1
        mask = None if (last or masks is None) else masks[i]
        if last:
            out = Z
        else:
            out = np.maximum(Z, 0.0)
            if mask is not None:
                out = out * mask
        records.append((A, Z, not last, mask))
        A = out
    return _Cache(records, n_phi, rep, A[:, 0])


def _as_batch(X, t) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X, np.broadcast_to(t, (X.shape[0],)).astype(np.float64)


def forward(params: NetParams, x, t, mode: str = "eval", rng: RngStream | None = None,
            dropout: float = 0.0):
    """Predict outcomes for one row (``x`` 1-d, returns a float) or a batch."""
    single = np.ndim(x) == 1
    X, tt = _as_batch(x, t)
    if X.shape[1] != params.n_features:
        raise ConfigError(f"expected {params.n_features} features, got {X.shape[1]}")
    masks = None
    if mode == "train" and dropout > 0:
        if rng is None:
            raise ConfigError("train-mode dropout needs an rng")
        masks = _draw_masks(params, X.shape[0], dropout, rng)
    elif mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    pred = _forward(params, X, tt, masks).pred
    return float(pred[0]) if single else pred


def sample_weights(t) -> np.ndarray:
    """``w_i = t_i / 2u + (1 - t_i) / 2(1 - u)`` with ``u`` the treated share."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ConfigError("sample_weights of an empty batch")
    u = t.mean()
    if u == 0 or u == 1:
        raise ConfigError("sample_weights needs both treated and control units")
    return t / (2.0 * u) + (1.0 - t) / (2.0 * (1.0 - u))


def discrepancy(rep_treated, rep_control) -> float:
    """Linear mean discrepancy: norm of the difference of group means."""
    a = np.atleast_2d(np.asarray(rep_treated, dtype=np.float64))
    b = np.atleast_2d(np.asarray(rep_control, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise ConfigError("discrepancy needs two nonempty groups")
    return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))


def _alpha(params: NetParams, config: CIConfig) -> float:
    return 0.0 if params.kind == "nn4" else config.alpha


def loss_and_grad(params: NetParams, X, t, y, config: CIConfig, rng: RngStream | None = None,
                  train: bool = False, need_grad: bool = True) -> tuple[LossBreakdown, NetParams | None]:
    """Loss breakdown and its exact gradient for one batch.

    With ``train=True`` and ``config.dropout > 0`` dropout masks are drawn
    from ``rng`` and the gradient is that of the masked network.
    """
    X, t = _as_batch(X, t)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    w = sample_weights(t)
    masks = _draw_masks(params, n, config.dropout, rng) if (train and config.dropout > 0) else None
    cache = _forward(params, X, t, masks)
    resid = cache.pred - y
    factual = float(np.mean(w * resid * resid))

    alpha = _alpha(params, config)
    treated = t == 1
    n1, n0 = int(treated.sum()), n - int(treated.sum())
    if params.kind == "nn4":
        imbalance, diff = 0.0, None
    else:
        diff = cache.rep[treated].mean(axis=0) - cache.rep[~treated].mean(axis=0)
        imbalance = float(np.linalg.norm(diff))

    hw = params.h_weights()
    count = sum(W.size for W in hw)
    complexity = float(sum(np.sum(W * W) for W in hw) / count)
    total = factual + alpha * imbalance + config.gamma * complexity
    breakdown = LossBreakdown(factual, imbalance, complexity, total)
    if not need_grad:
        return breakdown, None

    layers = list(params.phi) + list(params.h)
    grads: list[Layer] = [None] * len(cache.records)  # type: ignore[list-item]
    dZ = (2.0 * w * resid / n)[:, None]
    for i in range(len(cache.records) - 1, -1, -1):
        A_in, Z, _, _ = cache.records[i]
        W = layers[i][0]
        grads[i] = (A_in.T @ dZ, dZ.sum(axis=0))
        if i == 0:
            break
        dA = dZ @ W.T
        if i == cache.n_phi:
            dA = dA[:, :-1]  # drop the treatment column
            if alpha > 0 and imbalance > 0:
                g = diff / imbalance
                dA = dA + alpha * np.where(treated[:, None], g / n1, -g / n0)
        _, Zp, _, maskp = cache.records[i - 1]
        dZ = dA * (Zp > 0)
        if maskp is not None:
            dZ = dZ * maskp

    if config.gamma > 0:
        scale = 2.0 * config.gamma / count
        for j in range(cache.n_phi, len(grads)):
            dW, db = grads[j]
            grads[j] = (dW + scale * layers[j][0], db)

    gp = NetParams(params.kind, params.n_features, tuple(grads[:cache.n_phi]),
                   tuple(grads[cache.n_phi:]), params.activation)
    return breakdown, gp


def ci_loss(params: NetParams, batch, config: CIConfig) -> LossBreakdown:
    X, t, y = batch
    return loss_and_grad(params, X, t, y, config, need_grad=False)[0]


def backward(params: NetParams, batch, config: CIConfig) -> NetParams:
    X, t, y = batch
    return loss_and_grad(params, X, t, y, config)[1]


def objective(params: NetParams, X, t, y, config: CIConfig) -> float:
    """Eval-mode objective on a data split.

    Splits missing one treatment group fall back to the unweighted squared
    error plus the complexity term.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.size and 0 < t.mean() < 1:
        return ci_loss(params, (X, t, y), config).total
    pred = forward(params, np.asarray(X), t)
    hw = params.h_weights()
    complexity = sum(np.sum(W * W) for W in hw) / sum(W.size for W in hw)
    return float(np.mean((pred - np.asarray(y)) ** 2) + config.gamma * complexity)


# --------------------------------------------------------------------------
# inner-loop SGD


def _batches(order: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for start in range(0, order.size, size):
        yield order[start:start + size]


def update_operator(params_in: NetParams, task, config: CIConfig, rng: RngStream,
                    record_curve: bool = False) -> TrainResult:
    """``config.epochs`` epochs of mini-batch SGD on the task's train split.

    Each epoch visits the train rows in a fresh random order. Batches that
    lack a treatment group are skipped. ``params_in`` is never modified.
    """
    train = task.split("train")
    val = task.split("validation") if "validation" in task.splits else None
    if train.n == 0:
        raise ConfigError(f"task {task.task_id} has an empty train split")
    X, t, y = train.X, train.t, train.y
    params = params_in
    skipped = steps = 0
    curve = []
    lr = config.learning_rate
    for _ in range(config.epochs):
        order = rng.permutation(train.n)
        for idx in _batches(order, config.batch_size):
            tb = t[idx]
            if tb.min() == tb.max():
                skipped += 1
                continue
            _, grad = loss_and_grad(params, X[idx], tb, y[idx], config, rng=rng, train=True)
            params = params.map(lambda p, g: p - lr * g, grad)
            steps += 1
        if record_curve and val is not None:
            curve.append(objective(params, val.X, val.t, val.y, config))
    for a in params.arrays():
        check_finite(a, f"parameters after training on task {task.task_id}")
    if skipped:
        log.info("task %s: skipped %d single-group batches", task.task_id, skipped)
    return TrainResult(
        params,
        objective(params, X, t, y, config),
        objective(params, val.X, val.t, val.y, config) if val is not None and val.n else None,
        skipped,
        steps,
        tuple(curve),
    )
