"""Correction network: a tanh multilayer perceptron with hand-written
backpropagation and an Adam optimiser.

The network maps the feature vector ``[X_{t-1}, mu * S_t, vec(P_t)]`` of
length ``n^2 + 2n`` to ``n`` outputs. Every layer, the last included, applies
``tanh``, so the raw output lies in ``(-1, 1)``; a scalar output scale fixed
on the first training pass maps it to target units. Features are
standardised with statistics frozen at the same time.
"""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, NumericalError, UsageError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_WIDTH = 400
DEFAULT_WIDE_LAYERS = 5  # input->400, then four 400->400 maps


def default_layer_sizes(n: int, width: int = DEFAULT_WIDTH, wide_layers: int = DEFAULT_WIDE_LAYERS) -> list:
    """``[n^2 + 2n, width x wide_layers, n]``; for ``n = 11`` this is 143 -> 400 x 5 -> 11."""
    return [n * n + 2 * n] + [width] * wide_layers + [n]


@dataclass
class MLPParams:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise UsageError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise UsageError(f"layer {i}: weight {W.shape} and bias {b.shape} do not fit")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise UsageError(f"layer {i} expects {W.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def size(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MLPParams":
        return MLPParams([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def with_flat(self, v) -> "MLPParams":
        v = np.asarray(v, dtype=float)
        Ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(v[i:i + W.size].reshape(W.shape))
            i += W.size
            bs.append(v[i:i + b.size].copy())
            i += b.size
        return MLPParams(Ws, bs)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in zip(self.weights, self.biases))


def init_params(seed: int, layer_sizes, std: float = 0.01) -> MLPParams:
    """Every weight and bias i.i.d. ``N(0, std^2)``."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        Ws.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        bs.append(rng.normal(0.0, std, size=fan_out))
    return MLPParams(Ws, bs)


def relax(theta_star: MLPParams, theta: MLPParams, alpha: float) -> MLPParams:
    """Parameterwise ``alpha theta* + (1 - alpha) theta``."""
    if not 0 < alpha <= 1:
        raise UsageError(f"alpha must lie in (0, 1], got {alpha}")
    return MLPParams([alpha * A + (1 - alpha) * B for A, B in zip(theta_star.weights, theta.weights)],
                     [alpha * a + (1 - alpha) * b for a, b in zip(theta_star.biases, theta.biases)])


def _check_input(params: MLPParams, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.layer_sizes[0]:
        raise UsageError(f"input has {X.shape[1]} features, network expects {params.layer_sizes[0]}")
    return X


def forward(params: MLPParams, X, scale: float = 1.0) -> np.ndarray:
    """``scale * tanh(... tanh(W1 x + b1) ...)`` for a batch of rows ``X``."""
    a = _check_input(params, X)
    for W, b in zip(params.weights, params.biases):
        a = np.tanh(a @ W.T + b)
    return scale * a


def loss_and_grad(params: MLPParams, X, Y, scale: float = 1.0):
    """Mean over the batch of ``|scale * net(x) - y|^2`` and its gradient.

    Returns ``(loss, MLPParams)`` where the second item holds the gradient
    with the same layout as ``params``.
    """
    X = _check_input(params, X)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N = X.shape[0]
    if N == 0:
        raise UsageError("empty batch")
    acts = [X]
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = np.tanh(acts[-1] @ W.T + b)
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite activation in layer {i}")
        acts.append(a)
    diff = scale * acts[-1] - Y
    loss = float(np.sum(diff * diff) / N)
    delta = (2.0 * scale / N) * diff * (1.0 - acts[-1] ** 2)
    gW = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i]) * (1.0 - acts[i] ** 2)
    return loss, MLPParams(gW, gb)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MLPParams, **hyper) -> "AdamState":
        arrays = [a for W, b in zip(params.weights, params.biases) for a in (W, b)]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_step(params: MLPParams, grad: MLPParams, state: AdamState):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    p_arr = [a for W, b in zip(params.weights, params.biases) for a in (W, b)]
    g_arr = [a for W, b in zip(grad.weights, grad.biases) for a in (W, b)]
    if len(p_arr) != len(state.m) or any(p.shape != m.shape for p, m in zip(p_arr, state.m)):
        raise UsageError("optimiser state does not match the parameter shapes")
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, g_arr)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, g_arr)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps_hat) for p, mi, vi in zip(p_arr, m, v)]
    out = MLPParams(new[0::2], new[1::2])
    return out, AdamState(m, v, t, state.lr, b1, b2, state.eps_hat)


def fit(params: MLPParams, X, Y, epochs: int, batch_size: Optional[int] = None, seed: int = 0,
        scale: float = 1.0, lr: float = 1e-3):
    """Shuffled mini-batch Adam for ``epochs`` passes.

    ``loss_trace[0]`` is the full-data loss before training and
    ``loss_trace[e]`` the loss after epoch ``e``. The parameters with the
    lowest full-data loss seen are returned.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    N = X.shape[0]
    if N == 0:
        raise UsageError("cannot fit on an empty dataset")
    bs = N if batch_size is None else max(1, min(int(batch_size), N))
    rng = np.random.default_rng(seed)
    state = AdamState.zeros_like(params, lr=lr)
    best_loss, _ = loss_and_grad(params, X, Y, scale)
    best = params
    trace = [best_loss]
    cur = params
    for _ in range(int(epochs)):
        order = rng.permutation(N)
        for start in range(0, N, bs):
            idx = order[start:start + bs]
            _, g = loss_and_grad(cur, X[idx], Y[idx], scale)
            cur, state = adam_step(cur, g, state)
        full, _ = loss_and_grad(cur, X, Y, scale)
        trace.append(full)
        if full < best_loss:
            best_loss, best = full, cur
    return best, trace


# --- features and the callable correction --------------------------------------------------


def features(x_prev, s, p, mu) -> np.ndarray:
    """Rows ``[X_{t-1}, mu_i s_i, vec(P_t)]`` for stacked states."""
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    p = np.asarray(p, dtype=float)
    if p.ndim == 2:
        p = p[None]
    N, n = s.shape
    return np.concatenate([x_prev, s * mu, p.reshape(N, n * n)], axis=1)


@dataclass
class CorrectionNetwork:
    """A network plus the frozen feature statistics and output scale.

    Calling it with ``(t, x_prev, s, p)`` returns ``phi`` for each row; ``t``
    is ignored because the network is time-homogeneous.
    """

    params: MLPParams
    mu: np.ndarray
    feat_mean: np.ndarray
    feat_std: np.ndarray
    scale: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def untrained(cls, params: MLPParams, mu, seed: int = 0) -> "CorrectionNetwork":
        d = params.layer_sizes[0]
        return cls(params, np.asarray(mu, dtype=float), np.zeros(d), np.ones(d), 1.0, seed)

    def standardize(self, F) -> np.ndarray:
        return (np.asarray(F, dtype=float) - self.feat_mean) / self.feat_std

    def __call__(self, t, x_prev, s, p) -> np.ndarray:
        return forward(self.params, self.standardize(features(x_prev, s, p, self.mu)), self.scale)

    def with_params(self, params: MLPParams) -> "CorrectionNetwork":
        return CorrectionNetwork(params, self.mu, self.feat_mean, self.feat_std, self.scale, self.seed, dict(self.meta))


def feature_stats(F):
    F = np.atleast_2d(np.asarray(F, dtype=float))
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    floor = 1e-12 * max(float(np.abs(F).max()), 1e-300)
    std = np.where(std > floor, std, 1.0)
    return mean, std


def output_scale(Y, q: float = 99.0) -> float:
    """``q``-th percentile of ``|target|``; 1 when every target is zero."""
    v = float(np.percentile(np.abs(np.asarray(Y, dtype=float)), q))
    return v if v > 0 else 1.0


# --- model file ------------------------------------------------------------------------------


def _enc(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _dec(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(float)


def model_to_dict(net: CorrectionNetwork) -> dict:
    p = net.params
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "correction-network",
        "layer_sizes": p.layer_sizes,
        "activation": "tanh",
        "weights": [_enc(W) for W in p.weights],
        "biases": [_enc(b) for b in p.biases],
        "mu": _enc(net.mu),
        "feature_mean": _enc(net.feat_mean),
        "feature_std": _enc(net.feat_std),
        "output_scale": _enc(np.array([net.scale])),
        "seed": int(net.seed),
        "meta": net.meta,
    }


def model_from_dict(d: dict) -> CorrectionNetwork:
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model format_version {d.get('format_version')!r}")
    sizes = d["layer_sizes"]
    Ws = [_dec(w, (o, i)) for w, i, o in zip(d["weights"], sizes[:-1], sizes[1:])]
    bs = [_dec(b, (o,)) for b, o in zip(d["biases"], sizes[1:])]
    n = sizes[-1]
    return CorrectionNetwork(MLPParams(Ws, bs), _dec(d["mu"], (n,)), _dec(d["feature_mean"], (sizes[0],)),
                             _dec(d["feature_std"], (sizes[0],)), float(_dec(d["output_scale"], (1,))[0]),
                             int(d.get("seed", 0)), dict(d.get("meta", {})))


def save_model(net: CorrectionNetwork, path, extra: Optional[dict] = None) -> None:
    d = model_to_dict(net)
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> CorrectionNetwork:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(d)
