"""Training loop for the correction network.

Each outer iteration rolls the expansion policy forward with the current
network, regresses the network onto the realised next-step zeroth-order
costate, and relaxes the parameters::

    theta(k+1) = alpha theta* + (1 - alpha) theta(k)

Before each refit the network ``theta(k)`` that drove rollout ``k`` is scored
against realised targets on a fixed set of held-out paths. That mean squared
error is the proxy ``err(k)`` for how well the network tracks
``E_t[lt0_{t+1}]``; the first entry scores the freshly initialised network.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError, UsageError
from .expansion import path_rollout, tree_rollout
from .fixedpoint import LQConfig
from .mgarch import DEFAULT_CHI, ModelParams, PriceFunction, ScenarioTree, simulate_path
from .neural import (CorrectionNetwork, default_layer_sizes, feature_stats, features, fit, forward,
                     init_params, model_to_dict, output_scale, relax)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_iter: int = 20
    alpha: float = 1.0
    epochs: int = 100
    batch: Optional[int] = None
    lr: float = 1e-3
    seed: int = 0
    paths_per_iter: int = 1
    width: int = 400
    wide_layers: int = 5
    init_std: float = 0.01
    heldout_paths: int = 4
    heldout_seed: int = 1_000_000
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise UsageError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.max_iter < 1 or self.epochs < 0 or self.paths_per_iter < 1:
            raise UsageError("max_iter and paths_per_iter must be >= 1 and epochs >= 0")


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    proxy_error: list = field(default_factory=list)
    final_proxy_error: float = float("nan")
    wall_time: float = 0.0
    completed: int = 0
    diverged: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {"loss": self.loss, "proxy_error": self.proxy_error, "final_proxy_error": self.final_proxy_error,
                "completed": self.completed,
                "diverged": self.diverged, "message": self.message}


def rollout_and_targets(model: ModelParams, h: PriceFunction, net: Optional[CorrectionNetwork], cfg: LQConfig,
                        seed: int, chi: float = DEFAULT_CHI):
    """Simulate one path under the expansion policy and build regression rows.

    Row ``t`` (``t = 1..T``) holds the features of ``(X_{t-1}, S_t, P_t)``
    and the target ``lt0_{t+1}`` (zero for ``t = T``). Returns
    ``(path, x, F, Y)``.
    """
    path = simulate_path(model, h, cfg.T, seed, chi=chi)
    x, lt0, _, _ = path_rollout(path, cfg, model.mu, correction=net)
    T = cfg.T
    F = features(x[:-1], path.s[1:], path.p[1:], model.mu)
    Y = np.zeros((T, model.n))
    Y[:-1] = lt0[2:]
    return path, x, F, Y


def _dataset(model, h, net, cfg, seeds, chi):
    Fs, Ys = [], []
    for sd in seeds:
        _, _, F, Y = rollout_and_targets(model, h, net, cfg, sd, chi)
        Fs.append(F)
        Ys.append(Y)
    return np.concatenate(Fs), np.concatenate(Ys)


def heldout_error(net: CorrectionNetwork, model: ModelParams, h: PriceFunction, cfg: LQConfig, seeds,
                  chi: float = DEFAULT_CHI) -> float:
    """Mean squared error of ``phi`` against fresh realised targets."""
    F, Y = _dataset(model, h, net, cfg, seeds, chi)
    pred = forward(net.params, net.standardize(F), net.scale)
    return float(np.mean(np.sum((pred - Y) ** 2, axis=1)))


def _diverging(losses) -> bool:
    if len(losses) < 6:
        return False
    tail = losses[-6:]
    rising = all(b > a for a, b in zip(tail[:-1], tail[1:]))
    return rising and tail[-1] > 10.0 * tail[0]


def train(model: ModelParams, cfg: LQConfig, tcfg: TrainConfig, h: PriceFunction = PriceFunction(),
          chi: float = DEFAULT_CHI, net: Optional[CorrectionNetwork] = None):
    """Run the outer loop; returns ``(network, TrainReport)``.

    Rollout seeds are ``tcfg.seed * 1000 + k * paths_per_iter + j``; the
    held-out seeds are fixed across iterations. Feature statistics and the
    output scale are frozen from the first iteration's data.
    """
    t0 = time.perf_counter()
    sizes = default_layer_sizes(model.n, tcfg.width, tcfg.wide_layers)
    if net is None:
        net = CorrectionNetwork.untrained(init_params(tcfg.seed, sizes, tcfg.init_std), model.mu, tcfg.seed)
    report = TrainReport()
    heldout = [tcfg.heldout_seed + j for j in range(tcfg.heldout_paths)]
    frozen = False
    for k in range(1, tcfg.max_iter + 1):
        seeds = [tcfg.seed * 1000 + k * tcfg.paths_per_iter + j for j in range(tcfg.paths_per_iter)]
        F, Y = _dataset(model, h, net, cfg, seeds, chi)
        if not frozen:
            mean, std = feature_stats(F)
            net = CorrectionNetwork(net.params, net.mu, mean, std, output_scale(Y), net.seed, net.meta)
            frozen = True
        report.proxy_error.append(heldout_error(net, model, h, cfg, heldout, chi))
        theta_star, trace = fit(net.params, net.standardize(F), Y, tcfg.epochs, tcfg.batch,
                                seed=tcfg.seed * 7919 + k, scale=net.scale, lr=tcfg.lr)
        net = net.with_params(relax(theta_star, net.params, tcfg.alpha))
        report.loss.append(float(min(trace)))
        report.completed = k
        logger.info("iteration %d: loss %.4e, held-out %.4e", k, report.loss[-1], report.proxy_error[-1])
        if tcfg.checkpoint_every and tcfg.checkpoint_dir and k % tcfg.checkpoint_every == 0:
            save_checkpoint(net, tcfg, report, os.path.join(tcfg.checkpoint_dir, f"checkpoint_{k:04d}.json"))
        if _diverging(report.loss):
            report.diverged = True
            report.message = "training loss rose on five consecutive iterations by more than 10x"
            report.wall_time = time.perf_counter() - t0
            raise DivergenceError(report.message, trace=report.loss)
    report.final_proxy_error = heldout_error(net, model, h, cfg, heldout, chi)
    report.message = "completed"
    report.wall_time = time.perf_counter() - t0
    return net, report


def save_checkpoint(net: CorrectionNetwork, tcfg: TrainConfig, report: TrainReport, path) -> None:
    d = model_to_dict(net)
    # the checkpoint directory is where the file lands, not a setting that shaped it;
    # leaving it out keeps reruns into different directories byte-identical
    d["train_config"] = {k: v for k, v in asdict(tcfg).items() if k != "checkpoint_dir"}
    d["train_report"] = report.to_dict()
    with open(path, "w") as fh:
        json.dump(d, fh, indent=1, sort_keys=True)
        fh.write("\n")


def nn_error_probe(correction, tree: ScenarioTree, cfg: LQConfig) -> float:
    """``sup_t`` node-average of ``|phi - E_t[lt0_{t+1}] 1{t<T}|`` on a tree.

    Holdings follow the expansion policy driven by ``correction`` itself, so
    the expectation is taken at the holdings the policy actually reaches.
    """
    x, L0, L1, PH = tree_rollout(tree, cfg, "expansion-nn", correction=correction)
    worst = 0.0
    for t in range(1, tree.T + 1):
        if t < tree.T:
            target = tree.expect(L0[t + 1])
        else:
            target = np.zeros_like(PH[t])
        worst = max(worst, float(np.linalg.norm(PH[t] - target, axis=1).mean()))
    return worst


class TreeLookup:
    """Table lookup of the exact ``E_t[lt0_{t+1}]`` on a tree, usable as a correction."""

    def __init__(self, tree: ScenarioTree, cfg: LQConfig):
        _, _, _, self.table = tree_rollout(tree, cfg, "expansion-oracle")

    def __call__(self, t, x_prev, s, p):
        return self.table[t]
