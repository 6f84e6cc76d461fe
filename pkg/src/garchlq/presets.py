"""Named parameter sets used by the verification harness, the CLI defaults
and the tests.

``desk`` is a daily-frequency market in the range of sector ETFs: volatility
around 1% a day, pairwise correlation 0.5, drift of a few basis points and a
persistent covariance recursion. Risk aversion is set so the aim portfolio
holds ``W0 = 100`` of capital.

``theory`` is a unit-scale market with clamped prices and a finite cost cap,
in which the small-epsilon hypotheses hold on the whole grid
``eps in [1e-3, 1e-1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import compute_gamma
from .mgarch import ModelParams, PriceFunction


@dataclass(frozen=True, eq=False)
class Preset:
    params: ModelParams
    h: PriceFunction
    chi: float
    gamma: float
    sigma_bar: np.ndarray


def _scalar_garch(mu, sigma_bar, a, b, s0=None) -> ModelParams:
    n = len(mu)
    C = np.linalg.cholesky((1.0 - a * a - b * b) * sigma_bar)
    s0 = np.ones(n) if s0 is None else s0
    return ModelParams(mu=np.asarray(mu, float), A=a * np.eye(n), B=b * np.eye(n), C=C,
                       sigma0=sigma_bar, s0=s0)


def desk(n: int = 3, w0: float = 100.0, clamped: bool = False, chi: float = 1e6) -> Preset:
    vol = np.linspace(0.010, 0.014, n)
    corr = np.full((n, n), 0.5) + 0.5 * np.eye(n)
    sigma_bar = np.outer(vol, vol) * corr
    mu = np.linspace(4e-4, 3e-4, n)
    params = _scalar_garch(mu, sigma_bar, 0.9, 0.3)
    h = PriceFunction.clamped(0.5, 2.0) if clamped else PriceFunction()
    return Preset(params, h, chi, compute_gamma(sigma_bar, mu, w0), sigma_bar)


def theory(n: int = 2, gamma: float = 1000.0, chi: float = 10.0) -> Preset:
    vol = np.linspace(0.20, 0.25, n)
    corr = np.full((n, n), 0.3) + 0.7 * np.eye(n)
    sigma_bar = np.outer(vol, vol) * corr
    mu = np.linspace(0.05, 0.03, n)
    params = _scalar_garch(mu, sigma_bar, 0.5, 0.5)
    return Preset(params, PriceFunction.clamped(0.5, 2.0), chi, float(gamma), sigma_bar)
