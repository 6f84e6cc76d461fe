"""Verification harness: six numerical checks with pass/fail outcomes.

Each check builds its own small problem from the presets, so the harness
runs without any input files. The defaults are sized to finish in well under
a minute on a laptop. ``run_all`` returns :class:`CheckResult` rows, which the
CLI prints as a table.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import GarchLQError
from .estimation import ReturnPanel, fit_mgarch
from .expansion import proposition2_error, tree_rollout
from .fixedpoint import BoundConstants, LQConfig, measure_damping, proposition1_bound, theorem1_certificate
from .mgarch import (ModelParams, build_tree, equilibrium_covariance, equilibrium_residual, simulate_path)
from .neural import init_params, loss_and_grad
from .presets import desk, theory

logger = logging.getLogger(__name__)

ZERO_RTOL = 1e-13
CHECKS = ("condition4", "proposition1", "theorem1", "proposition2", "gradient", "equilibrium")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<13} value={self.value:.4g} threshold={self.threshold:.4g}  {self.detail}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("seconds")
        return d


def check_condition4(delta: float = 0.99, epsilon: float = 0.003, T: int = 60, n_paths: int = 20,
                     n: int = 3, seed: int = 0) -> CheckResult:
    """Measured damping ``Delta(eps)`` on simulated desk paths must be below 1."""
    pr = desk(n)
    cfg = LQConfig(delta, epsilon, pr.gamma, T, np.zeros(n))
    worst = max(measure_damping(simulate_path(pr.params, pr.h, T, seed + i, pr.chi), cfg)
                for i in range(n_paths))
    return CheckResult("condition4", worst < 1.0, worst, 1.0, f"sup over {n_paths} paths of T={T}")


def check_proposition1(eps_grid=(1e-3, 1e-2, 1e-1), n_paths: int = 100, T: int = 50,
                       seed: int = 0) -> CheckResult:
    """Damping matrix norm against its small-epsilon bound on clamped-price paths.

    Epsilons outside the bound's hypothesis are skipped and listed. The
    value reported is the largest ratio of measurement to bound.
    """
    pr = theory()
    consts = BoundConstants.from_model(pr.params, pr.h, pr.chi, pr.gamma)
    paths = [simulate_path(pr.params, pr.h, T, seed + i, pr.chi) for i in range(n_paths)]
    worst, used, skipped = 0.0, [], []
    for eps in eps_grid:
        if eps * consts.kappa >= 1.0:
            skipped.append(eps)
            continue
        cfg = LQConfig(0.5, eps, pr.gamma, T, np.zeros(pr.params.n))
        measured = max(measure_damping(p, cfg) for p in paths) / cfg.delta
        worst = max(worst, measured / proposition1_bound(consts, eps))
        used.append(eps)
    ok = bool(used) and worst <= 1.0
    return CheckResult("proposition1", ok, worst, 1.0, f"eps checked {used}, outside hypothesis {skipped}",
                       extra={"checked": used, "skipped": skipped})


def check_theorem1(seed: int = 0, T: int = 5, M: int = 2, epsilon: float = 0.01,
                   rel_tol: float = 1e-10) -> CheckResult:
    """Two-step error ``E(k)`` relative to ``E(1)`` on an ``n=2`` clamped tree, for ``k >= T``."""
    pr = desk(2, clamped=True, chi=10.0)
    tree = build_tree(pr.params, pr.h, T, M, seed, pr.chi)
    cfg = LQConfig(0.99, epsilon, pr.gamma, T, np.zeros(2))
    rep = theorem1_certificate(tree, cfg, rel_tol=rel_tol)
    worst = max(rep.relative_errors()[T:])
    detail = f"Delta={rep.delta_eps:.3f}"
    if not rep.passed:
        detail += f", fails at k={rep.offending_k} with E={rep.offending_value:.3e}"
    return CheckResult("theorem1", rep.passed, worst, rel_tol, detail,
                       extra={"relative_errors": rep.relative_errors()})


def check_proposition2(eps_grid=(0.001, 0.003, 0.01, 0.03), seed: int = 0, T: int = 4, M: int = 2,
                       min_slope: float = 1.8) -> CheckResult:
    """Log-log slope of the first-order expansion error, plus exactness at ``delta = 0``."""
    pr = theory()
    tree = build_tree(pr.params, pr.h, T, M, seed, pr.chi)
    cfg = LQConfig(0.99, eps_grid[0], pr.gamma, T, np.zeros(pr.params.n))
    table = proposition2_error(tree, cfg, eps_grid)
    zero = proposition2_error(tree, cfg.replace(delta=0.0), eps_grid)
    zero_max = float(max(zero.errors))
    # at delta = 0 both sides are the same closed form evaluated in a different
    # operation order, so "zero" means rounding level relative to the costate
    _, L0, _, _ = tree_rollout(tree, cfg.replace(delta=0.0), "expansion-oracle")
    size = max(float(np.abs(L0[t]).max()) for t in range(1, T + 1))
    ok = table.slope >= min_slope and zero_max <= ZERO_RTOL * size
    return CheckResult("proposition2", ok, table.slope, min_slope,
                       f"errors {['%.3e' % e for e in table.errors]}, delta=0 max error {zero_max:.1e}",
                       extra={"errors": list(table.errors), "delta0_errors": list(zero.errors)})


def gradient_check_instance(rng: np.random.Generator, fd_step: float = 1e-6) -> float:
    """Largest relative error of the analytic gradient on one random net and batch."""
    n_in = int(rng.integers(2, 9))
    sizes = [n_in] + [int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 4)))] + [int(rng.integers(1, 4))]
    params = init_params(int(rng.integers(2**31)), sizes, std=float(rng.uniform(0.3, 1.0)))
    X = rng.normal(size=(int(rng.integers(1, 8)), n_in))
    Y = rng.normal(size=(X.shape[0], sizes[-1])) * 0.5
    scale = float(rng.uniform(0.5, 2.0))
    _, g = loss_and_grad(params, X, Y, scale)
    v = params.flat()
    ga = g.flat()
    gn = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = fd_step
        lp, _ = loss_and_grad(params.with_flat(v + e), X, Y, scale)
        lm, _ = loss_and_grad(params.with_flat(v - e), X, Y, scale)
        gn[i] = (lp - lm) / (2 * fd_step)
    denom = np.maximum(np.abs(ga) + np.abs(gn), 1e-8)
    return float(np.max(np.abs(ga - gn) / denom))


def check_gradient(n_instances: int = 20, seed: int = 0, max_rel: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = max(gradient_check_instance(rng) for _ in range(n_instances))
    return CheckResult("gradient", worst < max_rel, worst, max_rel, f"{n_instances} random nets")


def fitted_params(n: int = 11, L: int = 500, seed: int = 11, max_iter: int = 10,
                  loss_kind: str = "paper-smoothness") -> ModelParams:
    """Parameters fitted to a panel simulated from the desk preset."""
    pr = desk(n)
    path = simulate_path(pr.params, pr.h, L, seed, pr.chi)
    rep = fit_mgarch(ReturnPanel(np.arange(L), path.r[1:]), loss_kind=loss_kind, max_iter=max_iter)
    return rep.params


def check_equilibrium(params: Optional[ModelParams] = None, max_residual: float = 1e-10,
                      scalar_tol: float = 1e-12) -> CheckResult:
    """Stationary covariance residual on fitted parameters and the scalar closed form."""
    if params is None:
        params = fitted_params()
    sig = equilibrium_covariance(params)
    res = equilibrium_residual(params, sig)
    a, b, c = 0.6, 0.5, 0.3
    scalar = ModelParams(mu=[0.0], A=[[a]], B=[[b]], C=[[c]], sigma0=[[c * c]], s0=[1.0])
    closed = c * c / (1 - a * a - b * b)
    gap = abs(float(equilibrium_covariance(scalar)[0, 0]) - closed)
    ok = res < max_residual and gap <= scalar_tol
    return CheckResult("equilibrium", ok, res, max_residual,
                       f"n={params.n} residual, scalar closed-form gap {gap:.1e}", extra={"scalar_gap": gap})


def run_all(params: Optional[ModelParams] = None, only=None) -> list:
    """Run the named checks (all by default); errors become failed rows."""
    runners = {
        "condition4": check_condition4,
        "proposition1": check_proposition1,
        "theorem1": check_theorem1,
        "proposition2": check_proposition2,
        "gradient": check_gradient,
        "equilibrium": lambda: check_equilibrium(params),
    }
    names = CHECKS if not only else list(only)
    out = []
    for name in names:
        t0 = time.perf_counter()
        try:
            res = runners[name]()
        except (GarchLQError, np.linalg.LinAlgError, FloatingPointError) as exc:
            res = CheckResult(name, False, math.nan, math.nan, f"error: {exc}")
        res.seconds = time.perf_counter() - t0
        logger.info("%s", res.line())
        out.append(res)
    return out
