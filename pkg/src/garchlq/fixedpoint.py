"""Forward-backward optimality system and its two-step fixed-point solver.

The first-order conditions of the finite-horizon problem are::

    X_t      = X_{t-1} - Psi_t^{-1} lambda_t / (eps q_t)
    lambda_t = (I + Pt_t Psi_t^{-1})^{-1} (delta E_t lambda_{t+1} - Psi_t mu + gamma P_t X_{t-1})

with ``Pt_t = gamma P_t / (eps q_t)`` and ``lambda_{T+1} = 0``. On a
:class:`~garchlq.mgarch.ScenarioTree` every conditional expectation is an
exact branch average, so the solution computed here is the ground truth the
approximate policies are measured against.

The solver alternates a forward pass (holdings from the current costate) with
an inner backward fixed point (costate from the current holdings). All linear
systems are solved by LU factorisation; no explicit inverses are formed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError, NumericalError, PreconditionError, UsageError
from .mgarch import MarketState, ModelParams, PriceFunction, ScenarioTree

logger = logging.getLogger(__name__)

COND_GUARD = 1e12


@dataclass(frozen=True, eq=False)
class LQConfig:
    """Control problem settings: discount, cost scale, risk aversion, horizon, start."""

    delta: float
    epsilon: float
    gamma: float
    T: int
    x0: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise UsageError(f"delta must lie in [0, 1), got {self.delta}")
        if not self.epsilon > 0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        if not self.gamma > 0:
            raise UsageError(f"gamma must be positive, got {self.gamma}")
        if int(self.T) != self.T or self.T < 1:
            raise UsageError(f"T must be a positive integer, got {self.T}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "T", int(self.T))

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    def replace(self, **changes) -> "LQConfig":
        f = dict(delta=self.delta, epsilon=self.epsilon, gamma=self.gamma, T=self.T, x0=self.x0)
        f.update(changes)
        return LQConfig(**f)


@dataclass(frozen=True)
class BoundConstants:
    """Primitive constants behind the damping and iteration bounds.

    ``kappa = chi h_inf / (gamma s_floor^2 c)`` and ``omega = chi h_inf / s_floor``.
    """

    chi: float
    h_inf: float
    s_floor: float
    c: float
    gamma: float
    kappa: float
    omega: float
    delta_eps: float = float("nan")

    @classmethod
    def from_primitives(cls, chi, h_inf, s_floor, c, gamma, delta_eps=float("nan")):
        if min(chi, h_inf, s_floor, c, gamma) <= 0:
            raise UsageError("bound constants need chi, h_inf, s_floor, c and gamma all positive")
        kappa = chi * h_inf / (gamma * s_floor ** 2 * c)
        omega = chi * h_inf / s_floor
        return cls(float(chi), float(h_inf), float(s_floor), float(c), float(gamma),
                   float(kappa), float(omega), float(delta_eps))

    @classmethod
    def from_model(cls, params: ModelParams, h: PriceFunction, chi: float, gamma: float,
                   delta_eps=float("nan")):
        if not h.is_clamped:
            raise PreconditionError("bound constants need a clamped price function (finite floor and cap)")
        return cls.from_primitives(chi, h.cap, h.floor, params.c_lower, gamma, delta_eps)

    def check(self, rtol: float = 1e-12) -> bool:
        """Recompute ``kappa`` and ``omega`` from the primitives and compare."""
        k = self.chi * self.h_inf / (self.gamma * self.s_floor ** 2 * self.c)
        o = self.chi * self.h_inf / self.s_floor
        return abs(k - self.kappa) <= rtol * abs(k) and abs(o - self.omega) <= rtol * abs(o)


@dataclass
class CostateTrajectory:
    """Per-level costates and holdings on a tree.

    ``lam[t]`` has shape ``(M**t, n)`` for ``t = 1..T``; ``lam[0]`` is an
    unused zero row and ``lam[T+1]`` is the terminal zero. ``x[t]`` holds
    ``X_t`` for ``t = 0..T``.
    """

    lam: list
    x: list
    iteration: int = 0
    inner_iterations: int = 0

    @property
    def T(self) -> int:
        return len(self.x) - 1

    def trades(self, t: int, M: int) -> np.ndarray:
        parent = np.arange(self.x[t].shape[0]) // M
        return self.x[t] - self.x[t - 1][parent]


@dataclass
class SolveDiagnostics:
    errors: list
    outer_iterations: int
    inner_iterations: list
    delta_eps: float
    stop_reason: str
    converged: bool


# --- single-state operations ------------------------------------------------------


def _damping_system(s, p, q, cfg: LQConfig) -> np.ndarray:
    """``I + Pt Psi^{-1}`` for one state or a stack of states."""
    s = np.asarray(s, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = s.shape[-1]
    scale = cfg.gamma / (cfg.epsilon * q)
    return np.eye(n) + scale[..., None, None] * p / s[..., None, :]


def _guarded_solve(Mx, rhs):
    cond = np.linalg.cond(Mx)
    if np.any(~np.isfinite(cond)) or np.max(cond) > COND_GUARD:
        raise NumericalError(f"damping system is ill-conditioned (condition number {np.max(cond):.3e})")
    return np.linalg.solve(Mx, rhs[..., None])[..., 0]


def forward_state_step(x_prev, lambda_t, state: MarketState, cfg: LQConfig) -> np.ndarray:
    """Holdings update ``X_t = X_{t-1} - Psi^{-1} lambda_t / (eps q)``."""
    return np.asarray(x_prev, dtype=float) - np.asarray(lambda_t, dtype=float) / (cfg.epsilon * state.q * state.s)


def backward_costate_step(expected_lambda_next, x_prev, state: MarketState, cfg: LQConfig,
                          mu=None) -> np.ndarray:
    """Costate from the expected next costate and the previous holdings.

    ``mu`` defaults to a zero drift; callers on a tree pass the model drift.
    """
    n = state.n
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    rhs = (cfg.delta * np.asarray(expected_lambda_next, dtype=float) - state.s * mu
           + cfg.gamma * state.p @ np.asarray(x_prev, dtype=float))
    return _guarded_solve(_damping_system(state.s, state.p, state.q, cfg), rhs)


# --- tree solver ---------------------------------------------------------------------


class _TreeSystem:
    """Per-level matrices of the optimality system on a fixed tree."""

    def __init__(self, tree: ScenarioTree, cfg: LQConfig):
        if cfg.T != tree.T:
            raise UsageError(f"config horizon T={cfg.T} does not match tree depth {tree.T}")
        if cfg.n != tree.n:
            raise UsageError(f"x0 has {cfg.n} assets, tree has {tree.n}")
        self.tree, self.cfg = tree, cfg
        self.mu = tree.params.mu
        self.Mx = [None] + [_damping_system(tree.s[t], tree.p[t], tree.q[t], cfg) for t in range(1, tree.T + 1)]
        worst = max(float(np.max(np.linalg.cond(m))) for m in self.Mx[1:])
        if not np.isfinite(worst) or worst > COND_GUARD:
            raise NumericalError(f"damping system is ill-conditioned (condition number {worst:.3e})")

    def zeros(self) -> list:
        n, M, T = self.tree.n, self.tree.M, self.tree.T
        return [np.zeros((M ** t, n)) for t in range(T + 2)]

    def forward(self, lam) -> list:
        tr, cfg = self.tree, self.cfg
        x = [cfg.x0[None, :].copy()]
        for t in range(1, tr.T + 1):
            x.append(x[-1][tr.parent(t)] - lam[t] / (cfg.epsilon * tr.q[t][:, None] * tr.s[t]))
        return x

    def sweep(self, lam, x) -> list:
        """One Jacobi sweep of the backward equation at every level."""
        tr, cfg = self.tree, self.cfg
        out = self.zeros()
        for t in range(1, tr.T + 1):
            nxt = cfg.delta * tr.expect(lam[t + 1]) if t < tr.T else 0.0
            xp = x[t - 1][tr.parent(t)]
            rhs = nxt - tr.s[t] * self.mu + cfg.gamma * np.einsum("kij,kj->ki", tr.p[t], xp)
            out[t] = np.linalg.solve(self.Mx[t], rhs[..., None])[..., 0]
        return out

    def damping(self) -> float:
        worst = max(float(1.0 / np.linalg.svd(m, compute_uv=False)[..., -1].min()) for m in self.Mx[1:])
        return self.cfg.delta * worst


def _sup_mean_norm(a, b, T) -> float:
    """``sup_t E|a_t - b_t|`` over levels ``1..T`` with uniform node weights."""
    return max(float(np.linalg.norm(a[t] - b[t], axis=1).mean()) for t in range(1, T + 1))


def _sup_node_change(a, b, T) -> float:
    return max(float(np.abs(a[t] - b[t]).max()) for t in range(1, T + 1))


def _inner(system: _TreeSystem, x, lam0, tol, max_iter):
    lam = lam0
    T = system.tree.T
    for sweep in range(1, max_iter + 1):
        new = system.sweep(lam, x)
        change = _sup_node_change(new, lam, T)
        lam = new
        if not np.isfinite(change):
            break
        if change <= tol:
            return lam, max(sweep - 1, 1)
    delta_eps = system.damping()
    raise DivergenceError(f"inner fixed point did not converge in {max_iter} sweeps "
                          f"(measured damping {delta_eps:.4g})", trace=[], delta_eps=delta_eps)


def inner_fixed_point(tree: ScenarioTree, x_path, cfg: LQConfig, tol: float = 1e-10,
                      max_iter: Optional[int] = None, lam_init=None) -> CostateTrajectory:
    """Backward fixed point for the costate with the holdings held fixed.

    ``x_path[t]`` are the per-level holdings ``X_t`` (``t = 0..T``). The
    returned ``iteration`` count is the number of sweeps after which the
    costate stopped changing, so a problem without backward coupling reports 1.
    """
    system = _TreeSystem(tree, cfg)
    if max_iter is None:
        max_iter = 10 * (tree.T + 1) + 50
    lam0 = system.zeros() if lam_init is None else [np.array(v, dtype=float) for v in lam_init]
    lam, its = _inner(system, list(x_path), lam0, tol, max_iter)
    return CostateTrajectory(lam, list(x_path), iteration=0, inner_iterations=its)


def solve_two_step(tree: ScenarioTree, cfg: LQConfig, tol: float = 1e-8, max_outer: int = 200,
                   inner_tol: float = 1e-10, lam_init=None, require_damping: bool = True,
                   stop_on_tol: bool = True):
    """Two-step iteration: forward holdings pass, then inner backward fixed point.

    Returns ``(trajectory, diagnostics)``. ``diagnostics.errors[k]`` is
    ``sup_t E|lambda^(k+1) - lambda^(k)|`` starting from ``lambda^(0)``
    (zero unless ``lam_init`` is given). The final holdings are recomputed
    from the returned costate, so the forward equation holds exactly.
    """
    system = _TreeSystem(tree, cfg)
    delta_eps = system.damping()
    if require_damping and delta_eps >= 1.0:
        raise PreconditionError(f"damping condition fails: measured {delta_eps:.4g} >= 1")
    T = tree.T
    lam = system.zeros() if lam_init is None else [np.array(v, dtype=float) for v in lam_init]
    errors, inner_its = [], []
    reason, converged = "k_max", False
    for k in range(max_outer):
        x = system.forward(lam)
        new, its = _inner(system, x, lam, inner_tol, 10 * (T + 1) + 50)
        err = _sup_mean_norm(new, lam, T)
        errors.append(err)
        inner_its.append(its)
        lam = new
        if not np.isfinite(err) or (len(errors) > 1 and err > 1e12 * max(errors[0], 1e-300)):
            raise DivergenceError("two-step iteration diverged", trace=errors, delta_eps=delta_eps)
        if stop_on_tol and err < tol:
            reason, converged = "tol", True
            break
        if err == 0.0:
            reason, converged = "exact", True
            break
    else:
        converged = bool(errors) and errors[-1] < tol
    x = system.forward(lam)
    traj = CostateTrajectory(lam, x, iteration=len(errors), inner_iterations=inner_its[-1] if inner_its else 0)
    logger.debug("two-step solve: %d outer iterations, stop=%s, last error %.3e",
                 len(errors), reason, errors[-1] if errors else float("nan"))
    return traj, SolveDiagnostics(errors, len(errors), inner_its, delta_eps, reason, converged)


def tree_value(tree: ScenarioTree, x_levels, cfg: LQConfig):
    """Objective on a tree for per-level holdings: ``(V, cost, risk, ret)``.

    ``V = sum_{t=1..T} delta^t E[mu' Psi_t X_t - (eps q_t / 2) a_t' Psi_t a_t - (gamma/2) X_t' P_t X_t]``.
    """
    mu = tree.params.mu
    ret = cost = risk = 0.0
    for t in range(1, tree.T + 1):
        x = x_levels[t]
        a = x - x_levels[t - 1][tree.parent(t)]
        w = cfg.delta ** t
        ret += w * float(np.mean((tree.s[t] * mu * x).sum(axis=1)))
        cost += w * float(np.mean(0.5 * cfg.epsilon * tree.q[t] * (a * a * tree.s[t]).sum(axis=1)))
        risk += w * float(np.mean(0.5 * cfg.gamma * np.einsum("ki,kij,kj->k", x, tree.p[t], x)))
    return ret - cost - risk, cost, risk, ret


def costate_residuals(tree: ScenarioTree, traj: CostateTrajectory, cfg: LQConfig):
    """Max residuals of the forward equation and of ``lambda_t = delta E lambda_{t+1} - Psi mu + gamma P X_t``."""
    mu = tree.params.mu
    r_fwd = r_back = 0.0
    for t in range(1, tree.T + 1):
        xp = traj.x[t - 1][tree.parent(t)]
        fwd = xp - traj.lam[t] / (cfg.epsilon * tree.q[t][:, None] * tree.s[t])
        r_fwd = max(r_fwd, float(np.abs(fwd - traj.x[t]).max()))
        nxt = cfg.delta * tree.expect(traj.lam[t + 1]) if t < tree.T else 0.0
        back = nxt - tree.s[t] * mu + cfg.gamma * np.einsum("kij,kj->ki", tree.p[t], traj.x[t])
        r_back = max(r_back, float(np.abs(back - traj.lam[t]).max()))
    return r_fwd, r_back


# --- diagnostics --------------------------------------------------------------------


def measure_damping(obj, cfg: LQConfig) -> float:
    """``sup delta |(I + Pt Psi^{-1})^{-1}|_2`` over the decision states ``t >= 1``.

    ``obj`` is a :class:`ScenarioTree`, a :class:`~garchlq.mgarch.MarketPath`,
    or a single :class:`MarketState`.
    """
    if cfg.delta == 0:
        return 0.0
    if isinstance(obj, MarketState):
        stacks = [(obj.s[None], obj.p[None], np.array([obj.q]))]
    elif isinstance(obj, ScenarioTree):
        stacks = [(obj.s[t], obj.p[t], obj.q[t]) for t in range(1, obj.T + 1)]
    else:
        stacks = [(obj.s[1:], obj.p[1:], obj.q[1:])]
    worst = 0.0
    for s, p, q in stacks:
        sv = np.linalg.svd(_damping_system(s, p, q, cfg), compute_uv=False)
        worst = max(worst, float((1.0 / sv[..., -1]).max()))
    return cfg.delta * worst


def proposition1_bound(consts: BoundConstants, epsilon: float) -> float:
    """Small-epsilon bound ``eps kappa / (1 - eps^2 kappa^2)`` on the damping matrix norm."""
    ek = epsilon * consts.kappa
    if not ek < 1.0:
        raise PreconditionError(f"eps * chi * h_inf < gamma * s_floor^2 * c fails (eps*kappa = {ek:.4g})")
    return ek / (1.0 - ek * ek)


@dataclass
class Theorem1Report:
    errors: list
    scale: float
    T: int
    delta_eps: float
    omega: float
    nilpotent_ok: bool
    bound_ok: bool
    offending_k: Optional[int]
    offending_value: Optional[float]
    bounds: list = field(default_factory=list)
    rel_tol: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.nilpotent_ok and self.bound_ok

    def relative_errors(self) -> list:
        return [e / self.scale if self.scale > 0 else 0.0 for e in self.errors]


def theorem1_certificate(tree: ScenarioTree, cfg: LQConfig, k_max: Optional[int] = None,
                         consts: Optional[BoundConstants] = None, rel_tol: float = 1e-10) -> Theorem1Report:
    """Run the two-step scheme for ``k_max`` rounds and certify the error decay.

    With ``E(k) = sup_t E|lambda^(k+1) - lambda^(k)|`` the certificate asks for
    ``E(k) <= rel_tol * E(1)`` for every ``k >= T`` (``E(0)`` is used when
    ``E(1)`` vanishes), and for ``E(k)`` below the explicit factorial bound
    ``(Omega/(1-Delta))^k T^(k+1/2) / k! * E(0)``. The bound check is skipped
    when the price function is not clamped (``Omega`` infinite).
    """
    T = tree.T
    k_max = 2 * T + 2 if k_max is None else int(k_max)
    _, diag = solve_two_step(tree, cfg, max_outer=k_max, inner_tol=0.0, stop_on_tol=False)
    errors = list(diag.errors) + [0.0] * (k_max - len(diag.errors))
    delta_eps = diag.delta_eps
    if consts is None and tree.h.is_clamped:
        consts = BoundConstants.from_model(tree.params, tree.h, tree.chi, cfg.gamma, delta_eps)
    omega = consts.omega if consts is not None else math.inf
    scale = errors[1] if len(errors) > 1 and errors[1] > 0 else errors[0]
    nil_ok, off_k, off_v = True, None, None
    for k in range(T, len(errors)):
        if errors[k] > rel_tol * scale:
            nil_ok, off_k, off_v = False, k, errors[k]
            break
    bounds, bound_ok = [], True
    if math.isfinite(omega) and delta_eps < 1.0:
        ratio = omega / (1.0 - delta_eps)
        for k, e in enumerate(errors):
            b = math.exp(k * math.log(ratio) + (k + 0.5) * math.log(T) - math.lgamma(k + 1)) * errors[0]
            bounds.append(b)
            if e > b * (1 + 1e-9) + 1e-300:
                bound_ok = False
                if off_k is None:
                    off_k, off_v = k, e
    return Theorem1Report(errors, scale, T, delta_eps, omega, nil_ok, bound_ok, off_k, off_v, bounds, rel_tol)
