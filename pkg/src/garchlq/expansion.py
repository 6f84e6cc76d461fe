"""Small-epsilon expansion of the costate and the myopic baseline.

Writing ``lambda = eps * lt`` and expanding ``lt = lt0 + eps lt1 + ...`` gives::

    K_t  = (eps I + (gamma/q_t) P_t Psi_t^{-1})^{-1}
    lt0  = -K_t (Psi_t mu - gamma P_t X_{t-1})
    lt1  = delta K_t E_t[lt0_{t+1}]
    X_t  = X_{t-1} - Psi_t^{-1} (lt0 + eps lt1) / q_t

The naive variant drops ``eps`` from ``K`` and moves the difference into the
first-order term. The myopic policy is the ``delta = 0`` solution; in the
dollar drift convention it coincides with the zeroth-order term.

A *correction* is any callable ``phi(t, x_prev, s, p) -> (N, n)`` evaluated on
stacks of states; it stands in for ``E_t[lt0_{t+1}]`` (the trained network in
:mod:`garchlq.neural` has this signature).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import TreeShapeError, UsageError
from .fixedpoint import LQConfig, _damping_system, _guarded_solve, measure_damping, solve_two_step
from .mgarch import MarketPath, MarketState, ScenarioTree

VARIANTS = ("stabilized", "naive")
DRIFT_CONVENTIONS = ("dollar", "paper-literal")


@dataclass
class ExpansionTerms:
    lambda0: np.ndarray
    lambda1: np.ndarray
    variant: str = "stabilized"


def _check_variant(variant):
    if variant not in VARIANTS:
        raise UsageError(f"expansion variant must be one of {VARIANTS}, got {variant!r}")


def _base_matrix(s, p, q, cfg: LQConfig, variant: str) -> np.ndarray:
    """``eps I + (gamma/q) P Psi^{-1}`` (stabilized) or ``(gamma/q) P Psi^{-1}`` (naive); stacks allowed."""
    s = np.asarray(s, dtype=float)
    q = np.asarray(q, dtype=float)
    G = (cfg.gamma / q)[..., None, None] * np.asarray(p, dtype=float) / s[..., None, :]
    if variant == "naive":
        return G
    return cfg.epsilon * np.eye(s.shape[-1]) + G


def _solve_matrix(Mx, R):
    """``Mx^{-1} R`` for stacks of square right-hand sides."""
    _guarded_solve(Mx, np.zeros(Mx.shape[:-1]))
    return np.linalg.solve(Mx, R)


def _drive(x_prev, s, p, mu, gamma):
    """``Psi mu - gamma P X_{t-1}`` for stacks."""
    return s * mu - gamma * np.einsum("...ij,...j->...i", p, x_prev)


def lambda0_batch(x_prev, s, p, q, mu, cfg: LQConfig, variant: str = "stabilized") -> np.ndarray:
    _check_variant(variant)
    return -_guarded_solve(_base_matrix(s, p, q, cfg, variant), _drive(x_prev, s, p, mu, cfg.gamma))


def lambda0(x_prev, state: MarketState, cfg: LQConfig, mu, variant: str = "stabilized") -> np.ndarray:
    """Zeroth-order scaled costate at one state."""
    return lambda0_batch(np.asarray(x_prev, dtype=float), state.s, state.p, np.asarray(state.q), mu, cfg, variant)


def expansion_state_step(x_prev, lam0, lam1, state: MarketState, cfg: LQConfig) -> np.ndarray:
    """``X_t = X_{t-1} - Psi^{-1} (lt0 + eps lt1) / q``."""
    lam = np.asarray(lam0, dtype=float) + cfg.epsilon * np.asarray(lam1, dtype=float)
    return np.asarray(x_prev, dtype=float) - lam / (state.q * state.s)


def myopic_batch(x_prev, s, p, q, mu, cfg: LQConfig, drift_convention: str = "dollar") -> np.ndarray:
    if drift_convention not in DRIFT_CONVENTIONS:
        raise UsageError(f"drift convention must be one of {DRIFT_CONVENTIONS}, got {drift_convention!r}")
    s = np.asarray(s, dtype=float)
    m = s * mu if drift_convention == "dollar" else np.broadcast_to(mu, s.shape)
    rhs = m - cfg.gamma * np.einsum("...ij,...j->...i", p, x_prev)
    step = _guarded_solve(_damping_system(s, p, q, cfg), rhs)
    return x_prev + step / (cfg.epsilon * np.asarray(q)[..., None] * s)


def myopic_step(x_prev, state: MarketState, cfg: LQConfig, mu, drift_convention: str = "dollar") -> np.ndarray:
    """One step of the ``delta = 0`` policy.

    ``X_t = X_{t-1} + Psi^{-1} (I + Pt Psi^{-1})^{-1} (m - gamma P X_{t-1}) / (eps q)``
    with ``m = Psi mu`` (dollar) or ``m = mu`` (paper-literal).
    """
    return myopic_batch(np.asarray(x_prev, dtype=float), state.s, state.p, np.asarray(state.q),
                        np.asarray(mu, dtype=float), cfg, drift_convention)


def aim_portfolio(state: MarketState, cfg: LQConfig, mu, drift_convention: str = "dollar") -> np.ndarray:
    """Holdings ``(1/gamma) P^{-1} m`` at which no trade is wanted."""
    m = state.s * mu if drift_convention == "dollar" else np.asarray(mu, dtype=float)
    return np.linalg.solve(state.p, m) / cfg.gamma


# --- first-order term on a tree ---------------------------------------------------------


def _level(tree: ScenarioTree, t: int):
    return tree.s[t], tree.p[t], tree.q[t]


def lambda1_oracle(tree: ScenarioTree, t: int, x_prev, cfg: LQConfig, variant: str = "stabilized"):
    """First-order term at every level-``t`` node with exact branch expectations.

    ``x_prev`` has shape ``(M**t, n)``. Because ``E_t[lt0_{t+1}]`` is taken
    at the holdings ``X_t`` that the expansion itself produces, and those
    depend on ``lt1``, the affine self-consistency equation is solved
    exactly. Returns ``(lt0, lt1, phi)`` where ``phi = E_t[lt0_{t+1}]`` is the
    quantity a correction network is trained to reproduce (zero at ``t = T``).
    """
    _check_variant(variant)
    if not 1 <= t <= tree.T:
        raise TreeShapeError(f"level {t} is outside 1..{tree.T}")
    mu = tree.params.mu
    s, p, q = _level(tree, t)
    x_prev = np.asarray(x_prev, dtype=float)
    if x_prev.shape != s.shape:
        raise TreeShapeError(f"x_prev has shape {x_prev.shape}, level {t} needs {s.shape}")
    base = _base_matrix(s, p, q, cfg, variant)
    drive = _drive(x_prev, s, p, mu, cfg.gamma)
    lt0 = -_guarded_solve(base, drive)
    N, n = s.shape
    if t == tree.T:
        return lt0, np.zeros_like(lt0), np.zeros_like(lt0)
    extra = np.zeros_like(lt0)
    if variant == "naive":
        extra = _guarded_solve(base, _guarded_solve(base, drive))
    x0 = x_prev - lt0 / (q[:, None] * s)
    cs, cp, cq = _level(tree, t + 1)
    child = np.arange(N * tree.M)
    xc = x0[child // tree.M]
    e0 = tree.expect(lambda0_batch(xc, cs, cp, cq, mu, cfg, variant))
    Gbar = tree.expect(_solve_matrix(_base_matrix(cs, cp, cq, cfg, variant), cfg.gamma * cp))
    # (I + (delta eps / q) K Gbar Psi^{-1}) lt1 = delta K e0 + extra
    KG = _solve_matrix(base, Gbar)
    lhs = np.eye(n) + (cfg.delta * cfg.epsilon / q)[:, None, None] * KG / s[:, None, :]
    rhs = cfg.delta * _guarded_solve(base, e0) + extra
    lt1 = _guarded_solve(lhs, rhs)
    phi = e0 - cfg.epsilon * np.einsum("kij,kj->ki", Gbar, lt1 / (q[:, None] * s))
    return lt0, lt1, phi


def tree_rollout(tree: ScenarioTree, cfg: LQConfig, policy: str = "expansion-oracle",
                 variant: str = "stabilized", correction: Optional[Callable] = None,
                 drift_convention: str = "dollar"):
    """Run a policy over every node of a tree.

    ``policy`` is ``myopic``, ``expansion-oracle`` (exact first-order term) or
    ``expansion-nn`` (first-order term ``delta K phi`` from ``correction``).
    Returns per-level lists ``(x, lt0, lt1, phi)``.
    """
    mu = tree.params.mu
    x = [cfg.x0[None, :].copy()]
    L0, L1, PH = [None], [None], [None]
    for t in range(1, tree.T + 1):
        xp = x[-1][tree.parent(t)]
        s, p, q = _level(tree, t)
        if policy == "myopic":
            x.append(myopic_batch(xp, s, p, q, mu, cfg, drift_convention))
            continue
        if policy == "expansion-oracle":
            lt0, lt1, phi = lambda1_oracle(tree, t, xp, cfg, variant)
        elif policy == "expansion-nn":
            if correction is None:
                raise UsageError("expansion-nn needs a correction callable")
            base = _base_matrix(s, p, q, cfg, variant)
            lt0 = -_guarded_solve(base, _drive(xp, s, p, mu, cfg.gamma))
            phi = np.asarray(correction(t, xp, s, p), dtype=float)
            lt1 = cfg.delta * _guarded_solve(base, phi)
        else:
            raise UsageError(f"unknown tree policy {policy!r}")
        x.append(xp - (lt0 + cfg.epsilon * lt1) / (q[:, None] * s))
        L0.append(lt0)
        L1.append(lt1)
        PH.append(phi)
    return x, L0, L1, PH


def path_rollout(path: MarketPath, cfg: LQConfig, mu, correction: Optional[Callable] = None,
                 variant: str = "stabilized"):
    """Expansion policy along one path with ``lt1 = delta K phi``.

    ``correction=None`` means ``phi = 0``. Returns ``(x, lt0, lt1, phi)`` as
    arrays of shape ``(T+1, n)``; row 0 of the costate arrays is zero.
    """
    _check_variant(variant)
    T, n = path.T, path.n
    mu = np.asarray(mu, dtype=float)
    x = np.zeros((T + 1, n))
    lt0 = np.zeros((T + 1, n))
    lt1 = np.zeros((T + 1, n))
    phi = np.zeros((T + 1, n))
    x[0] = cfg.x0
    for t in range(1, T + 1):
        s, p, q = path.s[t], path.p[t], float(path.q[t])
        base = _base_matrix(s, p, q, cfg, variant)
        lt0[t] = -_guarded_solve(base, _drive(x[t - 1], s, p, mu, cfg.gamma))
        if correction is not None:
            phi[t] = np.asarray(correction(t, x[t - 1][None], s[None], p[None]), dtype=float)[0]
            lt1[t] = cfg.delta * _guarded_solve(base, phi[t])
        x[t] = x[t - 1] - (lt0[t] + cfg.epsilon * lt1[t]) / (q * s)
    return x, lt0, lt1, phi


def myopic_rollout(path: MarketPath, cfg: LQConfig, mu, drift_convention: str = "dollar") -> np.ndarray:
    x = np.zeros((path.T + 1, path.n))
    x[0] = cfg.x0
    mu = np.asarray(mu, dtype=float)
    for t in range(1, path.T + 1):
        x[t] = myopic_batch(x[t - 1], path.s[t], path.p[t], np.asarray(path.q[t]), mu, cfg, drift_convention)
    return x


# --- accuracy of the expansion ------------------------------------------------------------


@dataclass
class Prop2Table:
    eps: list
    errors: list
    slope: float
    delta_eps: list

    def rows(self):
        return list(zip(self.eps, self.errors, self.delta_eps))


def loglog_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def proposition2_error(tree: ScenarioTree, cfg: LQConfig, eps_grid, variant: str = "stabilized",
                       tol: float = 1e-12, max_outer: int = 500) -> Prop2Table:
    """Error of ``lt0 + eps lt1`` against ``lambda*/eps`` for each ``eps``.

    The expansion runs on its own holdings path through the tree; the exact
    costate comes from :func:`~garchlq.fixedpoint.solve_two_step` on the same
    tree. The error is ``sup_t`` of the node-average norm. ``slope`` is the
    least-squares log-log slope (``nan`` when any error is zero).
    """
    errs, deltas = [], []
    for eps in eps_grid:
        c = cfg.replace(epsilon=float(eps))
        deltas.append(measure_damping(tree, c))
        traj, _ = solve_two_step(tree, c, tol=tol, max_outer=max_outer)
        _, L0, L1, _ = tree_rollout(tree, c, "expansion-oracle", variant)
        e = 0.0
        for t in range(1, tree.T + 1):
            approx = L0[t] + c.epsilon * L1[t]
            e = max(e, float(np.linalg.norm(approx - traj.lam[t] / c.epsilon, axis=1).mean()))
        errs.append(e)
    slope = loglog_slope(eps_grid, errs) if all(e > 0 for e in errs) else float("nan")
    return Prop2Table([float(e) for e in eps_grid], errs, slope, deltas)
