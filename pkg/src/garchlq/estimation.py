"""Fitting MGARCH parameters to a historical return panel."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DataError, NumericalError, OptimizationError, UsageError
from .mgarch import ModelParams, covariance_map_radius, equilibrium_covariance

C_DIAG_FLOOR = 1e-6
LOSS_KINDS = ("paper-smoothness", "gaussian-qml")


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    dates: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.returns, dtype=float))
        if r.ndim != 2:
            raise DataError("returns must be a 2-d array (L x n)")
        if not np.all(np.isfinite(r)):
            raise DataError("return panel contains missing or non-finite values")
        dates = np.asarray(self.dates)
        if dates.shape[0] != r.shape[0]:
            raise DataError(f"{dates.shape[0]} dates for {r.shape[0]} return rows")
        if r.shape[0] < r.shape[1] + 1:
            raise DataError(f"need at least n+1={r.shape[1] + 1} observations, got {r.shape[0]}")
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "dates", dates)

    @property
    def L(self) -> int:
        return self.returns.shape[0]

    @property
    def n(self) -> int:
        return self.returns.shape[1]

    @classmethod
    def from_prices(cls, dates, prices) -> "ReturnPanel":
        """Simple returns ``(S_{t+1} - S_t) / S_t``, dated at ``t+1``."""
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        if prices.shape[0] == 1 and prices.shape[1] > 1 and np.ndim(dates) == 1 and len(dates) > 1:
            prices = prices.T
        if np.any(prices <= 0):
            raise DataError("prices must be positive")
        r = prices[1:] / prices[:-1] - 1.0
        return cls(np.asarray(dates)[1:], r)


def sample_initial_covariance(panel: ReturnPanel) -> np.ndarray:
    """Sample covariance with divisor ``L`` (not ``L - 1``)."""
    R = panel.returns
    if R.shape[0] < 2:
        raise DataError("need at least two observations")
    d = R - R.mean(axis=0)
    out = d.T @ d / R.shape[0]
    return 0.5 * (out + out.T)


@dataclass
class QNReport:
    converged: bool
    iterations: int
    gradient_norm: float
    loss_trace: list = field(default_factory=list)
    message: str = ""
    evaluations: int = 0


def _fd_gradient(objective, x, fd_step, vectorized):
    p = x.size
    h = fd_step * np.maximum(1.0, np.abs(x))
    E = np.diag(h)
    pts = np.concatenate([x + E, x - E])
    if vectorized:
        vals = np.asarray(objective(pts), dtype=float)
    else:
        vals = np.array([objective(v) for v in pts], dtype=float)
    return (vals[:p] - vals[p:]) / (2.0 * h), 2 * p


def quasi_newton_minimize(objective: Callable, x0, max_iter: int = 200, grad_tol: float = 1e-6,
                          fd_step: float = 1e-6, vectorized: bool = False, c1: float = 1e-4,
                          max_halvings: int = 60):
    """BFGS with an Armijo backtracking line search and central-difference gradients.

    Parameters
    ----------
    objective : callable
        Maps a parameter vector to a scalar. With ``vectorized=True`` it
        instead maps an ``(m, p)`` array to ``m`` values, which lets the
        ``2p`` gradient probes run as one batched call.
    x0 : array_like
        Starting point; the objective must be finite there.
    fd_step : float
        Relative finite-difference step, ``h_i = fd_step * max(1, |x_i|)``.

    Returns
    -------
    x : ndarray
    report : QNReport

    Notes
    -----
    Each line search first tries the unit step and the minimiser of the
    quadratic through ``f(0)``, ``f'(0)`` and ``f(1)``, then halves. On a
    convex quadratic the interpolated step is exact, so the iteration ends at
    the minimiser after at most ``p`` steps.
    """
    x = np.array(x0, dtype=float).ravel()

    def f(v):
        if vectorized:
            return float(np.asarray(objective(v[None, :]))[0])
        return float(objective(v))

    fx = f(x)
    if not np.isfinite(fx):
        raise OptimizationError("objective is not finite at the starting point")
    g, nev = _fd_gradient(objective, x, fd_step, vectorized)
    nev += 1
    H = np.eye(x.size)
    trace = [fx]
    gnorm = float(np.linalg.norm(g))
    if gnorm < grad_tol:
        return x, QNReport(True, 0, gnorm, trace, "gradient below tolerance at start", nev)

    it = 0
    message = "maximum iterations reached"
    converged = False
    first_update = True
    while it < max_iter:
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            H = np.eye(x.size)
            d = -g
            slope = -float(g @ g)
        accepted = None
        nonfinite = 0
        alpha = 1.0
        for _ in range(max_halvings):
            f1 = f(x + alpha * d)
            nev += 1
            if not np.isfinite(f1):
                nonfinite += 1
                alpha *= 0.5
                continue
            armijo = f1 <= fx + c1 * alpha * slope
            curv = f1 - fx - alpha * slope
            aq = -slope * alpha * alpha / (2.0 * curv) if curv > 0 else None
            if armijo:
                accepted = (f1, alpha)
                # the interpolated step is exact on quadratics; keep it when it is better
                if aq is not None and 0.1 * alpha <= aq <= 10.0 * alpha and abs(aq - alpha) > 1e-12 * alpha:
                    fq = f(x + aq * d)
                    nev += 1
                    if np.isfinite(fq) and fq < f1:
                        accepted = (fq, aq)
                break
            alpha = aq if aq is not None and aq >= 0.1 * alpha else 0.1 * alpha if curv > 0 else 0.5 * alpha
        if accepted is None:
            if nonfinite == max_halvings:
                raise OptimizationError("objective returned NaN/Inf along every trial step")
            message = "line search could not reduce the objective (precision loss)"
            converged = gnorm < max(grad_tol, 1e3 * grad_tol)
            break
        f_new, alpha = accepted
        x_new = x + alpha * d
        g_new, k = _fd_gradient(objective, x_new, fd_step, vectorized)
        nev += k
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if not np.any(s):
            message = "step vanished (precision loss)"
            converged = gnorm < max(grad_tol, 1e3 * grad_tol)
            break
        if sy <= 1e-10 * np.linalg.norm(s) * np.linalg.norm(y) and not first_update:
            # negative curvature along s: Powell-damp y toward B s
            Bs = np.linalg.solve(H, s)
            sBs = float(s @ Bs)
            theta = 0.8 * sBs / (sBs - sy) if sBs > sy else 1.0
            y = theta * y + (1.0 - theta) * Bs
            sy = float(s @ y)
        if sy > 1e-16 * np.linalg.norm(s) * np.linalg.norm(y):
            if first_update:
                H = (sy / float(y @ y)) * np.eye(x.size)
                first_update = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        x, fx, g = x_new, f_new, g_new
        trace.append(fx)
        it += 1
        gnorm = float(np.linalg.norm(g))
        if gnorm < grad_tol:
            converged = True
            message = "gradient below tolerance"
            break
    return x, QNReport(converged, it, gnorm, trace, message, nev)


# --- MGARCH fit -----------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


class _Packing:
    """Maps (A, B, C) to a flat vector; C is lower triangular with a softplus diagonal."""

    def __init__(self, n):
        self.n = n
        self.tril = np.tril_indices(n)
        self.diag_mask = self.tril[0] == self.tril[1]
        self.size = 2 * n * n + len(self.tril[0])

    def pack(self, A, B, C):
        c = np.array(C[self.tril], dtype=float)
        c[self.diag_mask] = _softplus_inv(c[self.diag_mask] - C_DIAG_FLOOR)
        return np.concatenate([np.ravel(A), np.ravel(B), c])

    def unpack(self, theta):
        """Batched unpack: ``theta`` is ``(m, size)``; returns stacks of A, B, C."""
        theta = np.atleast_2d(theta)
        m, n = theta.shape[0], self.n
        A = theta[:, : n * n].reshape(m, n, n)
        B = theta[:, n * n: 2 * n * n].reshape(m, n, n)
        c = theta[:, 2 * n * n:].copy()
        c[:, self.diag_mask] = C_DIAG_FLOOR + _softplus(c[:, self.diag_mask])
        C = np.zeros((m, n, n))
        C[:, self.tril[0], self.tril[1]] = c
        return A, B, C


def filter_covariances(z, sigma0, A, B, C):
    """Run the recursion along observed shocks for a stack of parameter sets.

    Returns an array of shape ``(m, L+1, n, n)`` whose slice ``t`` is
    ``Sigma_t``; slice 0 is ``sigma0``.
    """
    m = A.shape[0]
    L, n = z.shape
    cct = C @ np.swapaxes(C, -1, -2)
    At = np.swapaxes(A, -1, -2)
    bz = np.einsum("mij,tj->tmi", B, z)
    out = np.empty((m, L + 1, n, n))
    sig = np.broadcast_to(sigma0, (m, n, n)).copy()
    out[:, 0] = sig
    for t in range(L):
        sig = cct + A @ sig @ At + bz[t][:, :, None] * bz[t][:, None, :]
        out[:, t + 1] = sig
    return out


def _loss_batch(theta, packing, z, sigma0, loss_kind, scale):
    A, B, C = packing.unpack(theta)
    with np.errstate(all="ignore"):
        sig = filter_covariances(z, sigma0, A, B, C)
        if loss_kind == "paper-smoothness":
            diff = sig[:, 1:] - sig[:, :-1]
            val = np.einsum("mtij,mtij->m", diff, diff) / (z.shape[0] * scale)
        else:
            cov = sig[:, :-1]
            sign, logdet = np.linalg.slogdet(cov)
            try:
                sol = np.linalg.solve(cov, z[None, :, :, None])[..., 0]
            except np.linalg.LinAlgError:
                sol = np.full(cov.shape[:-1], np.nan)
            quad = np.einsum("mti,ti->mt", sol, z)
            terms = np.where(sign > 0, logdet + quad, np.inf)
            val = terms.mean(axis=1)
    val = np.where(np.isfinite(val), val, np.inf)
    return val


@dataclass
class FitReport:
    params: ModelParams
    loss_trace: list
    converged: bool
    iterations: int
    gradient_norm: float
    loss_kind: str = "paper-smoothness"
    spectral_radius: float = float("nan")
    equilibrium: Optional[np.ndarray] = None
    message: str = ""


def fit_mgarch(panel: ReturnPanel, sigma0=None, loss_kind: str = "paper-smoothness", mu=None,
               s0=None, a0: float = 0.05, b0: float = 0.05, max_iter: int = 100,
               grad_tol: float = 1e-6, fd_step: float = 1e-6) -> FitReport:
    """Estimate ``A``, ``B`` and ``C`` along the filtered covariance path.

    ``mu`` is held fixed (sample mean by default) and ``Z_t = R_t - mu``
    drives the recursion from ``sigma0``. ``paper-smoothness`` minimises the
    mean squared Frobenius step ``|Sigma_{t+1} - Sigma_t|^2`` (scaled by
    ``|sigma0|^2``); ``gaussian-qml`` minimises the mean negative Gaussian
    log-likelihood of ``Z_{t+1}`` given ``Sigma_t``. Non-convergence is
    reported, not raised.
    """
    if loss_kind not in LOSS_KINDS:
        raise UsageError(f"loss_kind must be one of {LOSS_KINDS}")
    R = panel.returns
    n = panel.n
    if sigma0 is None:
        sigma0 = sample_initial_covariance(panel)
    sigma0 = np.asarray(sigma0, dtype=float)
    if np.linalg.eigvalsh(sigma0).min() < -1e-12:
        raise UsageError("sigma0 must be positive semidefinite")
    mu = R.mean(axis=0) if mu is None else np.asarray(mu, dtype=float)
    z = R - mu
    pk = _Packing(n)
    frac = max(1.0 - a0 * a0 - b0 * b0, 1e-3)
    base = frac * sigma0 + 1e-12 * np.trace(sigma0) * np.eye(n) / n
    try:
        C0 = np.linalg.cholesky(base)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(base)
        C0 = np.linalg.cholesky(v @ np.diag(np.maximum(w, 1e-12 * max(w.max(), 1e-300))) @ v.T)
    C0 = np.where(np.eye(n, dtype=bool), np.maximum(np.diag(C0), 2 * C_DIAG_FLOOR) * np.eye(n), C0)
    theta0 = pk.pack(a0 * np.eye(n), b0 * np.eye(n), C0)
    scale = float(np.sum(sigma0 * sigma0)) or 1.0

    def objective(th):
        return _loss_batch(th, pk, z, sigma0, loss_kind, scale)

    theta, rep = quasi_newton_minimize(objective, theta0, max_iter=max_iter, grad_tol=grad_tol,
                                       fd_step=fd_step, vectorized=True)
    A, B, C = (m[0] for m in pk.unpack(theta))
    s0 = np.ones(n) if s0 is None else np.asarray(s0, dtype=float)
    params = ModelParams(mu=mu, A=A, B=B, C=C, sigma0=0.5 * (sigma0 + sigma0.T), s0=s0)
    rho = covariance_map_radius(params)
    eq = None
    if rho < 1.0:
        try:
            eq = equilibrium_covariance(params)
        except NumericalError:
            eq = None
    return FitReport(params, rep.loss_trace, rep.converged, rep.iterations, rep.gradient_norm,
                     loss_kind, rho, eq, rep.message)


def estimate_mu(panel: ReturnPanel, method: str = "sample-mean", k: int = 1) -> np.ndarray:
    """Expected per-period returns.

    ``eigen-portfolio`` keeps only the part of the standardised sample mean
    spanned by the top ``k`` eigenvectors of the sample correlation matrix,
    maps it back to return units, and rescales so the cross-sectional average
    matches the sample mean's.
    """
    R = panel.returns
    rbar = R.mean(axis=0)
    if method == "sample-mean":
        return rbar
    if method != "eigen-portfolio":
        raise UsageError(f"unknown mu estimation method {method!r}")
    sd = R.std(axis=0)
    if np.any(sd <= 0):
        return rbar
    corr = np.corrcoef(R, rowvar=False).reshape(panel.n, panel.n)
    w, v = np.linalg.eigh(corr)
    V = v[:, np.argsort(w)[::-1][:k]]
    proj = sd * (V @ (V.T @ (rbar / sd)))
    if abs(proj.mean()) > 1e-15 * max(abs(rbar).max(), 1e-300):
        proj *= rbar.mean() / proj.mean()
    return proj


def compute_gamma(sigma_bar, mu, w0: float) -> float:
    """Risk aversion that makes the aim portfolio hold ``w0`` of capital."""
    if w0 <= 0:
        raise UsageError("w0 must be positive")
    sigma_bar = np.atleast_2d(np.asarray(sigma_bar, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if np.linalg.cond(sigma_bar) > 1e14:
        raise NumericalError("covariance estimate is singular")
    return float(np.linalg.solve(sigma_bar, mu).sum() / w0)
