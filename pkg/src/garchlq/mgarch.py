"""MGARCH(1,1) market model: covariance recursion, price compounding, the
dollar-return covariance and the condition-number cost factor.

The recursion, with Gaussian shocks drawn from the previous covariance::

    Z_{t+1} ~ N(0, Sigma_t)
    R_{t+1} = mu + Z_{t+1}
    Sigma_{t+1} = C C' + A Sigma_t A' + B Z_{t+1} Z_{t+1}' B'
    S_{t+1} = h(S_t, R_{t+1})

Two simulation substrates are provided. :func:`simulate_path` draws a single
Monte Carlo trajectory. :func:`build_tree` builds a finite scenario tree with
branch-centred shocks, so conditional expectations are exact averages over
children.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ModelInstabilityError, NumericalError, ResourceError, UsageError

DEFAULT_CHI = 1e6
PSD_TOL = 1e-12
DEFAULT_MAX_NODES = 2_000_000


class NonPositivePriceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """MGARCH coefficients and initial market state."""

    mu: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sigma0: np.ndarray
    s0: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        n = mu.shape[0]
        coerce = {"mu": mu}
        for name in ("A", "B", "C", "sigma0"):
            m = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if m.shape != (n, n):
                raise UsageError(f"{name} has shape {m.shape}, expected {(n, n)}")
            coerce[name] = m
        s0 = np.atleast_1d(np.asarray(self.s0, dtype=float))
        if s0.shape != (n,):
            raise UsageError(f"s0 has shape {s0.shape}, expected {(n,)}")
        if np.any(s0 <= 0):
            raise UsageError("initial prices must be positive")
        coerce["s0"] = s0
        sig = coerce["sigma0"]
        if not np.allclose(sig, sig.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sig).max())):
            raise UsageError("sigma0 is not symmetric")
        if np.linalg.eigvalsh(sig).min() < -PSD_TOL:
            raise UsageError("sigma0 is not positive semidefinite")
        sv = np.linalg.svd(coerce["C"], compute_uv=False)
        if sv.min() <= 1e-14 * max(sv.max(), 1e-300):
            raise UsageError("C must be full rank (C C' invertible)")
        for k, v in coerce.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def cct(self) -> np.ndarray:
        return self.C @ self.C.T

    @property
    def c_lower(self) -> float:
        """Smallest eigenvalue of C C', the uniform floor on every Sigma_t."""
        return float(np.linalg.eigvalsh(self.cct).min())

    def replace(self, **changes) -> "ModelParams":
        fields = dict(mu=self.mu, A=self.A, B=self.B, C=self.C, sigma0=self.sigma0, s0=self.s0)
        fields.update(changes)
        return ModelParams(**fields)


@dataclass(frozen=True, eq=False)
class PriceFunction:
    """Price update ``h(s, r)``.

    ``multiplicative`` is ``s (1 + r)``. ``clamped-multiplicative`` clips that
    into ``[floor, cap]``, which makes the price bounds needed by the
    small-epsilon damping estimate hold by construction.
    """

    kind: str = "multiplicative"
    floor: float = 0.0
    cap: float = np.inf

    def __post_init__(self):
        if self.kind not in ("multiplicative", "clamped-multiplicative"):
            raise UsageError(f"unknown price function kind {self.kind!r}")
        if self.kind == "clamped-multiplicative":
            if not (0 < self.floor < self.cap < np.inf):
                raise UsageError("clamped prices need 0 < floor < cap < inf")

    @classmethod
    def clamped(cls, floor: float, cap: float) -> "PriceFunction":
        return cls("clamped-multiplicative", float(floor), float(cap))

    @property
    def is_clamped(self) -> bool:
        return self.kind == "clamped-multiplicative"

    def __call__(self, s, r):
        out = np.asarray(s, dtype=float) * (1.0 + np.asarray(r, dtype=float))
        if self.is_clamped:
            return np.clip(out, self.floor, self.cap)
        if np.any(out <= 0):
            warnings.warn("multiplicative price update produced a non-positive price",
                          NonPositivePriceWarning, stacklevel=2)
        return out


@dataclass(frozen=True, eq=False)
class MarketState:
    t: int
    s: np.ndarray
    sigma: np.ndarray
    p: np.ndarray
    q: float

    @property
    def psi(self) -> np.ndarray:
        return np.diag(self.s)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    @classmethod
    def from_prices(cls, t, s, sigma, chi=DEFAULT_CHI) -> "MarketState":
        s = np.asarray(s, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        p = dollar_covariance(s, sigma)
        return cls(t, s, sigma, p, cost_factor(s, p, chi=chi))


def _check_square(sigma, n, name="sigma"):
    if sigma.shape[-2:] != (n, n):
        raise UsageError(f"{name} has trailing shape {sigma.shape[-2:]}, expected {(n, n)}")


def step_covariance(sigma, z, params: ModelParams) -> np.ndarray:
    """One step of the covariance recursion. Broadcasts over leading axes."""
    sigma = np.asarray(sigma, dtype=float)
    z = np.asarray(z, dtype=float)
    n = params.n
    _check_square(sigma, n)
    if z.shape[-1] != n:
        raise UsageError(f"shock has length {z.shape[-1]}, expected {n}")
    A, B = params.A, params.B
    bz = z @ B.T
    out = params.cct + A @ sigma @ A.T + bz[..., :, None] * bz[..., None, :]
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    """A matrix L with L L' = sigma; Cholesky when possible, else eigen."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(sigma)
    if w.min() < -PSD_TOL:
        raise NumericalError(f"covariance has eigenvalue {w.min():.3e} below -{PSD_TOL}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_return(sigma, mu, rng: np.random.Generator):
    """Draw ``z ~ N(0, sigma)`` and return ``(mu + z, z)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    _check_square(sigma, mu.shape[0])
    z = _psd_factor(sigma) @ rng.standard_normal(mu.shape[0])
    return mu + z, z


def compound_prices(s, r, h: PriceFunction) -> np.ndarray:
    return h(s, r)


def dollar_covariance(s, sigma) -> np.ndarray:
    """``diag(s) sigma diag(s)``; broadcasts over leading axes."""
    s = np.asarray(s, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    _check_square(sigma, s.shape[-1])
    return s[..., :, None] * sigma * s[..., None, :]


def cost_factor(s, p, chi: float = DEFAULT_CHI, return_flag: bool = False):
    """Condition number of ``diag(s)^-1 p diag(s)^-1``, capped at ``chi``.

    Works on a single state or a stack of states. A smallest eigenvalue at or
    below ``1e-14 * largest`` is treated as singular: the cap is returned and
    the degeneracy flag is set.
    """
    s = np.asarray(s, dtype=float)
    p = np.asarray(p, dtype=float)
    sig = p / (s[..., :, None] * s[..., None, :])
    w = np.linalg.eigvalsh(sig)
    lo, hi = w[..., 0], w[..., -1]
    degenerate = lo <= 1e-14 * np.abs(hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(degenerate, chi, hi / np.where(degenerate, 1.0, lo))
    q = np.clip(q, 1.0, chi)
    if q.ndim == 0:
        q = float(q)
        degenerate = bool(degenerate)
    if return_flag:
        return q, degenerate
    return q


@dataclass(frozen=True, eq=False)
class MarketPath:
    """A simulated or replayed trajectory ``t = 0..T``.

    ``z[t]`` and ``r[t]`` are the shock and return that produced state ``t``;
    row 0 is zero.
    """

    s: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    r: np.ndarray
    p: np.ndarray
    q: np.ndarray
    seed: Optional[int] = None
    degenerate: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.s.shape[0] - 1

    @property
    def n(self) -> int:
        return self.s.shape[1]

    def state(self, t: int) -> MarketState:
        return MarketState(t, self.s[t], self.sigma[t], self.p[t], float(self.q[t]))

    @property
    def states(self) -> list:
        return [self.state(t) for t in range(self.T + 1)]

    @property
    def shocks(self) -> np.ndarray:
        return self.z[1:]

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha1(np.ascontiguousarray(self.s).tobytes()).hexdigest()[:16]


def _finish_path(s, sigma, z, r, seed, chi) -> MarketPath:
    p = dollar_covariance(s, sigma)
    q, flag = cost_factor(s, p, chi=chi, return_flag=True)
    return MarketPath(s, sigma, z, r, p, np.atleast_1d(q), seed, np.atleast_1d(flag))


def simulate_path(params: ModelParams, h: PriceFunction, T: int, seed: int,
                  chi: float = DEFAULT_CHI) -> MarketPath:
    if T < 1:
        raise UsageError("T must be at least 1")
    n = params.n
    rng = np.random.default_rng(seed)
    s = np.empty((T + 1, n))
    sigma = np.empty((T + 1, n, n))
    z = np.zeros((T + 1, n))
    r = np.zeros((T + 1, n))
    s[0], sigma[0] = params.s0, params.sigma0
    for t in range(1, T + 1):
        r[t], z[t] = sample_return(sigma[t - 1], params.mu, rng)
        sigma[t] = step_covariance(sigma[t - 1], z[t], params)
        s[t] = h(s[t - 1], r[t])
    return _finish_path(s, sigma, z, r, seed, chi)


def replay_path(params: ModelParams, h: PriceFunction, shocks, chi: float = DEFAULT_CHI,
                seed: Optional[int] = None) -> MarketPath:
    """Rebuild a path from stored shocks ``Z_1..Z_T``."""
    shocks = np.atleast_2d(np.asarray(shocks, dtype=float))
    T, n = shocks.shape
    if n != params.n:
        raise UsageError(f"shocks have {n} columns, model has {params.n} assets")
    s = np.empty((T + 1, n))
    sigma = np.empty((T + 1, n, n))
    z = np.zeros((T + 1, n))
    z[1:] = shocks
    r = np.zeros((T + 1, n))
    r[1:] = params.mu + shocks
    s[0], sigma[0] = params.s0, params.sigma0
    for t in range(1, T + 1):
        sigma[t] = step_covariance(sigma[t - 1], z[t], params)
        s[t] = h(s[t - 1], r[t])
    return _finish_path(s, sigma, z, r, seed, chi)


def path_from_returns(params: ModelParams, returns, h: PriceFunction = PriceFunction(),
                      chi: float = DEFAULT_CHI) -> MarketPath:
    """Historical replay: shocks are the realised returns minus ``mu``."""
    returns = np.atleast_2d(np.asarray(returns, dtype=float))
    return replay_path(params, h, returns - params.mu, chi=chi)


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Uniform ``M``-ary scenario tree of depth ``T``.

    Level ``d`` holds ``M**d`` nodes stored as stacked arrays; the children of
    node ``i`` at level ``d`` are nodes ``i*M .. i*M + M-1`` at level ``d+1``.
    Every branch has probability ``1/M``.
    """

    params: ModelParams
    h: PriceFunction
    T: int
    M: int
    seed: int
    chi: float
    s: list = field(repr=False)
    sigma: list = field(repr=False)
    z: list = field(repr=False)
    p: list = field(repr=False)
    q: list = field(repr=False)

    @property
    def n(self) -> int:
        return self.params.n

    def size(self, d: int) -> int:
        return self.M ** d

    @property
    def n_nodes(self) -> int:
        return sum(self.M ** d for d in range(self.T + 1))

    def parent(self, d: int) -> np.ndarray:
        """Parent index (at level ``d-1``) of every node at level ``d``."""
        return np.arange(self.size(d)) // self.M

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Branch average of per-node ``values`` at level ``d+1``, indexed by level-``d`` node."""
        values = np.asarray(values)
        return values.reshape((-1, self.M) + values.shape[1:]).mean(axis=1)

    def probability(self, d: int) -> float:
        return float(self.M) ** (-d)

    def state(self, d: int, i: int) -> MarketState:
        return MarketState(d, self.s[d][i], self.sigma[d][i], self.p[d][i], float(self.q[d][i]))

    def branch(self, leaf: int) -> MarketPath:
        """The root-to-leaf trajectory ending at ``leaf`` (a level-``T`` index)."""
        idx = [leaf]
        for _ in range(self.T):
            idx.append(idx[-1] // self.M)
        idx = idx[::-1]
        take = lambda arrs: np.stack([arrs[d][i] for d, i in enumerate(idx)])
        z = take(self.z)
        r = np.zeros_like(z)
        r[1:] = self.params.mu + z[1:]
        return MarketPath(take(self.s), take(self.sigma), z, r, take(self.p),
                          np.array([self.q[d][i] for d, i in enumerate(idx)]), self.seed)

    def node_path(self, leaf: int) -> list:
        idx = [leaf]
        for _ in range(self.T):
            idx.append(idx[-1] // self.M)
        return idx[::-1]


def _branch_shocks(sigma: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    """``M`` shocks per parent covariance in ``sigma`` (shape ``(N, n, n)``), centred per parent."""
    N, n = sigma.shape[0], sigma.shape[-1]
    if M == 1:
        return np.zeros((N, 1, n))
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        L = np.stack([_psd_factor(sg) for sg in sigma])
    if M % 2 == 0:
        w = rng.standard_normal((N, M // 2, n))
        z = np.einsum("nij,nkj->nki", L, w)
        return np.concatenate([z, -z], axis=1)
    w = rng.standard_normal((N, M, n))
    z = np.einsum("nij,nkj->nki", L, w)
    return z - z.mean(axis=1, keepdims=True)


def build_tree(params: ModelParams, h: PriceFunction, T: int, M: int, seed: int,
               chi: float = DEFAULT_CHI, max_nodes: int = DEFAULT_MAX_NODES) -> ScenarioTree:
    if T < 1 or M < 1:
        raise UsageError("tree needs T >= 1 and M >= 1")
    total = sum(M ** d for d in range(T + 1))
    if total > max_nodes:
        raise ResourceError(f"tree with M={M}, T={T} has {total} nodes, budget is {max_nodes}")
    rng = np.random.default_rng(seed)
    n = params.n
    s = [params.s0[None, :].copy()]
    sigma = [params.sigma0[None, :, :].copy()]
    z = [np.zeros((1, n))]
    for d in range(1, T + 1):
        zz = _branch_shocks(sigma[-1], M, rng).reshape(-1, n)
        parent = np.arange(M ** d) // M
        sigma.append(step_covariance(sigma[-1][parent], zz, params))
        s.append(h(s[-1][parent], params.mu + zz))
        z.append(zz)
    p = [dollar_covariance(si, sg) for si, sg in zip(s, sigma)]
    q = [np.atleast_1d(cost_factor(si, pi, chi=chi)) for si, pi in zip(s, p)]
    return ScenarioTree(params, h, T, M, seed, chi, s, sigma, z, p, q)


def covariance_map_radius(params: ModelParams) -> float:
    """Spectral radius of ``Sigma -> A Sigma A' + B Sigma B'``."""
    K = np.kron(params.A, params.A) + np.kron(params.B, params.B)
    return float(np.abs(np.linalg.eigvals(K)).max())


def equilibrium_covariance(params: ModelParams, tol: float = 1e-13,
                           max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary covariance ``Sigma = CC' + A Sigma A' + B Sigma B'``.

    Fixed-point iteration started at ``CC'``; stops once the Frobenius
    residual falls to ``tol`` relative to ``max(1, |Sigma|)`` or stops
    improving.
    """
    rho = covariance_map_radius(params)
    if rho >= 1.0:
        raise ModelInstabilityError(f"covariance map is not contractive (spectral radius {rho:.6f})")
    A, B, cct = params.A, params.B, params.cct

    def image(sg):
        out = cct + A @ sg @ A.T + B @ sg @ B.T
        return 0.5 * (out + out.T)

    sig = cct.copy()
    best = np.inf
    stall = 0
    for _ in range(max_iter):
        nxt = image(sig)
        res = np.linalg.norm(nxt - sig)
        sig = nxt
        if res <= tol * max(1.0, np.linalg.norm(sig)):
            return sig
        if res >= best:
            stall += 1
            if stall > 50:
                return sig
        else:
            best, stall = res, 0
    raise ModelInstabilityError(f"equilibrium iteration did not converge in {max_iter} steps")


def equilibrium_residual(params: ModelParams, sigma) -> float:
    r = sigma - params.cct - params.A @ sigma @ params.A.T - params.B @ sigma @ params.B.T
    return float(np.linalg.norm(r))
