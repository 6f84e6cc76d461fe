import numpy as np
import pytest
from scipy import optimize

from garchlq.mgarch import ModelParams


def scalar_params(a=0.5, b=0.5, c=1.0, mu=0.0, sigma0=None, s0=1.0):
    sigma0 = c * c if sigma0 is None else sigma0
    return ModelParams(mu=[mu], A=[[a]], B=[[b]], C=[[c]], sigma0=[[sigma0]], s0=[s0])


def random_params(rng, n, a=0.6, b=0.3, mu_scale=0.01):
    """Dense coefficient matrices with a contractive covariance map."""
    A = a * np.linalg.qr(rng.normal(size=(n, n)))[0]
    B = b * np.linalg.qr(rng.normal(size=(n, n)))[0]
    C = np.tril(rng.normal(size=(n, n))) * 0.005 + 0.01 * np.eye(n)
    sig = C @ C.T / (1 - a * a - b * b)
    return ModelParams(mu=rng.normal(size=n) * mu_scale, A=A, B=B, C=C, sigma0=sig,
                       s0=rng.uniform(0.8, 1.2, size=n))


def direct_optimum(tree, cfg):
    """Maximise the tree objective over all branch-contingent holdings with scipy."""
    T, M = tree.T, tree.M
    sizes = [M ** t for t in range(1, T + 1)]
    mu = tree.params.mu[0]

    def unpack(v):
        out, k = [np.array([cfg.x0[0]])], 0
        for n_ in sizes:
            out.append(v[k:k + n_])
            k += n_
        return out

    def negV(v):
        xs = unpack(v)
        total = 0.0
        for t in range(1, T + 1):
            for i in range(sizes[t - 1]):
                x, xp = xs[t][i], xs[t - 1][i // M]
                s, p, q = tree.s[t][i, 0], tree.p[t][i, 0, 0], tree.q[t][i]
                a = x - xp
                total += cfg.delta ** t / M ** t * (mu * s * x - 0.5 * cfg.epsilon * q * s * a * a
                                                    - 0.5 * cfg.gamma * p * x * x)
        return -total

    res = optimize.minimize(negV, np.zeros(sum(sizes)), method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    return -res.fun, unpack(res.x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
