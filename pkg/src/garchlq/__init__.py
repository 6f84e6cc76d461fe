"""Multi-period mean-variance trading under MGARCH covariance dynamics with
small quadratic transaction costs.

Submodules are imported on first attribute access so that the command-line
front end can cap BLAS threads before numpy loads.
"""
from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "ModelParams": "mgarch", "PriceFunction": "mgarch", "MarketState": "mgarch", "MarketPath": "mgarch",
    "ScenarioTree": "mgarch", "simulate_path": "mgarch", "build_tree": "mgarch",
    "equilibrium_covariance": "mgarch", "cost_factor": "mgarch",
    "ReturnPanel": "estimation", "fit_mgarch": "estimation", "estimate_mu": "estimation",
    "compute_gamma": "estimation", "quasi_newton_minimize": "estimation",
    "LQConfig": "fixedpoint", "solve_two_step": "fixedpoint", "measure_damping": "fixedpoint",
    "theorem1_certificate": "fixedpoint",
    "lambda0": "expansion", "myopic_step": "expansion", "path_rollout": "expansion",
    "CorrectionNetwork": "neural", "init_params": "neural", "forward": "neural", "load_model": "neural",
    "save_model": "neural",
    "TrainConfig": "trainer", "train": "trainer",
    "run_backtest": "backtest", "compare_policies": "backtest", "make_folds": "backtest",
    "RunConfig": "config",
    "desk": "presets", "theory": "presets",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    mod = _EXPORTS.get(name)
    if mod is None:
        raise AttributeError(f"module 'garchlq' has no attribute {name!r}")
    value = getattr(import_module(f".{mod}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(__all__))
