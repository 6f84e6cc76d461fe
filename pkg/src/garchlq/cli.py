"""Command-line front end.

Subcommands::

    garchlq fit       --prices prices.csv            -> params.json
    garchlq simulate  [--params params.json]         -> path.csv
    garchlq train     [--params params.json]         -> model.json, train_report.json
    garchlq backtest  --policy P [--policy Q ...]    -> per-policy CSV/JSON, comparison.csv
    garchlq verify                                   -> verify.csv, verify.json
    garchlq report    --runs DIR [DIR ...]           -> table2.csv, table3.csv, table4.csv

Every subcommand accepts ``--config run.json`` (see :mod:`garchlq.config`);
explicit flags override the file. Outputs echo the effective configuration
and contain no timestamps, so reruns with the same inputs are byte-identical.

Exit codes: 0 success, 1 usage, 2 data or missing file, 3 numerical failure,
4 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

logger = logging.getLogger("garchlq")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the usage code 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output file or directory (default: io.out_dir)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--params", help="fitted parameter file; overrides the preset")
    model.add_argument("--preset", choices=("desk", "theory"))
    model.add_argument("--n", type=int, help="number of assets for a preset model")
    model.add_argument("--clamped", action="store_const", const=True, help="clamp prices to [floor, cap]")
    model.add_argument("--chi", type=float, help="cap on the cost factor q")
    model.add_argument("--delta", type=float)
    model.add_argument("--epsilon", type=float)
    model.add_argument("--gamma", type=float)
    model.add_argument("--w0", type=float, help="capital that fixes gamma when gamma is not given")
    model.add_argument("--T", type=int, help="horizon in trading steps")

    p = _Parser(prog="garchlq", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", parents=[common], help="estimate MGARCH parameters from a price CSV")
    f.add_argument("--prices", required=True)
    f.add_argument("--loss-kind", choices=("paper-smoothness", "gaussian-qml"))
    f.add_argument("--mu-method", choices=("sample-mean", "eigen-portfolio"))
    f.add_argument("--max-iter", type=int)
    f.add_argument("--w0", type=float)

    s = sub.add_parser("simulate", parents=[common, model], help="simulate one market path")
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", parents=[common, model], help="train the correction network")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iter", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--width", type=int)

    b = sub.add_parser("backtest", parents=[common, model], help="run policies on paths or prices")
    b.add_argument("--policy", action="append", choices=("myopic", "expansion-nn", "expansion-zero"))
    b.add_argument("--model", help="trained network file (for expansion-nn)")
    b.add_argument("--prices", help="historical price CSV; default is simulated paths")
    b.add_argument("--paths", type=int, help="number of simulated paths")
    b.add_argument("--seed", type=int, help="seed of the first simulated path")
    b.add_argument("--annualize", action="store_const", const=True)

    v = sub.add_parser("verify", parents=[common], help="run the six numerical checks")
    v.add_argument("--params", help="fitted parameters for the equilibrium check")
    v.add_argument("--check", action="append", help="run only the named check (repeatable)")

    r = sub.add_parser("report", parents=[common], help="fold tables from backtest output directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--baseline", default="myopic")
    r.add_argument("--candidate", default="expansion-nn")
    return p


# --- helpers ---------------------------------------------------------------------------------


def _config(args):
    from .config import RunConfig
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    g = lambda name: getattr(args, name, None)  # noqa: E731
    over = {
        "model.params_path": g("params") if args.command != "verify" else None,
        "model.preset": g("preset"), "model.n": g("n"), "model.clamped": g("clamped"), "model.chi": g("chi"),
        "model.loss_kind": g("loss_kind"), "model.mu_method": g("mu_method"),
        "control.delta": g("delta"), "control.epsilon": g("epsilon"), "control.gamma": g("gamma"),
        "control.w0": g("w0"), "control.T": g("T"),
    }
    if args.command == "fit":
        over["model.fit_max_iter"] = g("max_iter")
    if args.command == "train":
        over.update({"nn.seed": g("seed"), "nn.max_iter": g("max_iter"), "nn.epochs": g("epochs"),
                     "nn.alpha": g("alpha"), "nn.width": g("width")})
    if args.command == "backtest":
        over.update({"backtest.n_paths": g("paths"), "backtest.seed": g("seed"),
                     "backtest.annualize": g("annualize")})
    return cfg.override(over)


def _need(path, what):
    from .errors import DataError
    if not path or not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _market(cfg):
    """``(params, h, chi, gamma, tickers)`` from a parameter file or a preset."""
    import numpy as np
    from .estimation import compute_gamma
    from .io import params_from_dict, read_json
    from .mgarch import PriceFunction, equilibrium_covariance, covariance_map_radius
    from .presets import desk, theory
    m, c = cfg.model, cfg.control
    if m.params_path:
        d = read_json(_need(m.params_path, "parameter file"))
        params = params_from_dict(d)
        h = PriceFunction.clamped(m.floor, m.cap) if m.clamped else PriceFunction()
        gamma = c.gamma
        if gamma is None:
            sig = equilibrium_covariance(params) if covariance_map_radius(params) < 1 else params.sigma0
            gamma = compute_gamma(sig, params.mu, c.w0)
        return params, h, m.chi, float(gamma), d.get("tickers")
    if m.preset == "theory":
        pr = theory(m.n, c.gamma or 1000.0, m.chi)
    else:
        pr = desk(m.n, c.w0, m.clamped, m.chi)
        if m.clamped and (m.floor, m.cap) != (0.5, 2.0):
            pr = type(pr)(pr.params, PriceFunction.clamped(m.floor, m.cap), pr.chi, pr.gamma, pr.sigma_bar)
    gamma = c.gamma if c.gamma is not None else pr.gamma
    return pr.params, pr.h, pr.chi, float(gamma), [f"A{i + 1}" for i in range(pr.params.n)]


def _lqcfg(cfg, gamma, n, T=None):
    import numpy as np
    from .fixedpoint import LQConfig
    c = cfg.control
    return LQConfig(c.delta, c.epsilon, gamma, T or c.T, np.zeros(n))


def _out(args, cfg, default_name):
    return args.out or os.path.join(cfg.io.out_dir, default_name)


# --- subcommands -----------------------------------------------------------------------------


def cmd_fit(args, cfg) -> int:
    import numpy as np
    from .estimation import ReturnPanel, compute_gamma, estimate_mu, fit_mgarch
    from .io import params_to_dict, read_prices_csv, write_json
    dates, tickers, prices = read_prices_csv(_need(args.prices, "price file"))
    panel = ReturnPanel.from_prices(np.array(dates, dtype=object), prices)
    mu = estimate_mu(panel, cfg.model.mu_method, cfg.model.mu_k)
    rep = fit_mgarch(panel, loss_kind=cfg.model.loss_kind, mu=mu, s0=prices[-1],
                     max_iter=cfg.model.fit_max_iter)
    out = params_to_dict(rep.params, tickers)
    sig = rep.equilibrium if rep.equilibrium is not None else rep.params.sigma0
    try:
        gamma = compute_gamma(sig, mu, cfg.control.w0)
    except Exception:  # singular covariance estimate: leave gamma to the user
        gamma = None
    out["fit"] = {"loss_kind": rep.loss_kind, "converged": rep.converged, "iterations": rep.iterations,
                  "gradient_norm": rep.gradient_norm, "loss_trace": rep.loss_trace, "message": rep.message,
                  "spectral_radius": rep.spectral_radius,
                  "equilibrium": None if rep.equilibrium is None else rep.equilibrium.tolist(),
                  "gamma_for_w0": gamma, "first_date": str(dates[0]), "last_date": str(dates[-1]),
                  "observations": panel.L}
    out["config"] = cfg.to_dict()
    path = _out(args, cfg, "params.json")
    write_json(out, path)
    print(f"wrote {path}: n={panel.n}, converged={rep.converged}, spectral radius {rep.spectral_radius:.4f}")
    return 0


def cmd_simulate(args, cfg) -> int:
    from .io import PATH_FORMAT_VERSION, path_to_frame, write_frame, write_json
    from .mgarch import simulate_path
    params, h, chi, gamma, _ = _market(cfg)
    path = simulate_path(params, h, cfg.control.T, args.seed, chi)
    out = _out(args, cfg, f"path_seed{args.seed}.csv")
    write_frame(path_to_frame(path), out)
    write_json({"format_version": PATH_FORMAT_VERSION, "kind": "market-path", "seed": args.seed, "T": path.T,
                "n": path.n, "fingerprint": path.fingerprint(), "config": cfg.to_dict()},
               os.path.splitext(out)[0] + ".json")
    print(f"wrote {out} (T={path.T}, n={path.n}, fingerprint {path.fingerprint()})")
    return 0


def cmd_train(args, cfg) -> int:
    from .io import write_json
    from .neural import save_model
    from .trainer import TrainConfig, train
    params, h, chi, gamma, _ = _market(cfg)
    nn = cfg.nn
    out_dir = args.out or cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, "checkpoints") if nn.checkpoint_every else None
    if ckpt:
        os.makedirs(ckpt, exist_ok=True)
    tcfg = TrainConfig(max_iter=nn.max_iter, alpha=nn.alpha, epochs=nn.epochs, batch=nn.batch, lr=nn.lr,
                       seed=nn.seed, paths_per_iter=nn.paths_per_iter, width=nn.width,
                       wide_layers=nn.wide_layers, init_std=nn.init_std, checkpoint_every=nn.checkpoint_every,
                       checkpoint_dir=ckpt)
    net, rep = train(params, _lqcfg(cfg, gamma, params.n), tcfg, h, chi)
    save_model(net, os.path.join(out_dir, "model.json"), {"config": cfg.to_dict()})
    write_json({"format_version": 1, "kind": "train-report", **rep.to_dict(), "config": cfg.to_dict()},
               os.path.join(out_dir, "train_report.json"))
    print(f"wrote {out_dir}/model.json after {rep.completed} iterations "
          f"(held-out error {rep.proxy_error[0]:.3e} -> {rep.final_proxy_error:.3e})")
    return 0


def _historical_path(cfg, params, h, chi, prices_csv):
    import numpy as np
    from .io import read_prices_csv
    from .mgarch import path_from_returns
    from .errors import DataError
    dates, tickers, prices = read_prices_csv(_need(prices_csv, "price file"))
    if prices.shape[1] != params.n:
        raise DataError(f"{prices_csv} has {prices.shape[1]} assets, parameters have {params.n}")
    r = prices[1:] / prices[:-1] - 1.0
    path = path_from_returns(params.replace(s0=prices[0]), r, h, chi)
    return path, [str(d) for d in dates]


def cmd_backtest(args, cfg) -> int:
    import numpy as np
    import pandas as pd
    from .backtest import REPORT_FORMAT_VERSION, TRADING_DAYS, average_reports, compare_policies, run_backtest
    from .errors import UsageError
    from .io import write_frame, write_json
    from .mgarch import simulate_path
    from .neural import load_model
    policies = args.policy or ["myopic", "expansion-nn"]
    if len(set(policies)) != len(policies):
        raise UsageError("each --policy may be given once")
    params, h, chi, gamma, _ = _market(cfg)
    net = load_model(_need(args.model, "model file")) if "expansion-nn" in policies else None
    bt = cfg.backtest
    if args.prices:
        path, dates = _historical_path(cfg, params, h, chi, args.prices)
        paths, all_dates = [path], [dates]
    else:
        paths = [simulate_path(params, h, cfg.control.T, bt.seed + i, chi) for i in range(bt.n_paths)]
        all_dates = [None] * len(paths)
    out_dir = args.out or cfg.io.out_dir
    per_policy = {p: [] for p in policies}
    tables = []
    for i, (path, dates) in enumerate(zip(paths, all_dates)):
        lq = _lqcfg(cfg, gamma, params.n, path.T)
        reps = [run_backtest(p, path, lq, params.mu, bt.w0, correction=net, dates=dates,
                             drift_convention=cfg.control.drift_convention, variant=cfg.control.variant)
                for p in policies]
        for r in reps:
            per_policy[r.label].append(r)
        tables.append(compare_policies(reps, annualize=bt.annualize))
    for p, reps in per_policy.items():
        frames = []
        for i, r in enumerate(reps):
            df = r.to_frame()
            df.insert(0, "path", i)
            frames.append(df)
        write_frame(pd.concat(frames, ignore_index=True), os.path.join(out_dir, f"{p}.csv"))
        T = reps[0].holdings.shape[0] - 1
        keys = ("W_T", "value_added_pct", "V", "total_cost", "total_risk", "total_return")
        mean = {k: float(np.mean([r.summary()[k] for r in reps])) for k in keys}
        mean["annualized_value_added_pct"] = mean["value_added_pct"] * TRADING_DAYS / T
        write_json({"format_version": REPORT_FORMAT_VERSION, "kind": "backtest-report", "policy": p,
                    "n_paths": len(reps), "T": T, "annualization": f"linear x{TRADING_DAYS}/T",
                    "mean": mean, "paths": [r.summary() for r in reps], "config": cfg.to_dict()},
                   os.path.join(out_dir, f"{p}.json"))
    comp = average_reports(tables)
    write_frame(comp, os.path.join(out_dir, "comparison.csv"))
    avg = comp[comp["fold"] == "Ave."]
    print(avg[["policy", "W_T", "V", "total_cost", "total_risk"]].to_string(index=False))
    return 0


def cmd_verify(args, cfg) -> int:
    import pandas as pd
    from .io import params_from_dict, read_json, write_frame, write_json
    from .verify import CHECKS, run_all
    from .errors import UsageError
    params = params_from_dict(read_json(_need(args.params, "parameter file"))) if args.params else None
    if args.check:
        bad = sorted(set(args.check) - set(CHECKS))
        if bad:
            raise UsageError(f"unknown check(s) {bad}; choose from {list(CHECKS)}")
    results = run_all(params, args.check)
    out_dir = args.out or cfg.io.out_dir
    rows = [{"check": r.name, "passed": r.passed, "value": r.value, "threshold": r.threshold,
             "detail": r.detail} for r in results]
    write_frame(pd.DataFrame(rows), os.path.join(out_dir, "verify.csv"))
    write_json({"format_version": 1, "kind": "verify-report", "checks": [r.to_dict() for r in results]},
               os.path.join(out_dir, "verify.json"))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return 4
    return 0


def cmd_report(args, cfg) -> int:
    import pandas as pd
    from .errors import DataError
    from .io import read_json, write_frame
    rows2, rows3, rows4 = [], [], []
    for k, run in enumerate(args.runs, start=1):
        base = read_json(_need(os.path.join(run, f"{args.baseline}.json"), "backtest report"))["mean"]
        cand = read_json(_need(os.path.join(run, f"{args.candidate}.json"), "backtest report"))["mean"]
        b, c = args.baseline, args.candidate
        rows2.append({"fold": k, f"W_T {b}": base["W_T"], f"W_T {c}": cand["W_T"],
                      "ratio": cand["W_T"] / base["W_T"]})
        rows3.append({"fold": k, f"value added % {b}": base["annualized_value_added_pct"],
                      f"value added % {c}": cand["annualized_value_added_pct"]})
        diff = cand["V"] - base["V"]
        rows4.append({"fold": k, f"V {b}": base["V"], f"V {c}": cand["V"], f"cost {b}": base["total_cost"],
                      f"cost {c}": cand["total_cost"], f"risk {b}": base["total_risk"],
                      f"risk {c}": cand["total_risk"], "difference": diff,
                      "difference %": 100.0 * diff / abs(base["V"]) if base["V"] else float("nan")})
    if not rows2:
        raise DataError("no runs given")
    out_dir = args.out or cfg.io.out_dir
    for name, rows, digits in (("table2", rows2, 2), ("table3", rows3, 2), ("table4", rows4, 4)):
        df = pd.DataFrame(rows)
        ave = df.drop(columns="fold").mean().to_dict()
        df = pd.concat([df, pd.DataFrame([{"fold": "Ave.", **ave}])], ignore_index=True)
        shown = [col for col in df.columns if col not in ("fold", "ratio")]
        df[shown] = df[shown].astype(float).round(digits)
        write_frame(df, os.path.join(out_dir, f"{name}.csv"))
        print(f"{name}:\n{df.to_string(index=False)}\n")
    return 0


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "train": cmd_train, "backtest": cmd_backtest,
            "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("garchlq: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import GarchLQError
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except GarchLQError as exc:
        print(f"garchlq {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"garchlq {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
