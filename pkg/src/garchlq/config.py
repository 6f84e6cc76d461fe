"""Run configuration for the command-line front end.

A config file is JSON with up to five sections. Every key is optional and
falls back to the default shown here; unknown sections or keys are rejected::

    {
      "model":    {"preset": "desk", "n": 3, "params_path": null, "clamped": false,
                   "floor": 0.5, "cap": 2.0, "chi": 1e6, "mu_method": "sample-mean",
                   "mu_k": 1, "loss_kind": "paper-smoothness", "fit_max_iter": 200},
      "control":  {"delta": 0.99, "epsilon": 0.003, "gamma": null, "w0": 100.0, "T": 60,
                   "drift_convention": "dollar", "variant": "stabilized"},
      "nn":       {"width": 400, "wide_layers": 5, "seed": 0, "epochs": 100, "alpha": 1.0,
                   "max_iter": 20, "lr": 0.001, "batch": null, "paths_per_iter": 1,
                   "init_std": 0.01, "checkpoint_every": 0},
      "backtest": {"w0": 100.0, "n_paths": 50, "seed": 10000, "annualize": false,
                   "train_months": 60, "test_months": 6, "stride_months": 6},
      "io":       {"out_dir": "out"}
    }

``model.preset`` is ``"desk"`` or ``"theory"`` and is ignored when
``params_path`` names a fitted parameter file. ``control.gamma = null``
derives risk aversion from ``w0`` so the aim portfolio holds that much
capital.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .errors import DataError, UsageError


@dataclass
class ModelSection:
    preset: str = "desk"
    n: int = 3
    params_path: Optional[str] = None
    clamped: bool = False
    floor: float = 0.5
    cap: float = 2.0
    chi: float = 1e6
    mu_method: str = "sample-mean"
    mu_k: int = 1
    loss_kind: str = "paper-smoothness"
    fit_max_iter: int = 200

    def validate(self):
        if self.preset not in ("desk", "theory"):
            raise UsageError(f"model.preset must be 'desk' or 'theory', got {self.preset!r}")
        if self.n < 1:
            raise UsageError("model.n must be >= 1")
        if self.chi < 1:
            raise UsageError("model.chi must be >= 1")


@dataclass
class ControlSection:
    delta: float = 0.99
    epsilon: float = 0.003
    gamma: Optional[float] = None
    w0: float = 100.0
    T: int = 60
    drift_convention: str = "dollar"
    variant: str = "stabilized"

    def validate(self):
        if not 0 <= self.delta < 1:
            raise UsageError("control.delta must lie in [0, 1)")
        if self.epsilon <= 0 or self.T < 1:
            raise UsageError("control.epsilon must be positive and control.T >= 1")
        if self.gamma is not None and self.gamma <= 0:
            raise UsageError("control.gamma must be positive")


@dataclass
class NNSection:
    width: int = 400
    wide_layers: int = 5
    seed: int = 0
    epochs: int = 100
    alpha: float = 1.0
    max_iter: int = 20
    lr: float = 1e-3
    batch: Optional[int] = None
    paths_per_iter: int = 1
    init_std: float = 0.01
    checkpoint_every: int = 0

    def validate(self):
        if self.width < 1 or self.wide_layers < 1:
            raise UsageError("nn.width and nn.wide_layers must be >= 1")


@dataclass
class BacktestSection:
    w0: float = 100.0
    n_paths: int = 50
    seed: int = 10000
    annualize: bool = False
    train_months: int = 60
    test_months: int = 6
    stride_months: int = 6

    def validate(self):
        if self.n_paths < 1:
            raise UsageError("backtest.n_paths must be >= 1")


@dataclass
class IOSection:
    out_dir: str = "out"

    def validate(self):
        pass


_SECTIONS = {"model": ModelSection, "control": ControlSection, "nn": NNSection,
             "backtest": BacktestSection, "io": IOSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    control: ControlSection = field(default_factory=ControlSection)
    nn: NNSection = field(default_factory=NNSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)
    io: IOSection = field(default_factory=IOSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise UsageError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, klass in _SECTIONS.items():
            sub = d.get(name, {}) or {}
            if not isinstance(sub, dict):
                raise UsageError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise UsageError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            parts[name] = klass(**sub)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(d)

    def validate(self):
        for name in _SECTIONS:
            getattr(self, name).validate()

    def override(self, dotted: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides, skipping ``None`` values."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if section not in d or name not in d[section]:
                raise UsageError(f"unknown config key {key!r}")
            d[section][name] = value
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)
