"""Run configuration: one flat set of keys, loadable from a JSON file.

Precedence when resolving a run: built-in defaults < config file < explicit
command-line flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .adaround import AdaRoundConfig, H_FUNCTIONS
from .qubo import CEParams
from .quantizer import GRID_POLICIES, MIN_MAX, PREACT_MSE, WEIGHT_MSE

THREADS_ENV = "ROUNDOPT_THREADS"

GRID_ALIASES = {
    "minmax": MIN_MAX, "min_max": MIN_MAX, "min-max": MIN_MAX,
    "wmse": WEIGHT_MSE, "weight_mse": WEIGHT_MSE,
    "pmse": PREACT_MSE, "preact_mse": PREACT_MSE,
}

METHODS = ("nearest", "floor", "ceil", "stochastic", "qubo-ce", "qubo-exhaustive",
           "adaround", "ste", "bias-corrected")

# "lambda" is a keyword, so the config key maps onto the attribute ``lam``
_KEY_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


def normalize_grid(name: str) -> str:
    try:
        return GRID_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown grid policy {name!r}; expected one of {sorted(GRID_ALIASES)}") from None


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    bits: int = 4
    grid_policy: str = WEIGHT_MSE
    method: str = "adaround"
    seed: int = 0
    iterations: int = 10_000
    batch_size: int = 32
    lam: float = 1e4
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_fraction: float = 0.2
    lr: float = 1e-3
    use_asymmetric: bool = True
    use_activation_in_loss: bool = True
    h_function: str = "rect_sigmoid"
    bias_correction: bool = False
    ce_population: int = 128
    ce_elite_fraction: float = 0.1
    ce_smoothing: float = 0.7
    ce_iterations: int = 200
    threads: int = 1
    calib_samples: Optional[int] = None

    def __post_init__(self):
        self.grid_policy = normalize_grid(self.grid_policy)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.h_function not in H_FUNCTIONS:
            raise ConfigError(f"unknown h_function {self.h_function!r}")
        if self.bits < 2:
            raise ConfigError(f"bits must be >= 2, got {self.bits}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        merged = asdict(base) if base is not None else {}
        for key, value in d.items():
            attr = _KEY_ALIASES.get(key, key)
            if attr not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[attr] = value
        return cls(**merged)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def adaround(self) -> AdaRoundConfig:
        return AdaRoundConfig(
            iterations=self.iterations, batch_size=self.batch_size, lam=self.lam,
            beta_start=self.beta_start, beta_end=self.beta_end, warmup_fraction=self.warmup_fraction,
            lr=self.lr, use_asymmetric=self.use_asymmetric,
            use_activation_in_loss=self.use_activation_in_loss, h_function=self.h_function,
        )

    def ce(self) -> CEParams:
        return CEParams(population=self.ce_population, elite_fraction=self.ce_elite_fraction,
                        smoothing=self.ce_smoothing, iterations=self.ce_iterations)


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data
