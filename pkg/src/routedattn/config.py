"""Run configuration: JSON schema, validation, and the `paper` preset."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional

from .analysis import POLICIES

ESTIMATOR_MODES = ("plain", "valueAware")
PRECISIONS = ("double", "single-executor")
BUDGET_MODES = ("globalDensity", "perClusterTopP")


class ConfigError(ValueError):
    """Raised when a run configuration is malformed."""


# dataclass attribute -> JSON key
_JSON_KEYS = {
    "n_q": "nQ",
    "n_k": "nK",
    "d": "d",
    "c_q": "cQ",
    "c_k": "cK",
    "budget_mode": "budgetMode",
    "rho": "rho",
    "p": "p",
    "estimator_mode": "estimatorMode",
    "policy": "policy",
    "seeds": "seeds",
    "precision": "precision",
    "kmeans_restarts": "kmeansRestarts",
    "q_blobs": "qBlobs",
    "k_blobs": "kBlobs",
    "sigma": "sigma",
    "center_scale": "centerScale",
}
_ATTR_FOR_KEY = {v: k for k, v in _JSON_KEYS.items()}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs besides the tensors themselves.

    The generator fields (qBlobs, kBlobs, sigma, centerScale) only matter
    to `gen`; they ride along so one JSON file drives the whole pipeline.
    """

    n_q: int
    n_k: int
    d: int
    c_q: int
    c_k: int
    budget_mode: str = "globalDensity"
    rho: Optional[float] = 0.25
    p: Optional[float] = None
    estimator_mode: str = "valueAware"
    policy: str = "errorAwareCompensated"
    seeds: tuple = (0,)
    precision: str = "double"
    kmeans_restarts: int = 1
    q_blobs: int = 4
    k_blobs: int = 4
    sigma: float = 0.1
    center_scale: float = 1.0

    def __post_init__(self):
        for name in ("n_q", "n_k", "d", "c_q", "c_k", "kmeans_restarts"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{_JSON_KEYS[name]} must be an integer >= 1, got {value!r}")
        if self.c_q > self.n_q:
            raise ConfigError(f"cQ ({self.c_q}) must not exceed nQ ({self.n_q})")
        if self.c_k > self.n_k:
            raise ConfigError(f"cK ({self.c_k}) must not exceed nK ({self.n_k})")
        if self.budget_mode not in BUDGET_MODES:
            raise ConfigError(f"budgetMode must be one of {BUDGET_MODES}, got {self.budget_mode!r}")
        if self.budget_mode == "globalDensity":
            if self.rho is None or not (0.0 <= float(self.rho) <= 1.0):
                raise ConfigError(f"rho must lie in [0, 1] for globalDensity, got {self.rho!r}")
        else:
            if self.p is None or not (0.0 < float(self.p) <= 1.0):
                raise ConfigError(f"p must lie in (0, 1] for perClusterTopP, got {self.p!r}")
        if self.estimator_mode not in ESTIMATOR_MODES:
            raise ConfigError(
                f"estimatorMode must be one of {ESTIMATOR_MODES}, got {self.estimator_mode!r}"
            )
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.budget_mode == "perClusterTopP" and self.policy in ("random", "oracleKnapsack"):
            raise ConfigError(
                f"policy {self.policy!r} is only defined for the globalDensity budget"
            )
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if not isinstance(self.seeds, tuple):
            object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty integer list")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool):
                raise ConfigError(f"seeds must all be integers, got {s!r}")
        for name in ("q_blobs", "k_blobs"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{_JSON_KEYS[name]} must be an integer >= 1, got {value!r}")
        if not (float(self.sigma) > 0.0):
            raise ConfigError(f"sigma must be positive, got {self.sigma!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
        unknown = sorted(set(data) - set(_ATTR_FOR_KEY))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = [k for k in ("nQ", "nK", "d", "cQ", "cK") if k not in data]
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")
        kwargs = {_ATTR_FOR_KEY[k]: v for k, v in data.items()}
        if "seeds" in kwargs:
            if not isinstance(kwargs["seeds"], (list, tuple)):
                raise ConfigError(f"seeds must be a list, got {kwargs['seeds']!r}")
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[_JSON_KEYS[f.name]] = value
        return out


def apply_preset(config: RunConfig, preset: str) -> RunConfig:
    """Named defaults. `paper` pins the main-configuration choices: top-p
    budget at p = 0.85, value-aware estimation, error-aware routing, and
    cluster counts scaled as cQ = max(4, nQ // 12), cK = max(8, nK / 3.6)
    (clamped to the token counts for tiny instances)."""
    if preset != "paper":
        raise ConfigError(f"unknown preset {preset!r}")
    return replace(
        config,
        budget_mode="perClusterTopP",
        p=0.85,
        rho=None,
        estimator_mode="valueAware",
        policy="errorAwareCompensated",
        c_q=min(config.n_q, max(4, config.n_q // 12)),
        c_k=min(config.n_k, max(8, round(config.n_k / 3.6))),
    )
