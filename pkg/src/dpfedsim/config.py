"""Experiment configuration: JSON schema, strict validation, profiles.

Configs are plain JSON.  Unknown fields are rejected with the offending
path in the message, because a silently ignored typo in ``dp.sigma`` or
``dp.clip_c`` would corrupt the privacy parameters of a run.  Every field
has a profile default, so ``{}`` is a valid config.

The ``desk`` profile runs 5 clients, 5 local epochs, 50 rounds on a
500-sample 32x32 dataset; the ``paper`` profile is identical except for
150 rounds.  All sub-seeds (dataset, split, partition, init, per-client,
per-round, transport) derive from ``root_seed`` via the documented mix in
``seeds.py``.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .client import Hyper
from .dpcore import MECHANISMS, NOISE_SITES, DpConfig
from .learn.models import MODEL_KINDS

__all__ = [
    "ConfigError",
    "DatasetConfig",
    "TransportConfig",
    "ConvergenceConfig",
    "ExperimentConfig",
    "PROFILES",
    "parse_config",
    "load_config",
    "config_to_dict",
]

PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid config; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 500
    h: int = 32
    w: int = 32
    seed: Optional[int] = None  # derived from root_seed when omitted
    partition_mode: str = "iid"


@dataclass(frozen=True)
class TransportConfig:
    drop_rate: float = 0.0
    latency_ticks: int = 0
    seed: Optional[int] = None


@dataclass(frozen=True)
class ConvergenceConfig:
    metric: str = "acc"
    patience: int = 5
    min_delta: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    clients: int = 5
    local_epochs: int = 5
    rounds: int = 50
    model_kind: str = "micro_dual_branch"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    dp: DpConfig = field(default_factory=lambda: DpConfig(clip_c=0.5, mechanism="none"))
    hyper_lr: float = 0.1
    hyper_batch: int = 16
    local_unit: str = "epochs"
    transport: TransportConfig = field(default_factory=TransportConfig)
    convergence: Optional[ConvergenceConfig] = None
    # "equal" averages updates with weight 1/k; "size" weights by shard size
    weighting: str = "equal"
    output_dir: str = "out"
    root_seed: int = 0

    def hyper(self) -> Hyper:
        return Hyper(self.hyper_lr, self.hyper_batch, self.local_epochs, self.local_unit)


def _expect_keys(section: dict, allowed, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}{key}" if path.endswith(".") or not path else key,
                              "unknown field")


def _get(section: dict, key: str, default, types, path: str, pred=None, what: str = ""):
    value = section.get(key, default)
    if value is None and default is None:
        return None
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{path}{key}", f"expected {what or 'a number'}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{path}{key}", f"expected {what or types}, got {type(value).__name__}")
    if pred is not None and not pred(value):
        raise ConfigError(f"{path}{key}", what or "out of range")
    return value


def parse_config(raw: dict, profile: str = "desk") -> ExperimentConfig:
    """Validate a raw JSON dict against the schema with strict fields."""
    if profile not in PROFILES:
        raise ConfigError("profile", f"must be one of {PROFILES}")
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    top_allowed = {
        "clients", "local_epochs", "rounds", "model_kind", "dataset", "dp",
        "hyper", "transport", "convergence", "weighting", "output_dir", "root_seed",
    }
    _expect_keys(raw, top_allowed, "")

    clients = _get(raw, "clients", 5, int, "", lambda v: v >= 1, "an integer >= 1")
    local_epochs = _get(raw, "local_epochs", 5, int, "", lambda v: v >= 1, "an integer >= 1")
    default_rounds = 150 if profile == "paper" else 50
    rounds = _get(raw, "rounds", default_rounds, int, "", lambda v: v >= 1, "an integer >= 1")
    model_kind = _get(raw, "model_kind", "micro_dual_branch", str, "",
                      lambda v: v in MODEL_KINDS, f"one of {MODEL_KINDS}")
    root_seed = _get(raw, "root_seed", 0, int, "", lambda v: v >= 0, "a nonnegative integer")
    output_dir = _get(raw, "output_dir", "out", str, "")
    weighting = _get(raw, "weighting", "equal", str, "",
                     lambda v: v in ("equal", "size"), "one of ('equal', 'size')")

    ds_raw = raw.get("dataset", {})
    if not isinstance(ds_raw, dict):
        raise ConfigError("dataset", "must be an object")
    _expect_keys(ds_raw, {"n", "h", "w", "seed", "partition_mode"}, "dataset.")
    dataset = DatasetConfig(
        n=_get(ds_raw, "n", 500, int, "dataset.", lambda v: v >= 1, "an integer >= 1"),
        h=_get(ds_raw, "h", 32, int, "dataset.", lambda v: v >= 8, "an integer >= 8"),
        w=_get(ds_raw, "w", 32, int, "dataset.", lambda v: v >= 8, "an integer >= 8"),
        seed=_get(ds_raw, "seed", None, int, "dataset.", lambda v: v >= 0,
                  "a nonnegative integer"),
        partition_mode=_get(ds_raw, "partition_mode", "iid", str, "dataset.",
                            lambda v: v in ("iid", "label_skew"), "one of ('iid', 'label_skew')"),
    )
    if dataset.n < clients:
        raise ConfigError("dataset.n", f"must be >= clients ({clients})")
    if model_kind == "micro_dual_branch" and (dataset.h % 4 or dataset.w % 4):
        raise ConfigError("dataset.h", "micro_dual_branch needs h and w divisible by 4")

    dp_raw = raw.get("dp", {})
    if not isinstance(dp_raw, dict):
        raise ConfigError("dp", "must be an object")
    _expect_keys(dp_raw, {"mechanism", "sigma", "clip_c", "delta", "noise_site"}, "dp.")
    mechanism = _get(dp_raw, "mechanism", "none", str, "dp.",
                     lambda v: v in MECHANISMS, f"one of {MECHANISMS}")
    sigma = _get(dp_raw, "sigma", 0.05, (int, float), "dp.",
                 lambda v: v > 0 and math.isfinite(v), "a positive finite real")
    clip_c = _get(dp_raw, "clip_c", 0.5, (int, float), "dp.",
                  lambda v: v > 0 and math.isfinite(v), "a positive finite real")
    delta = _get(dp_raw, "delta", 1e-5, (int, float), "dp.",
                 lambda v: 0 < v < 1, "a real in (0, 1)")
    noise_site = _get(dp_raw, "noise_site", "client", str, "dp.",
                      lambda v: v in NOISE_SITES, f"one of {NOISE_SITES}")
    dp = DpConfig(float(clip_c), float(sigma), float(delta), mechanism, noise_site)

    hy_raw = raw.get("hyper", {})
    if not isinstance(hy_raw, dict):
        raise ConfigError("hyper", "must be an object")
    _expect_keys(hy_raw, {"lr", "batch", "local_unit"}, "hyper.")
    lr = _get(hy_raw, "lr", 0.1, (int, float), "hyper.",
              lambda v: v >= 0 and math.isfinite(v), "a nonnegative finite real")
    batch = _get(hy_raw, "batch", 16, int, "hyper.", lambda v: v >= 1, "an integer >= 1")
    local_unit = _get(hy_raw, "local_unit", "epochs", str, "hyper.",
                      lambda v: v in ("epochs", "steps"), "one of ('epochs', 'steps')")

    tr_raw = raw.get("transport", {})
    if not isinstance(tr_raw, dict):
        raise ConfigError("transport", "must be an object")
    _expect_keys(tr_raw, {"drop_rate", "latency_ticks", "seed"}, "transport.")
    transport = TransportConfig(
        drop_rate=float(_get(tr_raw, "drop_rate", 0.0, (int, float), "transport.",
                             lambda v: 0 <= v < 1, "a real in [0, 1)")),
        latency_ticks=_get(tr_raw, "latency_ticks", 0, int, "transport.",
                           lambda v: v >= 0, "a nonnegative integer"),
        seed=_get(tr_raw, "seed", None, int, "transport.", lambda v: v >= 0,
                  "a nonnegative integer"),
    )

    convergence = None
    if raw.get("convergence") is not None:
        cv_raw = raw["convergence"]
        if not isinstance(cv_raw, dict):
            raise ConfigError("convergence", "must be an object or null")
        _expect_keys(cv_raw, {"metric", "patience", "min_delta"}, "convergence.")
        convergence = ConvergenceConfig(
            metric=_get(cv_raw, "metric", "acc", str, "convergence.",
                        lambda v: v in ("loss", "dice", "jaccard", "acc"),
                        "one of ('loss', 'dice', 'jaccard', 'acc')"),
            patience=_get(cv_raw, "patience", 5, int, "convergence.",
                          lambda v: v >= 1, "an integer >= 1"),
            min_delta=float(_get(cv_raw, "min_delta", 1e-3, (int, float), "convergence.",
                                 lambda v: v >= 0, "a nonnegative real")),
        )

    return ExperimentConfig(
        clients=clients,
        local_epochs=local_epochs,
        rounds=rounds,
        model_kind=model_kind,
        dataset=dataset,
        dp=dp,
        hyper_lr=float(lr),
        hyper_batch=batch,
        local_unit=local_unit,
        transport=transport,
        convergence=convergence,
        weighting=weighting,
        output_dir=output_dir,
        root_seed=root_seed,
    )


def load_config(path, profile: str = "desk") -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return parse_config(raw, profile)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved-config echo; ``parse_config`` on the result round-trips."""
    out = {
        "clients": cfg.clients,
        "local_epochs": cfg.local_epochs,
        "rounds": cfg.rounds,
        "model_kind": cfg.model_kind,
        "dataset": dataclasses.asdict(cfg.dataset),
        "dp": {
            "mechanism": cfg.dp.mechanism,
            "sigma": cfg.dp.sigma,
            "clip_c": cfg.dp.clip_c,
            "delta": cfg.dp.delta,
            "noise_site": cfg.dp.noise_site,
        },
        "hyper": {"lr": cfg.hyper_lr, "batch": cfg.hyper_batch, "local_unit": cfg.local_unit},
        "transport": dataclasses.asdict(cfg.transport),
        "convergence": dataclasses.asdict(cfg.convergence) if cfg.convergence else None,
        "weighting": cfg.weighting,
        "output_dir": cfg.output_dir,
        "root_seed": cfg.root_seed,
    }
    return out
