"""Run configuration: defaults, file loading, flag overrides.

Configuration is a two-level mapping of sections to scalar settings.
Sources merge in priority order: built-in defaults, then a JSON config
file, then command-line flags. Unknown sections or keys are rejected
rather than ignored, so typos fail loudly.
"""

from __future__ import annotations

import copy
import json

from .aghq import AghqConfig
from .penalties import PenaltySpec
from .selection import PipelineConfig
from .training import TrainConfig
from .variational import ViConfig


class ConfigError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "model": {
        "hidden": 5,
        "penalty": "none",
        "lam": 0.0,
        "alpha1": 1.0,
        "alpha2": 1.0,
        "alpha3": 1.0,
        "beta": 1.0,
        "lam_hidden": 0.0,
        "dropout_p": 0.0,
        "zero_tol": 1e-6,
    },
    "train": {
        "learning_rate": 0.01,
        "max_epochs": 500,
        "clip_norm": 5.0,
        "restarts": 3,
        "tol": 1e-6,
        "patience": 10,
    },
    "vi": {
        "n_mc": 1,
        "eval_n_mc": 128,
        "amortized": False,
        "state_noise": 0.1,
        "transition": "sampled",
    },
    "aghq": {
        "k": 9,
        "newton_max": 25,
        "newton_tol": 1e-10,
        "state_noise": 0.1,
        "refit_epochs": 0,
    },
    "selection": {
        "estimator": "pmle",
        "criterion": "bic",
        "q_grid": [2, 4, 8],
        "oos_fraction": 0.2,
        "fine_tune_epoch_factor": 4,
        "fine_tune_lr_div": 10.0,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, (list, tuple))
    return True


def merge_config(base: dict, override: dict, source: str = "config") -> dict:
    """Overlay override onto a copy of base, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"{source}: unknown key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{source}: {key!r} must be a section")
            for sub, sval in val.items():
                if sub not in out[key]:
                    raise ConfigError(
                        f"{source}: unknown key {key}.{sub}")
                if not _type_ok(out[key][sub], sval):
                    raise ConfigError(
                        f"{source}: bad type for {key}.{sub}: "
                        f"expected {type(out[key][sub]).__name__}")
                out[key][sub] = sval
        else:
            if not _type_ok(out[key], val):
                raise ConfigError(
                    f"{source}: bad type for {key}: expected "
                    f"{type(out[key]).__name__}")
            out[key] = val
    return out


def load_config(path: str) -> dict:
    """Defaults overlaid with a JSON config file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path!r}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return merge_config(default_config(), data, source=path)


def penalty_from(cfg: dict) -> PenaltySpec:
    m = cfg["model"]
    try:
        return PenaltySpec(kind=m["penalty"], lam=m["lam"],
                           alpha1=m["alpha1"], alpha2=m["alpha2"],
                           alpha3=m["alpha3"], beta=m["beta"],
                           lam_hidden=m["lam_hidden"],
                           dropout_p=m["dropout_p"],
                           zero_tol=m["zero_tol"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(learning_rate=t["learning_rate"],
                           max_epochs=t["max_epochs"],
                           clip_norm=t["clip_norm"],
                           restarts=t["restarts"], tol=t["tol"],
                           patience=t["patience"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def vi_from(cfg: dict) -> ViConfig:
    v = cfg["vi"]
    try:
        return ViConfig(n_mc=v["n_mc"], eval_n_mc=v["eval_n_mc"],
                        amortized=v["amortized"],
                        state_noise=v["state_noise"],
                        transition=v["transition"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def aghq_from(cfg: dict) -> AghqConfig:
    a = cfg["aghq"]
    try:
        return AghqConfig(k=a["k"], newton_max=a["newton_max"],
                          newton_tol=a["newton_tol"],
                          state_noise=a["state_noise"],
                          refit_epochs=a["refit_epochs"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def pipeline_from(cfg: dict) -> PipelineConfig:
    s = cfg["selection"]
    try:
        return PipelineConfig(
            estimator=s["estimator"],
            penalty=penalty_from(cfg),
            train=train_from(cfg),
            vi=vi_from(cfg),
            aghq=aghq_from(cfg),
            oos_fraction=s["oos_fraction"],
            fine_tune_epoch_factor=s["fine_tune_epoch_factor"],
            fine_tune_lr_div=s["fine_tune_lr_div"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
