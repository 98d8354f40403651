"""Run configuration: one flat key set shared by every CLI command.

Values layer as defaults, then config-file entries, then CLI flags.
The config file is line-oriented `key = value` text; `#` starts a
comment. Unknown keys are rejected. A handful of preprocessing keys
are fixed in this build and only accept their stock values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .geo import ACCEL_LIMIT, SPEED_LIMIT
from .models import ModelSpec, default_spec
from .synth import SynthConfig
from .train import TrainConfig
from .trips import N_MAX, N_MIN, TRIP_GAP_SECONDS


class ConfigError(ValueError):
    """Bad key, bad value, or an inconsistent combination."""


@dataclass(frozen=True)
class RunConfig:
    """Every tunable the pipeline commands read, with stock defaults."""

    seed: int = 0
    # preprocessing (fixed in this build)
    n_min: int = N_MIN
    n_max: int = N_MAX
    gap_seconds: float = TRIP_GAP_SECONDS
    speed_limit: float = SPEED_LIMIT
    accel_limit: float = ACCEL_LIMIT
    # synthetic data
    n_trips: int = 200
    interval_s: float = 2.0
    length_min: int = 60
    length_max: int = 400
    # model
    framework: str = "trajssd"
    backbone: str = "cnn3p"
    n_cp: int = 2
    first_pool: int = 2
    l_uni: int = 16
    head_kernel: int = 1
    dropout: float = 0.5
    lam_loc: float = 300.0
    lam_cls: float = 1.0
    # training
    batch_size: int = 128
    max_epochs: int = 100
    lr: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    lr_floor: float = 1e-7
    patience: int = 15
    min_delta: float = 1e-3
    # evaluation
    cp_radius_m: float = 150.0
    utw_window_s: float = 120.0


KEY_DOCS: dict[str, str] = {
    "seed": "master seed; every random draw in a run derives from it",
    "n_min": "shortest trip kept, in points",
    "n_max": "longest trip kept; longer tracks are chunked",
    "gap_seconds": "time gap that splits a track into separate trips",
    "speed_limit": "max plausible speed in m/s; faster points are dropped",
    "accel_limit": "max plausible |acceleration| in m/s^2",
    "n_trips": "how many synthetic trips to generate",
    "interval_s": "synthetic GPS sampling period in seconds",
    "length_min": "shortest synthetic trip, in points",
    "length_max": "longest synthetic trip, in points",
    "framework": "output head family: trajyolo or trajssd",
    "backbone": "feature extractor: mlp, cnn, or cnn3p",
    "n_cp": "change point slots in the trajyolo output vector",
    "first_pool": "pool size of the first conv stage (trajssd)",
    "l_uni": "points per sub-trip row; must equal 8 * first_pool",
    "head_kernel": "kernel size of the trajssd head conv (odd)",
    "dropout": "dropout rate on the first two dense head layers",
    "lam_loc": "weight of the localization loss term",
    "lam_cls": "weight of the classification loss term",
    "batch_size": "trips per training batch",
    "max_epochs": "training epoch cap",
    "lr": "initial Adam learning rate",
    "lr_decay_every": "epochs between rate divisions",
    "lr_decay_factor": "multiplier applied at each division",
    "lr_floor": "rate freezes at its last value >= this",
    "patience": "epochs without val-loss gain before stopping",
    "min_delta": "val-loss drop that counts as a gain",
    "cp_radius_m": "geodesic match radius for change point scoring",
    "utw_window_s": "window length of the fixed-window baseline",
}

# preprocessing stages compile these in; overriding them is an error
FIXED_KEYS: dict[str, int | float] = {
    "n_min": N_MIN,
    "n_max": N_MAX,
    "gap_seconds": TRIP_GAP_SECONDS,
    "speed_limit": SPEED_LIMIT,
    "accel_limit": ACCEL_LIMIT,
}

_VALID_PAIRS = {"trajyolo": {"mlp", "cnn"}, "trajssd": {"cnn", "cnn3p"}}


_TYPES = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}


def coerce_value(key: str, raw: str) -> int | float | str:
    """Parse a raw string by the key's declared type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key: {key!r}")
    kind = _TYPES[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({kind.__name__} expected)") from exc


def parse_config_file(text: str) -> dict[str, int | float | str]:
    """`key = value` lines; blank lines and `#` comments ignored."""
    values: dict[str, int | float | str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values[key] = coerce_value(key, raw.strip())
    return values


def validate(config: RunConfig) -> RunConfig:
    for key, stock in FIXED_KEYS.items():
        if getattr(config, key) != stock:
            raise ConfigError(f"{key} is fixed at {stock} in this build")
    if config.framework not in _VALID_PAIRS:
        raise ConfigError(f"framework must be one of {sorted(_VALID_PAIRS)}")
    if config.backbone not in _VALID_PAIRS[config.framework]:
        raise ConfigError(
            f"backbone {config.backbone!r} does not pair with {config.framework!r}; "
            f"valid: {sorted(_VALID_PAIRS[config.framework])}"
        )
    if config.l_uni != 8 * config.first_pool:
        raise ConfigError(
            f"l_uni {config.l_uni} does not equal the conv stride/pool product "
            f"{8 * config.first_pool} implied by first_pool={config.first_pool}; "
            "valid pairs: first_pool 1/2/3/4 -> l_uni 8/16/24/32"
        )
    if not 1 <= config.first_pool <= 4:
        raise ConfigError("first_pool must be 1, 2, 3, or 4")
    if config.head_kernel < 1 or config.head_kernel % 2 == 0:
        raise ConfigError("head_kernel must be odd and >= 1")
    if config.n_cp < 1:
        raise ConfigError("n_cp must be >= 1")
    if not 0.0 <= config.dropout < 1.0:
        raise ConfigError("dropout must lie in [0, 1)")
    if config.lam_loc < 0 or config.lam_cls < 0:
        raise ConfigError("loss weights must be >= 0")
    if min(config.batch_size, config.max_epochs, config.lr_decay_every, config.patience) < 1:
        raise ConfigError("batch_size, max_epochs, lr_decay_every, patience must be >= 1")
    if config.lr <= 0 or config.lr_floor <= 0 or not 0 < config.lr_decay_factor < 1:
        raise ConfigError("learning rates must be positive, decay factor in (0, 1)")
    if config.min_delta < 0:
        raise ConfigError("min_delta must be >= 0")
    if config.n_trips < 1:
        raise ConfigError("n_trips must be >= 1")
    if not (N_MIN <= config.length_min <= config.length_max <= N_MAX):
        raise ConfigError(
            f"need {N_MIN} <= length_min <= length_max <= {N_MAX}"
        )
    if config.cp_radius_m <= 0 or config.utw_window_s <= 0:
        raise ConfigError("cp_radius_m and utw_window_s must be positive")
    return config


def make_config(
    file_values: dict[str, int | float | str] | None = None,
    overrides: dict[str, int | float | str] | None = None,
) -> RunConfig:
    """Layer defaults <- config file <- CLI flags, then validate."""
    merged: dict[str, int | float | str] = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in _TYPES:
                raise ConfigError(f"unknown config key: {key!r}")
            merged[key] = value
    return validate(RunConfig(**merged))


def model_spec_from(config: RunConfig) -> ModelSpec:
    spec = default_spec(
        config.framework,
        config.backbone,
        n_cp_slots=config.n_cp,
        first_pool=config.first_pool,
        head_kernel=config.head_kernel,
    )
    return dataclasses.replace(spec, dropout_rate=config.dropout)


def synth_config_from(config: RunConfig) -> SynthConfig:
    return SynthConfig(
        seed=config.seed,
        interval_s=config.interval_s,
        length_range=(config.length_min, config.length_max),
    )


def train_config_from(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        lr_initial=config.lr,
        lr_decay_every=config.lr_decay_every,
        lr_decay_factor=config.lr_decay_factor,
        lr_floor=config.lr_floor,
        patience=config.patience,
        min_delta=config.min_delta,
        lam_loc=config.lam_loc,
        lam_cls=config.lam_cls,
        seed=config.seed,
    )
