"""INI run configuration shared by the command-line tools.

Sections and keys::

    [scenario]     every ScenarioConfig field except geometry/sector/seed, plus
                   n_x, n_y, spacing and az_min_deg, az_max_deg, el_min_deg, el_max_deg
    [observation]  a_max, kernel_sigma
    [encoder]      every EncoderConfig field except n_x, n_y (taken from [scenario])
    [run]          seed, n_episodes, first_index, shard_size, policies, window

Tuple-valued keys take JSON lists, e.g. ``roads = [[[100, -100], [160, 90]]]``.
Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .array_geometry import ArrayGeometry, Sector
from .channel import ScenarioConfig, config_digest
from .observation import ObservationConfig
from .ssb_encoder import EncoderConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    n_episodes: int = 100
    first_index: int = 0
    shard_size: int = 100
    policies: tuple = ("dft", "encoder", "svd")
    window: int = 20

    def __post_init__(self):
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_episodes < 1 or self.shard_size < 1 or self.first_index < 0 or self.window < 1:
            raise ValueError("n_episodes, shard_size and window must be >= 1, first_index >= 0")


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def to_dict(self) -> dict:
        obs = {"a_max": self.observation.a_max, "kernel_sigma": self.observation.kernel_sigma}
        return {"scenario": self.scenario.to_dict(), "observation": obs,
                "encoder": dataclasses.asdict(self.encoder), "run": dataclasses.asdict(self.run)}

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        return build_run_config(self.scenario, self.observation, self.encoder,
                                dataclasses.replace(self.run, seed=seed))


_SECTOR_KEYS = ("az_min_deg", "az_max_deg", "el_min_deg", "el_max_deg")
_GEOMETRY_KEYS = ("n_x", "n_y", "spacing")
_SCENARIO_SKIP = {"geometry", "sector", "seed"}
_ENCODER_SKIP = {"n_x", "n_y"}


def _tupleize(x):
    return tuple(_tupleize(v) for v in x) if isinstance(x, list) else x


def _convert(section: str, key: str, text: str, default):
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            value = float(text)
            if not np.isfinite(value):
                raise ValueError("not finite")
            return value
        if isinstance(default, tuple):
            if section == "run" and key == "policies":
                return tuple(p.strip() for p in text.split(",") if p.strip())
            value = json.loads(text)
            if not isinstance(value, list):
                raise ValueError("expected a JSON list")
            return _tupleize(value)
        return text.strip()
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def _fields(cls, skip=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def _defaults(cls, skip=()):
    inst = cls()
    return {name: getattr(inst, name) for name in _fields(cls, skip)}


def build_run_config(scenario, observation, encoder, run) -> RunConfig:
    """Tie the sub-configs together: shared geometry, sector and seed."""
    scenario = dataclasses.replace(scenario, seed=run.seed)
    observation = ObservationConfig(scenario.geometry, scenario.sector,
                                    observation.a_max, observation.kernel_sigma)
    encoder = dataclasses.replace(encoder, n_x=scenario.geometry.n_x, n_y=scenario.geometry.n_y)
    return RunConfig(scenario, observation, encoder, run)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    known = {"scenario", "observation", "encoder", "run"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    def collect(section, defaults, extra=()):
        values = {}
        if not parser.has_section(section):
            return values, {}
        extras = {}
        for key, text in parser.items(section):
            if key in defaults:
                values[key] = _convert(section, key, text, defaults[key])
            elif key in extra:
                extras[key] = _convert(section, key, text, extra[key])
            else:
                raise ConfigError(f"unknown key [{section}] {key}")
        return values, extras

    geom, sector = ArrayGeometry(), Sector()
    extra = dict(zip(_GEOMETRY_KEYS, (geom.n_x, geom.n_y, geom.spacing)))
    extra.update(zip(_SECTOR_KEYS, np.rad2deg([sector.az_min, sector.az_max,
                                                sector.el_min, sector.el_max]).tolist()))
    scen_vals, scen_extra = collect("scenario", _defaults(ScenarioConfig, _SCENARIO_SKIP), extra)
    obs_vals, _ = collect("observation", {"a_max": 6.0, "kernel_sigma": 1.0})
    enc_vals, _ = collect("encoder", _defaults(EncoderConfig, _ENCODER_SKIP))
    run_vals, _ = collect("run", _defaults(RunOptions))

    def make(cls, section, **kwargs):
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    merged = {**extra, **scen_extra}
    geometry = make(ArrayGeometry, "scenario", n_x=merged["n_x"], n_y=merged["n_y"],
                    spacing=merged["spacing"])
    try:
        sect = Sector.from_degrees(*[merged[k] for k in _SECTOR_KEYS])
    except ValueError as exc:
        raise ConfigError(f"[scenario] {', '.join(_SECTOR_KEYS)}: {exc}") from None
    scenario = make(ScenarioConfig, "scenario", geometry=geometry, sector=sect, **scen_vals)
    observation = make(ObservationConfig, "observation", **obs_vals)
    encoder = make(EncoderConfig, "encoder", **enc_vals)
    run = make(RunOptions, "run", **run_vals)
    return build_run_config(scenario, observation, encoder, run)


def load_config(path=None) -> RunConfig:
    if path is None:
        return build_run_config(ScenarioConfig(), ObservationConfig(), EncoderConfig(), RunOptions())
    with open(path) as fh:
        return parse_config(fh.read())
