"""Scenario configuration. Defaults reproduce the highway evaluation profile."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .grid import ChannelConfig
from .mac import SUPPORTED_RRI
from .phy import RadioConfig, _default_thresholds

MCS_MODES = ("fixed7", "fixed11", "adaptive")


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    # topology
    road_length: float = 2000.0
    lanes: int = 6
    lane_width: float = 4.0
    density: float = 0.06
    speed_kmh: float = 70.0
    # run control
    duration: float = 20.0
    warmup: int = 1000
    seed: int = 1
    # traffic
    mcs_mode: str = "fixed7"
    packet_size: int = 190
    app_period: int = 100
    # channel
    bandwidth_mhz: int = 10
    num_subchannels: int = 5
    subchannel_size_rb: int = 10
    # radio
    carrier_ghz: float = 5.9
    psd_limit: float = 23.0
    noise_figure: float = 9.0
    shadow_sigma: float = 3.0
    sinr_thresholds: dict = field(default_factory=_default_thresholds)
    antenna_height: float = 1.5
    # access layer
    keep_probability: float = 0.0
    rsrp_threshold: float = -126.0
    rssi_threshold: float = -90.0
    rri: int = 100
    t1: int = 0
    # dcc
    dcc_period: int = 100
    cbr_window: int = 100
    cr_past: int = 500
    cr_future: int = 500
    # metrics
    max_range: float = 500.0
    bin_width: float = 25.0
    error_range: float = 500.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mcs_mode not in MCS_MODES:
            raise ConfigError(f"mcs_mode: must be one of {MCS_MODES}, got {self.mcs_mode!r}")
        if self.density < 0:
            raise ConfigError(f"density: must be >= 0, got {self.density}")
        if self.road_length <= 0:
            raise ConfigError(f"road_length: must be > 0, got {self.road_length}")
        if self.lanes < 2 or self.lanes % 2:
            raise ConfigError(f"lanes: need an even count >= 2, got {self.lanes}")
        if self.duration < 0:
            raise ConfigError(f"duration: must be >= 0, got {self.duration}")
        if self.packet_size <= 0:
            raise ConfigError(f"packet_size: must be > 0, got {self.packet_size}")
        if self.app_period not in SUPPORTED_RRI or self.rri not in SUPPORTED_RRI:
            raise ConfigError(f"rri/app_period: must be one of {SUPPORTED_RRI}")
        if not 0.0 <= self.keep_probability <= 0.8:
            raise ConfigError(f"keep_probability: must lie in [0, 0.8], got {self.keep_probability}")
        if self.bin_width <= 0:
            raise ConfigError(f"bin_width: must be > 0, got {self.bin_width}")
        try:
            self.channel()
        except ValueError as exc:
            raise ConfigError(f"num_subchannels/subchannel_size_rb/bandwidth_mhz: {exc}") from exc
        self.sinr_thresholds = {int(k): float(v) for k, v in self.sinr_thresholds.items()}
        for m in (0, 7, 11):
            if m not in self.sinr_thresholds:
                raise ConfigError(f"sinr_thresholds: missing entry for MCS {m}")

    def channel(self) -> ChannelConfig:
        return ChannelConfig(bandwidth_mhz=self.bandwidth_mhz, num_subchannels=self.num_subchannels,
                             subchannel_size_rb=self.subchannel_size_rb)

    def radio(self) -> RadioConfig:
        return RadioConfig(carrier_ghz=self.carrier_ghz, psd_limit=self.psd_limit,
                           noise_figure=self.noise_figure, shadow_sigma_los=self.shadow_sigma,
                           sinr_thresholds=dict(self.sinr_thresholds),
                           antenna_height=self.antenna_height,
                           subchannel_size_rb=self.subchannel_size_rb)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["sinr_thresholds"] = {str(k): v for k, v in sorted(self.sinr_thresholds.items())}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration key")
        return cls(**{k: _coerce(known[k], k, v) for k, v in data.items()})


def _coerce(f: dataclasses.Field, key: str, value: Any) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, dict):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError("expected a mapping")
            return value
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    return key, yaml.safe_load(raw) if raw.strip() else raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ScenarioConfig:
    """File values first, then key=value overrides; absent keys take defaults."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path}: top level must be a mapping")
        data.update(loaded)
    for item in overrides or ():
        key, value = parse_override(item)
        data[key] = value
    return ScenarioConfig.from_dict(data)
