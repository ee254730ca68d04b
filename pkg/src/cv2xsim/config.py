"""Scenario configuration: strict YAML schema, cross-field validation, bundled scenarios.

Unknown keys are hard errors so typos never silently fall back to defaults.
Every tunable carries its default here; domain modules re-validate their own
slices.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import yaml

from .apps import AlertServiceConfig, CamServiceConfig
from .channel import ChannelConfig
from .engine import TimeBase
from .errors import ConfigError, OversizedTbError
from .grid import ResourceGridConfig, tb_prbs_required
from .mobility import Region, RegionKind, RegionLayout, SpeedBands, WorldConfig
from .rrc import RrcConfig
from .sps import SpsParams
from .stack import StackConfig


class ModePolicy(str, Enum):
    MODE3_ONLY = "mode3_only"
    MODE4_ONLY = "mode4_only"
    SWITCHING = "switching"


@dataclass
class GridSection:
    n_subch: int = 4
    subch_size: int = 12
    subch_rb_start: int = 0
    adjacency: bool = True
    beta: int = 2
    slss_period_ms: int = 160
    bytes_per_prb: int = 36


@dataclass
class ChannelSection:
    carrier_ghz: float = 5.9
    tx_power_dbm: float = 23.0
    noise_dbm: float = -110.0
    sir_capture_db: float = 3.0
    sensing_range_m: float = 200.0
    highway_pathloss_exponent: float = 2.75
    tunnel_pathloss_exponent: float = 3.2
    highway_range_m: float = 100.0
    tunnel_range_m: float = 80.0


@dataclass
class SpsSection:
    p_step_ms: int = 100
    rsrp_threshold_dbm: float = -110.0
    threshold_step_db: float = 3.0
    c_resel_min: int = 5
    c_resel_max: int = 15
    t_p_ms: int = 4
    t_l_ms: int = 100
    l2_floor_fraction: float = 0.2
    l3_fraction: float = 0.2
    sensing_window_ms: int = 1000


@dataclass
class RrcSection:
    si_delay_ms: int = 50
    inactivity_timeout_ms: int = 500
    cell_search_period_ms: int = 100
    attach_rsrp_threshold_dbm: float = -100.0
    enodeb_tx_power_dbm: float = 43.0


@dataclass
class StackSection:
    pdcp_header_bytes: int = 2
    rohc_bytes: int = 4
    rlc_um_header_bytes: int = 1
    mac_header_bytes: int = 2
    lcid_space: int = 32
    harq_processes: int = 8
    uu_capacity_bytes_per_tti: int = 1000
    uu_processing_ttis: int = 4


@dataclass
class FacilitiesSection:
    cam_rate_hz: float = 10.0
    cam_size_min_bytes: int = 280
    cam_size_max_bytes: int = 330
    cam_deadline_ms: int = 100
    alert_rate_hz: float = 1.0
    alert_size_min_bytes: int = 50
    alert_size_max_bytes: int = 1500
    alert_deadline_ms: int = 100


def _default_regions() -> list[dict]:
    return [
        {"name": "R1", "length_m": 500.0, "kind": "tunnel", "covered": False},
        {"name": "R2", "length_m": 500.0, "kind": "highway", "covered": True},
        {"name": "R3", "length_m": 500.0, "kind": "tunnel", "covered": False},
        {"name": "R4", "length_m": 500.0, "kind": "highway", "covered": True},
    ]


@dataclass
class WorldSection:
    regions: list = field(default_factory=_default_regions)
    lanes: int = 1
    background_per_km_lane: float = 30.0
    vehicle_length_m: float = 12.0
    platoon_size: int = 6
    platoon_min_gap_m: float = 2.5
    platoon_spacing_m: float = 2.5
    platoon_start_m: float = 100.0
    mobility_step_ms: int = 100
    highway_speed_kmh: list = field(default_factory=lambda: [100.0, 130.0])
    tunnel_speed_kmh: list = field(default_factory=lambda: [60.0, 80.0])


@dataclass
class MetricsSection:
    focus: str = "platoon"          # receivers the ledger tracks: "platoon" or "all"
    timeseries_window_ms: int = 100


_SECTION_TYPES = {
    "grid": GridSection,
    "channel": ChannelSection,
    "sps": SpsSection,
    "rrc": RrcSection,
    "stack": StackSection,
    "facilities": FacilitiesSection,
    "world": WorldSection,
    "metrics": MetricsSection,
}

_REGION_KEYS = {"name", "length_m", "kind", "covered"}


@dataclass
class ScenarioConfig:
    schema: int = 1
    seed: int = 1
    duration_s: float = 10.0
    numerology_mu: int = 0
    mode_policy: str = "switching"
    grid: GridSection = field(default_factory=GridSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    sps: SpsSection = field(default_factory=SpsSection)
    rrc: RrcSection = field(default_factory=RrcSection)
    stack: StackSection = field(default_factory=StackSection)
    facilities: FacilitiesSection = field(default_factory=FacilitiesSection)
    world: WorldSection = field(default_factory=WorldSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # --- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("top-level config must be a mapping")
        top_fields = {f.name for f in dataclasses.fields(cls)}
        cfg = cls()
        for key, value in data.items():
            if key not in top_fields:
                raise ConfigError(f"{key}: unknown key")
            if key in _SECTION_TYPES:
                setattr(cfg, key, _build_section(_SECTION_TYPES[key], value, key))
            else:
                setattr(cfg, key, value)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # --- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.schema != 1:
            raise ConfigError(f"schema: unsupported version {self.schema}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed: must be an integer")
        if not (isinstance(self.duration_s, (int, float)) and self.duration_s > 0):
            raise ConfigError("duration_s: must be a positive number")
        if self.numerology_mu not in (0, 1, 2, 3):
            raise ConfigError(f"numerology_mu: must be in 0..3, got {self.numerology_mu}")
        try:
            policy = ModePolicy(self.mode_policy)
        except ValueError:
            raise ConfigError(f"mode_policy: must be one of "
                              f"{[p.value for p in ModePolicy]}, got {self.mode_policy!r}") from None
        if self.metrics.focus not in ("platoon", "all"):
            raise ConfigError(f"metrics.focus: must be 'platoon' or 'all', got {self.metrics.focus!r}")
        if self.metrics.timeseries_window_ms < 1:
            raise ConfigError("metrics.timeseries_window_ms: must be >= 1")

        grid = self.grid_config()
        grid.validate()
        self.channel_config().validate()
        try:
            self.sps_params().validate()
        except ConfigError as exc:
            raise ConfigError(str(exc)) from None
        self.rrc_config().validate()
        stack = self.stack_config()
        stack.validate()
        self.cam_config().validate()
        self.alert_config().validate()
        self.world_config().validate()
        layout = self.layout()   # validates region entries

        if policy == ModePolicy.MODE3_ONLY and any(not r.covered for r in layout.regions):
            raise ConfigError("mode_policy: mode3_only requires every region to be covered")
        try:
            tb_prbs_required(self.facilities.cam_size_max_bytes, grid, stack.non_ip_overhead)
        except OversizedTbError as exc:
            raise ConfigError(f"facilities.cam_size_max_bytes: {exc}") from None
        if self.facilities.alert_rate_hz > 0:
            try:
                tb_prbs_required(self.facilities.alert_size_max_bytes, grid, stack.non_ip_overhead)
            except OversizedTbError as exc:
                raise ConfigError(f"facilities.alert_size_max_bytes: {exc}") from None

    # --- derived domain objects ----------------------------------------------

    def time_base(self) -> TimeBase:
        return TimeBase(self.numerology_mu)

    def policy(self) -> ModePolicy:
        return ModePolicy(self.mode_policy)

    def grid_config(self) -> ResourceGridConfig:
        g = self.grid
        return ResourceGridConfig(
            n_subch=g.n_subch, subch_size=g.subch_size, subch_rb_start=g.subch_rb_start,
            adjacency=g.adjacency, beta=g.beta,
            slss_period_ticks=self.time_base().ticks(g.slss_period_ms),
            bytes_per_prb=g.bytes_per_prb,
        )

    def channel_config(self) -> ChannelConfig:
        c = self.channel
        return ChannelConfig(
            carrier_ghz=c.carrier_ghz, tx_power_dbm=c.tx_power_dbm, noise_dbm=c.noise_dbm,
            sir_capture_db=c.sir_capture_db, sensing_range_m=c.sensing_range_m,
            pathloss_exponent=c.highway_pathloss_exponent,
            reception_range_m=c.highway_range_m,
        )

    def region_channel_params(self, kind: RegionKind) -> tuple[float, float]:
        c = self.channel
        if kind == RegionKind.TUNNEL:
            return c.tunnel_pathloss_exponent, c.tunnel_range_m
        return c.highway_pathloss_exponent, c.highway_range_m

    def sps_params(self) -> SpsParams:
        s = self.sps
        return SpsParams(
            p_step_ms=s.p_step_ms, rsrp_threshold_dbm=s.rsrp_threshold_dbm,
            threshold_step_db=s.threshold_step_db, c_resel_min=s.c_resel_min,
            c_resel_max=s.c_resel_max, t_p_ms=s.t_p_ms, t_l_ms=s.t_l_ms,
            l2_floor_fraction=s.l2_floor_fraction, l3_fraction=s.l3_fraction,
            sensing_window_ms=s.sensing_window_ms,
        )

    def rrc_config(self) -> RrcConfig:
        r = self.rrc
        return RrcConfig(
            si_delay_ms=r.si_delay_ms, inactivity_timeout_ms=r.inactivity_timeout_ms,
            cell_search_period_ms=r.cell_search_period_ms,
            attach_rsrp_threshold_dbm=r.attach_rsrp_threshold_dbm,
            enodeb_tx_power_dbm=r.enodeb_tx_power_dbm,
        )

    def stack_config(self) -> StackConfig:
        s = self.stack
        return StackConfig(
            pdcp_header_bytes=s.pdcp_header_bytes, rohc_bytes=s.rohc_bytes,
            rlc_um_header_bytes=s.rlc_um_header_bytes, mac_header_bytes=s.mac_header_bytes,
            lcid_space=s.lcid_space, harq_processes=s.harq_processes,
            uu_capacity_bytes_per_tti=s.uu_capacity_bytes_per_tti,
            uu_processing_ttis=s.uu_processing_ttis,
        )

    def cam_config(self) -> CamServiceConfig:
        f = self.facilities
        return CamServiceConfig(rate_hz=f.cam_rate_hz, size_min_bytes=f.cam_size_min_bytes,
                                size_max_bytes=f.cam_size_max_bytes, deadline_ms=f.cam_deadline_ms)

    def alert_config(self) -> AlertServiceConfig:
        f = self.facilities
        return AlertServiceConfig(rate_hz=f.alert_rate_hz, size_min_bytes=f.alert_size_min_bytes,
                                  size_max_bytes=f.alert_size_max_bytes, deadline_ms=f.alert_deadline_ms)

    def layout(self) -> RegionLayout:
        regions = []
        for i, entry in enumerate(self.world.regions):
            if not isinstance(entry, dict):
                raise ConfigError(f"world.regions[{i}]: must be a mapping")
            unknown = set(entry) - _REGION_KEYS
            if unknown:
                raise ConfigError(f"world.regions[{i}].{sorted(unknown)[0]}: unknown key")
            kind_raw = entry.get("kind", "highway")
            try:
                kind = RegionKind[str(kind_raw).upper()]
            except KeyError:
                raise ConfigError(f"world.regions[{i}].kind: must be 'highway' or 'tunnel', "
                                  f"got {kind_raw!r}") from None
            regions.append(Region(
                name=str(entry.get("name", f"R{i + 1}")),
                length_m=float(entry.get("length_m", 500.0)),
                kind=kind,
                covered=bool(entry.get("covered", False)),
            ))
        return RegionLayout(regions)

    def world_config(self) -> WorldConfig:
        w = self.world
        for key in ("highway_speed_kmh", "tunnel_speed_kmh"):
            band = getattr(w, key)
            if not (isinstance(band, (list, tuple)) and len(band) == 2):
                raise ConfigError(f"world.{key}: must be a [low, high] pair")
        return WorldConfig(
            lanes=w.lanes, background_per_km_lane=w.background_per_km_lane,
            vehicle_length_m=w.vehicle_length_m, platoon_size=w.platoon_size,
            platoon_min_gap_m=w.platoon_min_gap_m, platoon_spacing_m=w.platoon_spacing_m,
            platoon_start_m=w.platoon_start_m, mobility_step_ms=w.mobility_step_ms,
            speeds=SpeedBands(highway_kmh=tuple(w.highway_speed_kmh),
                              tunnel_kmh=tuple(w.tunnel_speed_kmh)),
        )

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build_section(section_cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: must be a mapping")
    names = {f.name for f in dataclasses.fields(section_cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    return section_cls(**data)


def loads(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    cfg = ScenarioConfig.from_dict(data or {})
    cfg.validate()
    return cfg


def dumps(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def bundled_scenario_path(name: str) -> str | None:
    base = os.path.join(os.path.dirname(__file__), "scenarios")
    for candidate in (name, f"{name}.yaml"):
        path = os.path.join(base, candidate)
        if os.path.isfile(path):
            return path
    return None


def load_config(path_or_name: str) -> ScenarioConfig:
    """Load a config file, or a bundled scenario by name (e.g. 'platoon_mode4')."""
    path = path_or_name if os.path.isfile(path_or_name) else bundled_scenario_path(path_or_name)
    if path is None:
        raise ConfigError(f"no such config file or bundled scenario: {path_or_name!r}")
    with open(path, "r", encoding="utf-8") as f:
        return loads(f.read())
