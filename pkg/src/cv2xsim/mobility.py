"""Built-in highway/tunnel world: region layout, constant-speed traffic, platoon following.

The road is a 1-D ring (positions wrap) so traffic density stays stationary
over long runs.  Background vehicles hold a per-region speed; platoon members
match the head while an instantaneous clamp keeps the minimum gap, standing in
for a full car-following controller.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ConfigError, InvariantError


class RegionKind(IntEnum):
    HIGHWAY = 0
    TUNNEL = 1


class Role(IntEnum):
    PLATOON_HEAD = 0
    PLATOON_MEMBER = 1
    BACKGROUND = 2


@dataclass(frozen=True)
class Region:
    name: str
    length_m: float
    kind: RegionKind
    covered: bool


@dataclass(frozen=True)
class SpeedBands:
    highway_kmh: tuple[float, float] = (100.0, 130.0)
    tunnel_kmh: tuple[float, float] = (60.0, 80.0)

    def band_mps(self, kind: RegionKind) -> tuple[float, float]:
        lo, hi = self.highway_kmh if kind == RegionKind.HIGHWAY else self.tunnel_kmh
        return lo / 3.6, hi / 3.6


class RegionLayout:
    """Ordered road segments with half-open extents; boundaries belong to the entered region."""

    def __init__(self, regions: list[Region]):
        if not regions:
            raise ConfigError("world.regions must not be empty")
        self.regions = regions
        self.starts: list[float] = []
        acc = 0.0
        for r in regions:
            if r.length_m <= 0:
                raise ConfigError(f"region {r.name} must have positive length")
            self.starts.append(acc)
            acc += r.length_m
        self.total_length = acc

    def region_index_at(self, position_m: float) -> int:
        pos = position_m % self.total_length
        return bisect.bisect_right(self.starts, pos) - 1

    def region_at(self, position_m: float) -> Region:
        return self.regions[self.region_index_at(position_m)]

    def covered_regions(self) -> list[tuple[int, Region]]:
        return [(i, r) for i, r in enumerate(self.regions) if r.covered]

    def ring_distance(self, a_m: float, b_m: float) -> float:
        d = abs(a_m - b_m) % self.total_length
        return min(d, self.total_length - d)


@dataclass(slots=True)
class VehicleState:
    vid: int
    position_m: float        # front-bumper coordinate on the ring
    lane: int
    speed_mps: float
    role: Role
    region_idx: int = -1


@dataclass(frozen=True)
class WorldConfig:
    lanes: int = 1
    background_per_km_lane: float = 30.0
    vehicle_length_m: float = 12.0
    platoon_size: int = 6
    platoon_min_gap_m: float = 2.5
    platoon_spacing_m: float = 2.5       # initial bumper-to-bumper gap
    platoon_start_m: float = 100.0       # head front position at t=0
    mobility_step_ms: int = 100
    speeds: SpeedBands = SpeedBands()

    def validate(self) -> None:
        if self.platoon_size < 1:
            raise ConfigError("world.platoon.n_vehicles must be >= 1")
        if self.platoon_spacing_m < self.platoon_min_gap_m:
            raise ConfigError(
                f"world.platoon.spacing_m {self.platoon_spacing_m} is below the "
                f"{self.platoon_min_gap_m} m minimum gap"
            )
        if self.background_per_km_lane < 0 or self.lanes < 1:
            raise ConfigError("world traffic density/lanes invalid")
        if self.mobility_step_ms < 1:
            raise ConfigError("world.mobility_step_ms must be >= 1")
        for lo, hi in (self.speeds.highway_kmh, self.speeds.tunnel_kmh):
            if not 0 < lo <= hi:
                raise ConfigError("world speed bands must satisfy 0 < low <= high")


class World:
    """Vehicle kinematics plus a sorted position index for neighbor queries."""

    def __init__(self, layout: RegionLayout, cfg: WorldConfig, rng_of):
        # rng_of(vid) -> per-vehicle mobility RNG stream
        self.layout = layout
        self.cfg = cfg
        self.rng_of = rng_of
        self.vehicles: list[VehicleState] = []
        self.platoon_ids: list[int] = []
        self._sorted_pos: list[float] = []
        self._sorted_vid: list[int] = []

    # --- population ------------------------------------------------------

    def populate(self) -> None:
        cfg = self.cfg
        layout = self.layout
        spacing = cfg.vehicle_length_m + cfg.platoon_spacing_m
        span = (cfg.platoon_size - 1) * spacing + cfg.vehicle_length_m
        if span > layout.total_length:
            raise ConfigError(f"platoon span {span:.1f} m exceeds the {layout.total_length:.1f} m road")
        pos = cfg.platoon_start_m % layout.total_length
        for i in range(cfg.platoon_size):
            role = Role.PLATOON_HEAD if i == 0 else Role.PLATOON_MEMBER
            v = VehicleState(vid=i, position_m=(pos - i * spacing) % layout.total_length,
                             lane=1, speed_mps=0.0, role=role)
            self.vehicles.append(v)
            self.platoon_ids.append(i)
        n_background = round(cfg.background_per_km_lane * cfg.lanes * layout.total_length / 1000.0)
        gap = layout.total_length / n_background if n_background else 0.0
        for k in range(n_background):
            vid = cfg.platoon_size + k
            self.vehicles.append(VehicleState(
                vid=vid, position_m=(k * gap) % layout.total_length,
                lane=0, speed_mps=0.0, role=Role.BACKGROUND))
        for v in self.vehicles:
            v.region_idx = layout.region_index_at(v.position_m)
            if v.role == Role.BACKGROUND or v.role == Role.PLATOON_HEAD:
                v.speed_mps = self._draw_speed(v)
        head = self.vehicles[0]
        for i in self.platoon_ids[1:]:
            self.vehicles[i].speed_mps = head.speed_mps
        self._check_platoon_gaps()
        self._rebuild_index()

    def _draw_speed(self, v: VehicleState) -> float:
        lo, hi = self.cfg.speeds.band_mps(self.layout.regions[v.region_idx].kind)
        return self.rng_of(v.vid).uniform(lo, hi)

    # --- stepping ----------------------------------------------------------

    def step(self, dt_s: float) -> None:
        layout = self.layout
        total = layout.total_length
        # Free-running vehicles first: background and the platoon head.
        for v in self.vehicles:
            if v.role == Role.PLATOON_MEMBER:
                continue
            v.position_m = (v.position_m + v.speed_mps * dt_s) % total
            new_region = layout.region_index_at(v.position_m)
            if new_region != v.region_idx:
                v.region_idx = new_region
                v.speed_mps = self._draw_speed(v)
        # Members follow the head's speed, clamped so gaps never close below minimum.
        head = self.vehicles[self.platoon_ids[0]]
        min_spacing = self.cfg.vehicle_length_m + self.cfg.platoon_min_gap_m
        pred = head
        for i in self.platoon_ids[1:]:
            v = self.vehicles[i]
            band_lo, band_hi = self.cfg.speeds.band_mps(layout.regions[v.region_idx].kind)
            v.speed_mps = min(max(head.speed_mps, band_lo), band_hi)
            advanced = v.position_m + v.speed_mps * dt_s
            # Clamp against the predecessor in unwrapped coordinates.
            pred_pos = pred.position_m
            if pred_pos < v.position_m:   # predecessor wrapped around the ring
                pred_pos += total
            v.position_m = min(advanced, pred_pos - min_spacing) % total
            new_region = layout.region_index_at(v.position_m)
            v.region_idx = new_region
            pred = v
        self._check_platoon_gaps()
        self._rebuild_index()

    def _check_platoon_gaps(self) -> None:
        pred = None
        for i in self.platoon_ids:
            v = self.vehicles[i]
            if pred is not None:
                gap = self.layout.ring_distance(pred.position_m, v.position_m) - self.cfg.vehicle_length_m
                if gap < self.cfg.platoon_min_gap_m - 1e-9:
                    raise InvariantError(f"platoon gap {gap:.3f} m below minimum before vehicle {v.vid}")
            pred = v

    # --- queries -------------------------------------------------------------

    def _rebuild_index(self) -> None:
        order = sorted((v.position_m, v.vid) for v in self.vehicles)
        self._sorted_pos = [p for p, _ in order]
        self._sorted_vid = [vid for _, vid in order]

    def distance(self, a_vid: int, b_vid: int) -> float:
        return self.layout.ring_distance(self.vehicles[a_vid].position_m,
                                         self.vehicles[b_vid].position_m)

    def neighbors_within(self, vid: int, radius_m: float) -> list[int]:
        """Vehicle ids with ring distance <= radius, excluding the vehicle itself."""
        total = self.layout.total_length
        center = self.vehicles[vid].position_m
        pos, vids = self._sorted_pos, self._sorted_vid
        out = []
        lo, hi = center - radius_m, center + radius_m
        spans = [(lo, hi)]
        if lo < 0:
            spans = [(0.0, hi), (lo + total, total)]
        elif hi > total:
            spans = [(lo, total), (0.0, hi - total)]
        for a, b in spans:
            i = bisect.bisect_left(pos, a)
            j = bisect.bisect_right(pos, b)
            for k in range(i, j):
                if vids[k] != vid:
                    out.append(vids[k])
        out.sort()
        return out

    def in_coverage(self, position_m: float) -> int | None:
        """Index of the covered region containing the position, if any."""
        idx = self.layout.region_index_at(position_m)
        return idx if self.layout.regions[idx].covered else None
