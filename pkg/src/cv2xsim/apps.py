"""Message services and the platooning application layer.

Every vehicle broadcasts periodic status messages at a fixed per-node period;
the roadside infrastructure emits event alerts toward the platoon head, which
relays them onto the sidelink so trailing members learn about conditions
ahead.  Generation is load-controlled by the configured rate, not by vehicle
dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import TimeBase
from .errors import ConfigError
from .stack import BROADCAST, MessageKind, Pipeline, V2xMessage


@dataclass(frozen=True)
class CamServiceConfig:
    rate_hz: float = 10.0
    size_min_bytes: int = 280
    size_max_bytes: int = 330
    deadline_ms: int = 100

    def validate(self) -> None:
        if not 1.0 <= self.rate_hz <= 10.0:
            raise ConfigError(f"facilities.cam_rate_hz must lie in [1, 10], got {self.rate_hz}")
        if not 1 <= self.size_min_bytes <= self.size_max_bytes:
            raise ConfigError("facilities CAM size range is inverted or non-positive")
        if self.deadline_ms < 20:
            raise ConfigError("facilities.cam_deadline_ms must be >= 20 (minimum selection window)")


@dataclass(frozen=True)
class AlertServiceConfig:
    rate_hz: float = 1.0
    size_min_bytes: int = 50
    size_max_bytes: int = 1500
    deadline_ms: int = 100

    def validate(self) -> None:
        if self.rate_hz < 0:
            raise ConfigError("facilities.alert_rate_hz must be >= 0")
        if not 1 <= self.size_min_bytes <= self.size_max_bytes:
            raise ConfigError("facilities alert size range is inverted or non-positive")
        if self.deadline_ms < 20:
            raise ConfigError("facilities.alert_deadline_ms must be >= 20")


class CamService:
    """Fixed-period status broadcast for one vehicle, phase-offset per node."""

    def __init__(self, node_id: int, cfg: CamServiceConfig, tb: TimeBase, rng):
        self.node_id = node_id
        self.cfg = cfg
        self.tb = tb
        self.rng = rng
        self.period_ticks = tb.ticks(1000.0 / cfg.rate_hz)
        self.offset = rng.randrange(self.period_ticks)

    def first_tick(self) -> int:
        return self.offset

    def make(self, now: int, trace_id: int) -> V2xMessage:
        size = self.rng.randint(self.cfg.size_min_bytes, self.cfg.size_max_bytes)
        return V2xMessage(
            trace_id=trace_id,
            kind=MessageKind.CAM,
            pipeline=Pipeline.NON_IP,
            payload_bytes=size,
            created_at=now,
            source=self.node_id,
            destination=BROADCAST,
            deadline=now + self.tb.ticks(self.cfg.deadline_ms),
        )


class AlertSource:
    """Infrastructure-side alert generator: Poisson arrivals aimed at the platoon head."""

    def __init__(self, cfg: AlertServiceConfig, tb: TimeBase, rng):
        self.cfg = cfg
        self.tb = tb
        self.rng = rng

    @property
    def active(self) -> bool:
        return self.cfg.rate_hz > 0

    def next_gap_ticks(self) -> int:
        gap_s = self.rng.expovariate(self.cfg.rate_hz)
        return max(1, self.tb.ticks(gap_s * 1000.0))

    def make(self, now: int, trace_id: int, source: int, head_id: int) -> V2xMessage:
        size = self.rng.randint(self.cfg.size_min_bytes, self.cfg.size_max_bytes)
        return V2xMessage(
            trace_id=trace_id,
            kind=MessageKind.ALERT,
            pipeline=Pipeline.IP,
            payload_bytes=size,
            created_at=now,
            source=source,
            destination=head_id,
            deadline=now + self.tb.ticks(self.cfg.deadline_ms),
        )


def forward_alert(alert: V2xMessage, head_id: int) -> V2xMessage:
    """Relay leg: the head rebroadcasts the alert payload on the sidelink.

    Trace id, creation time and deadline are preserved so the end-to-end
    latency (infrastructure to trailing member) stays within one budget.
    """
    return V2xMessage(
        trace_id=alert.trace_id,
        kind=MessageKind.ALERT,
        pipeline=Pipeline.NON_IP,
        payload_bytes=alert.payload_bytes,
        created_at=alert.created_at,
        source=head_id,
        destination=BROADCAST,
        deadline=alert.deadline,
    )
