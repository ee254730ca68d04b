"""Control plane: cell search, attach handshake, three-state FSM, mode switching.

States and resource-allocation modes are coupled: a registered vehicle
(connected or merely inactive) is network-scheduled, a detached one allocates
autonomously from the preconfigured pool.  The two switch directions are
asymmetric on purpose — attaching costs one handshake, while leaving coverage
costs waiting for the next over-the-air synchronization cycle.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import NamedTuple

from .engine import TimeBase
from .errors import InvariantError
from .grid import ResourceGridConfig
from .sps import SlMode


class RrcState(IntEnum):
    IDLE = 0
    INACTIVE = 1
    CONN = 2


class RrcEvent(Enum):
    COVERAGE_GAINED = "coverage_gained"
    COVERAGE_LOST = "coverage_lost"
    TRAFFIC = "traffic"
    INACTIVITY_TIMEOUT = "inactivity_timeout"
    HANDSHAKE_COMPLETE = "handshake_complete"
    HANDSHAKE_ABORTED = "handshake_aborted"


# The only legal state changes; anything else is a bug.
ALLOWED_FSM_TRANSITIONS = frozenset({
    (RrcState.IDLE, RrcState.CONN),
    (RrcState.CONN, RrcState.IDLE),
    (RrcState.CONN, RrcState.INACTIVE),
    (RrcState.INACTIVE, RrcState.CONN),
    (RrcState.INACTIVE, RrcState.IDLE),
})


@dataclass(frozen=True)
class RrcConfig:
    si_delay_ms: int = 50              # attach handshake round trip (request + MIB/SIB)
    inactivity_timeout_ms: int = 500
    cell_search_period_ms: int = 100
    attach_rsrp_threshold_dbm: float = -100.0
    enodeb_tx_power_dbm: float = 43.0

    def validate(self) -> None:
        from .errors import ConfigError

        if self.si_delay_ms < 1 or self.inactivity_timeout_ms < 1 or self.cell_search_period_ms < 1:
            raise ConfigError("rrc timers must be >= 1 ms")


@dataclass(frozen=True)
class SystemInfo:
    """What the network hands over during attach: identity, geometry, sync, mode-4 pool."""

    cell_id: int
    grid: ResourceGridConfig
    sync_period_ticks: int


class CellSite(NamedTuple):
    cell_id: int
    position_m: float
    coverage_radius_m: float


class Transition(NamedTuple):
    from_state: RrcState
    to_state: RrcState
    at_tick: int


@dataclass(slots=True)
class RrcContext:
    """Per-vehicle control-plane state."""

    state: RrcState = RrcState.IDLE
    mode: SlMode = SlMode.MODE4
    serving_cell: int | None = None
    si: SystemInfo | None = None
    pending_attach: tuple[int, int] | None = None   # (cell, complete_at tick)
    pending_mode4_at: int | None = None             # sync boundary that re-enables autonomous tx
    mode4_usable_from: int = 0
    last_activity: int = 0

    def check_coupling(self) -> None:
        idle = self.state == RrcState.IDLE
        if idle != (self.mode == SlMode.MODE4) or idle != (self.serving_cell is None):
            raise InvariantError(
                f"state/mode coupling broken: state={self.state.name} mode={self.mode.name}"
                f" serving={self.serving_cell}"
            )

    def sidelink_ready(self, now: int) -> bool:
        """False while a mode switch is in progress; queued messages wait it out."""
        if self.pending_attach is not None:
            return False
        if self.mode == SlMode.MODE4:
            return now >= self.mode4_usable_from
        return True


def cell_search(ue_position_m: float, cells: list[CellSite], cfg: RrcConfig,
                rsrp_of, distance_of) -> int | None:
    """Nearest cell within coverage whose signal clears the attach threshold.

    Distance ties break toward the lower cell id so repeated runs agree.
    """
    best: tuple[float, int] | None = None
    for cell in cells:
        d = distance_of(ue_position_m, cell.position_m)
        if d > cell.coverage_radius_m:
            continue
        if rsrp_of(cell, d) < cfg.attach_rsrp_threshold_dbm:
            continue
        key = (d, cell.cell_id)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


def mode_switch_latency(from_mode: SlMode, to_mode: SlMode, now: int,
                        tb: TimeBase, cfg: RrcConfig, sync_period_ticks: int) -> int:
    """Tick at which the target mode becomes usable.

    Toward the network it is one handshake; toward autonomous operation the
    vehicle must wait for the next synchronization subframe cycle.
    """
    if from_mode == to_mode:
        raise ValueError("not a mode switch")
    if to_mode == SlMode.MODE3:
        return now + tb.ticks(cfg.si_delay_ms)
    return ((now // sync_period_ticks) + 1) * sync_period_ticks


def begin_attach(ctx: RrcContext, cell_id: int, now: int, tb: TimeBase, cfg: RrcConfig) -> int:
    """Start the attach handshake; returns its completion tick."""
    if ctx.state != RrcState.IDLE:
        raise InvariantError("attach handshake must start from the detached state")
    complete_at = now + tb.ticks(cfg.si_delay_ms)
    ctx.pending_attach = (cell_id, complete_at)
    return complete_at


def step_fsm(ctx: RrcContext, event: RrcEvent, now: int, cfg: RrcConfig, tb: TimeBase,
             si: SystemInfo | None = None, sync_period_ticks: int = 160) -> Transition | None:
    """Apply one control-plane event; returns the state change, if any."""
    old = ctx.state

    if event == RrcEvent.COVERAGE_GAINED:
        # Attachment needs the full handshake; the caller schedules its completion.
        return None

    if event == RrcEvent.HANDSHAKE_COMPLETE:
        if ctx.state != RrcState.IDLE or ctx.pending_attach is None:
            return None
        cell_id, _ = ctx.pending_attach
        ctx.pending_attach = None
        ctx.state = RrcState.CONN
        ctx.mode = SlMode.MODE3
        ctx.serving_cell = cell_id
        ctx.si = si
        ctx.pending_mode4_at = None
        ctx.last_activity = now

    elif event == RrcEvent.HANDSHAKE_ABORTED:
        ctx.pending_attach = None
        return None

    elif event == RrcEvent.COVERAGE_LOST:
        if ctx.state == RrcState.IDLE:
            ctx.pending_attach = None
            return None
        ctx.state = RrcState.IDLE
        ctx.mode = SlMode.MODE4
        ctx.serving_cell = None
        ctx.pending_attach = None
        ctx.mode4_usable_from = mode_switch_latency(
            SlMode.MODE3, SlMode.MODE4, now, tb, cfg, sync_period_ticks)
        ctx.pending_mode4_at = ctx.mode4_usable_from

    elif event == RrcEvent.TRAFFIC:
        ctx.last_activity = now
        if ctx.state != RrcState.INACTIVE:
            return None
        ctx.state = RrcState.CONN

    elif event == RrcEvent.INACTIVITY_TIMEOUT:
        if ctx.state != RrcState.CONN:
            return None
        if now - ctx.last_activity < tb.ticks(cfg.inactivity_timeout_ms):
            return None
        ctx.state = RrcState.INACTIVE

    if ctx.state == old:
        return None
    if (old, ctx.state) not in ALLOWED_FSM_TRANSITIONS:
        raise InvariantError(f"illegal FSM transition {old.name} -> {ctx.state.name}")
    ctx.check_coupling()
    return Transition(old, ctx.state, now)
