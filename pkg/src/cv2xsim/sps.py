"""Sensing-based semi-persistent scheduling.

A transmitter keeps a trailing window of decoded reservations and per-slot
power measurements, enumerates every placement in its selection window (L1),
drops placements predicted busy by a sensed reservation above an RSRP
threshold (L2, with a 20% floor enforced by escalating the threshold 3 dB at
a time), ranks the survivors by measured RSSI and draws uniformly from the
quietest fraction (L3).  The chosen resource repeats every message period for
a random number of transmissions before the whole procedure re-runs.

Vehicles run this autonomously (mode 4); the central scheduler runs the same
enumeration against its authoritative table of issued grants (mode 3).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, NamedTuple

from .channel import dbm_to_mw, mw_to_dbm
from .engine import TimeBase
from .errors import EmptySelectionWindowError
from .grid import Csr, ResourceGridConfig, build_pssch_pool, is_slss_subframe, subch_overlap


class SlMode(IntEnum):
    MODE3 = 3   # network-assisted: central scheduler owns the reservations
    MODE4 = 4   # autonomous: each vehicle senses and self-allocates


class SensingEntry(NamedTuple):
    """One decoded control message inside the trailing sensing window."""

    subframe: int
    subch_start: int
    l_subch: int
    rsrp_dbm: float
    rssi_dbm: float
    reserved_interval_ms: int   # 0 = sender announced no reservation


@dataclass(frozen=True)
class SelectionWindow:
    """Future slots a new grant may use: [n + gap, n + latency bound]."""

    n: int          # grant-request tick
    t_p_ms: int
    t_l_ms: int
    start: int      # ticks, inclusive
    end: int        # ticks, inclusive


@dataclass(slots=True)
class Grant:
    """A persistent reservation: one resource repeating every period."""

    csr: Csr
    period_ticks: int
    c_resel: int
    mode: SlMode
    owner: int
    kind: int = 0
    reservation_ms: int = 0   # interval advertised over the air
    grant_id: int = 0
    initial_c_resel: int = 0
    occ_index: int = 0        # next occurrence number to fire


@dataclass(frozen=True)
class SpsParams:
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

    def validate(self) -> None:
        from .errors import ConfigError

        if self.p_step_ms <= 0:
            raise ConfigError("sps.p_step_ms must be positive")
        if not 0 <= self.t_p_ms <= 4:
            raise ConfigError(f"sps.t_p_ms must be within [0, 4], got {self.t_p_ms}")
        if not 20 <= self.t_l_ms <= 100:
            raise ConfigError(f"sps.t_l_ms must be within [20, 100], got {self.t_l_ms}")
        if not 1 <= self.c_resel_min <= self.c_resel_max:
            raise ConfigError("sps.c_resel bounds must satisfy 1 <= min <= max")
        if not 0 < self.l2_floor_fraction <= 1 or not 0 < self.l3_fraction <= 1:
            raise ConfigError("sps fractions must lie in (0, 1]")
        if self.sensing_window_ms < self.p_step_ms:
            raise ConfigError("sps.sensing_window_ms must cover at least one reservation step")


class ExclusionResult(NamedTuple):
    l2: list[Csr]
    threshold_dbm: float
    escalations: int


class PickResult(NamedTuple):
    csr: Csr
    l3: list[Csr]


class SelectionResult(NamedTuple):
    csr: Csr
    window: SelectionWindow
    m_total: int
    l2_size: int
    l3_size: int
    threshold_dbm: float
    escalations: int


def selection_window(n: int, params: SpsParams, tb: TimeBase, deadline_tick: int | None = None) -> SelectionWindow:
    """Build the window at request tick n, clipped to the message deadline.

    Clipping keeps every transmission inside the message's latency budget; a
    budget too short for the standard minimum window is reported as empty.
    """
    t_l_ms = params.t_l_ms
    if deadline_tick is not None:
        budget_ms = int((deadline_tick - n) // tb.ticks_per_ms)
        t_l_ms = min(t_l_ms, budget_ms)
        if t_l_ms < 20:
            raise EmptySelectionWindowError(
                f"latency budget of {budget_ms} ms at tick {n} cannot fit a selection window"
            )
    return SelectionWindow(
        n=n,
        t_p_ms=params.t_p_ms,
        t_l_ms=t_l_ms,
        start=n + tb.ticks(params.t_p_ms),
        end=n + tb.ticks(t_l_ms),
    )


def enumerate_l1(pool_subframes: list[int], l_subch: int, grid_cfg: ResourceGridConfig) -> list[Csr]:
    """All candidate placements: every pool subframe crossed with every fitting start."""
    n_subch = grid_cfg.n_subch
    if l_subch > n_subch:
        raise EmptySelectionWindowError(f"need {l_subch} contiguous subchannels, grid has {n_subch}")
    if not pool_subframes:
        raise EmptySelectionWindowError("selection window contains no data subframe")
    starts = range(n_subch - l_subch + 1)
    return [Csr(y, s, l_subch) for y in pool_subframes for s in starts]


def exclude_reserved(
    l1: list[Csr],
    sensing: list[SensingEntry],
    params: SpsParams,
    c_resel: int,
    p_rsvp_tx_ticks: int,
    window: SelectionWindow,
    tb: TimeBase,
) -> ExclusionResult:
    """Drop candidates whose future occurrences land on a sensed reservation.

    A candidate y is busy when some entry z (reserved, above threshold,
    overlapping subchannels) satisfies y + j*P'_tx = z + step*k for some
    j < c_resel and k placing the right side inside the grant's lifetime.
    Since every sensed z precedes the window and every candidate occurrence
    falls inside the lifetime horizon, that holds exactly when the residues
    of y + j*P'_tx and z agree modulo the step.

    Too-small survivor lists escalate the RSRP threshold and retry; the loop
    always terminates because a high enough threshold excludes nothing.
    """
    m_total = len(l1)
    floor = math.ceil(params.l2_floor_fraction * m_total)
    step = params.p_step_ms * tb.ticks_per_ms
    window_ticks = tb.ticks(params.sensing_window_ms)
    lo, hi = window.n - window_ticks, window.n
    candidates = [
        e for e in sensing
        if e.reserved_interval_ms > 0 and lo <= e.subframe < hi
    ]
    shifts = sorted({(j * p_rsvp_tx_ticks) % step for j in range(c_resel)})

    threshold = params.rsrp_threshold_dbm
    escalations = 0
    while True:
        reserved: dict[int, list[tuple[int, int]]] = {}
        for e in candidates:
            if e.rsrp_dbm > threshold:
                reserved.setdefault(e.subframe % step, []).append((e.subch_start, e.l_subch))
        if not reserved:
            return ExclusionResult(list(l1), threshold, escalations)
        l2 = []
        for csr in l1:
            y, s0, l = csr
            busy = False
            for shift in shifts:
                for zs0, zl in reserved.get((y + shift) % step, ()):
                    if subch_overlap(s0, l, zs0, zl):
                        busy = True
                        break
                if busy:
                    break
            if not busy:
                l2.append(csr)
        if len(l2) >= floor:
            return ExclusionResult(l2, threshold, escalations)
        threshold += params.threshold_step_db
        escalations += 1


def rank_and_pick(
    l2: list[Csr],
    rssi_of: Callable[[Csr], float],
    rng,
    params: SpsParams,
) -> PickResult:
    """Keep the quietest fraction of L2 (ties by position) and draw uniformly."""
    if not l2:
        raise EmptySelectionWindowError("cannot rank an empty candidate list")
    ranked = sorted(l2, key=lambda c: (rssi_of(c), c.subframe, c.subch_start))
    size = max(1, math.ceil(params.l3_fraction * len(ranked)))
    l3 = ranked[:size]
    return PickResult(l3[rng.randrange(len(l3))], l3)


def draw_c_resel(rng, params: SpsParams) -> int:
    return rng.randint(params.c_resel_min, params.c_resel_max)


def occurrence_tick(base_subframe: int, index: int, period_ticks: int, grid_cfg: ResourceGridConfig) -> int:
    """Tick of the index-th repetition; sync collisions defer by one tick."""
    t = base_subframe + index * period_ticks
    if is_slss_subframe(t, grid_cfg):
        t += 1
    return t


def on_transmission(grant: Grant) -> bool:
    """Decrement the reselection counter; True means the grant is spent."""
    grant.c_resel -= 1
    return grant.c_resel <= 0


class SensingStore:
    """Per-node sensing state: decoded reservations plus per-slot power measurements."""

    def __init__(self, n_subch: int, noise_dbm: float, params: SpsParams, tb: TimeBase):
        self.n_subch = n_subch
        self.noise_mw = dbm_to_mw(noise_dbm)
        self.window_ticks = tb.ticks(params.sensing_window_ms)
        self.step_ticks = params.p_step_ms * tb.ticks_per_ms
        self.k_count = params.sensing_window_ms // params.p_step_ms
        self.entries: deque[SensingEntry] = deque()
        self._power: dict[int, list[float]] = {}   # tick -> linear mw per subchannel
        self._last_power_prune = 0

    def note_sci(self, tick: int, subch_start: int, l_subch: int,
                 rsrp_dbm: float, rssi_dbm: float, reserved_ms: int) -> None:
        self.entries.append(SensingEntry(tick, subch_start, l_subch, rsrp_dbm, rssi_dbm, reserved_ms))

    def note_power(self, tick: int, subch_start: int, l_subch: int, power_mw: float) -> None:
        row = self._power.get(tick)
        if row is None:
            row = [0.0] * self.n_subch
            self._power[tick] = row
        for s in range(subch_start, subch_start + l_subch):
            row[s] += power_mw

    def prune(self, now: int) -> None:
        cut = now - self.window_ticks
        entries = self.entries
        while entries and entries[0].subframe < cut:
            entries.popleft()
        # Measurement rows are rebuilt at most twice per window.
        if self._power and now - self._last_power_prune >= self.window_ticks // 2:
            self._power = {t: row for t, row in self._power.items() if t >= cut}
            self._last_power_prune = now

    def entries_in_window(self, n: int) -> list[SensingEntry]:
        cut = n - self.window_ticks
        return [e for e in self.entries if cut <= e.subframe < n]

    def measured_rssi(self, tick: int, subch_start: int, l_subch: int) -> float:
        """Aggregate strength actually measured over one slot's subchannels."""
        row = self._power.get(tick)
        p = self.noise_mw
        if row is not None:
            for s in range(subch_start, subch_start + l_subch):
                p += row[s]
        return mw_to_dbm(p)

    def rssi_metric(self, csr: Csr) -> float:
        """Mean measured strength over the candidate's slots in each past step period."""
        hist = self._power
        y, s0, l = csr
        total = 0.0
        for k in range(1, self.k_count + 1):
            row = hist.get(y - k * self.step_ticks)
            p = self.noise_mw
            if row is not None:
                for s in range(s0, s0 + l):
                    p += row[s]
            total += p
        return mw_to_dbm(total / self.k_count)


def select_csr(
    store: SensingStore,
    grid_cfg: ResourceGridConfig,
    params: SpsParams,
    tb: TimeBase,
    now: int,
    p_rsvp_tx_ticks: int,
    c_resel: int,
    l_subch: int,
    rng,
    deadline_tick: int | None = None,
) -> SelectionResult:
    """Full autonomous selection at tick `now`: enumerate, exclude, rank, draw."""
    store.prune(now)
    window = selection_window(now, params, tb, deadline_tick)
    pool = build_pssch_pool(window.start, window.end + 1, grid_cfg)
    l1 = enumerate_l1(pool, l_subch, grid_cfg)
    excl = exclude_reserved(l1, store.entries_in_window(now), params, c_resel, p_rsvp_tx_ticks, window, tb)
    pick = rank_and_pick(excl.l2, store.rssi_metric, rng, params)
    return SelectionResult(
        csr=pick.csr,
        window=window,
        m_total=len(l1),
        l2_size=len(excl.l2),
        l3_size=len(pick.l3),
        threshold_dbm=excl.threshold_dbm,
        escalations=excl.escalations,
    )


class Mode3Scheduler:
    """Central allocator: issues grants from an authoritative reservation table.

    Issued grants count as reserved no matter how weak they would measure over
    the air, so no threshold escalation ever readmits them.  Grant occurrences
    are tracked tick-exactly (including sync deferrals), which makes overlap
    between two issued grants impossible by construction.  Among feasible
    placements the least-loaded subframe wins, then the earliest.
    """

    def __init__(self, grid_cfg: ResourceGridConfig, params: SpsParams, tb: TimeBase, rng):
        self.grid_cfg = grid_cfg
        self.params = params
        self.tb = tb
        self.rng = rng
        self.step_ticks = params.p_step_ms * tb.ticks_per_ms
        self._occupancy: dict[int, list[tuple[int, int, int]]] = {}   # tick -> [(s0, l, owner)]
        self._grants: dict[tuple[int, int], tuple[Grant, list[int]]] = {}
        self._grant_seq = 0

    def active_grants(self) -> list[Grant]:
        return [g for g, _ in self._grants.values()]

    def request(
        self,
        owner: int,
        kind: int,
        l_subch: int,
        period_ticks: int,
        now: int,
        deadline_tick: int | None = None,
        c_resel_override: int | None = None,
    ) -> Grant | None:
        """Allocate one grant; None when every placement conflicts with the table."""
        self.release(owner, kind)
        try:
            window = selection_window(now, self.params, self.tb, deadline_tick)
            pool = build_pssch_pool(window.start, window.end + 1, self.grid_cfg)
        except EmptySelectionWindowError:
            return None
        c_resel = c_resel_override if c_resel_override is not None else draw_c_resel(self.rng, self.params)
        occupancy = self._occupancy
        grid = self.grid_cfg
        n_starts = grid.n_subch - l_subch + 1
        if n_starts <= 0:
            return None

        best = None
        for y in pool:
            occs = [occurrence_tick(y, i, period_ticks, grid) for i in range(c_resel)]
            taken: list[tuple[int, int]] = []
            own_conflict = False
            load = 0
            for t in occs:
                row = occupancy.get(t)
                if row:
                    load += len(row)
                    for s0, l, o in row:
                        if o == owner:
                            own_conflict = True
                            break
                        taken.append((s0, l))
                if own_conflict:
                    break
            if own_conflict:
                continue
            for s0 in range(n_starts):
                if any(subch_overlap(s0, l_subch, ts0, tl) for ts0, tl in taken):
                    continue
                # For fixed y the first feasible start already minimizes the key.
                key = (load, y, s0)
                if best is None or key < best:
                    best = key
                break
            if best is not None and best[0] == 0:
                # A zero-load subframe cannot be beaten by any later one.
                break
        if best is None:
            return None
        _, y, s0 = best
        self._grant_seq += 1
        grant = Grant(
            csr=Csr(y, s0, l_subch),
            period_ticks=period_ticks,
            c_resel=c_resel,
            mode=SlMode.MODE3,
            owner=owner,
            kind=kind,
            reservation_ms=int(period_ticks // self.tb.ticks_per_ms),
            grant_id=self._grant_seq,
            initial_c_resel=c_resel,
        )
        occs = [occurrence_tick(y, i, period_ticks, grid) for i in range(c_resel)]
        for t in occs:
            occupancy.setdefault(t, []).append((s0, l_subch, owner))
        self._grants[(owner, kind)] = (grant, occs)
        return grant

    def release(self, owner: int, kind: int | None = None) -> None:
        keys = [k for k in self._grants if k[0] == owner and (kind is None or k[1] == kind)]
        for key in keys:
            grant, occs = self._grants.pop(key)
            for t in occs:
                row = self._occupancy.get(t)
                if row is None:
                    continue
                row.remove((grant.csr.subch_start, grant.csr.l_subch, owner))
                if not row:
                    del self._occupancy[t]

    def on_transmission(self, grant: Grant) -> bool:
        """Decrement the counter; a spent grant leaves the table."""
        spent = on_transmission(grant)
        if spent:
            self.release(grant.owner, grant.kind)
        return spent
