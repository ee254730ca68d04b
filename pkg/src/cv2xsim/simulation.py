"""Full scenario simulation: nodes, event wiring, per-subframe delivery, run lifecycle.

One Simulation owns one engine, one world and one ledger.  Vehicles carry
their control-plane context, user-plane queues, sensing state and grants;
base stations carry the central scheduler and the infrastructure link server.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from . import sps as sps_mod
from .apps import AlertSource, CamService, forward_alert
from .channel import (ChannelConfig, Delivery, LinkEnv, RxOutcome, Transmission,
                      dbm_to_mw, deliver_subframe, rsrp_dbm)
from .config import ModePolicy, ScenarioConfig
from .engine import Engine, rng_stream
from .errors import EmptySelectionWindowError, InvariantError, OversizedTbError
from .grid import Csr, is_slss_subframe, tb_prbs_required
from .metrics import (GrantRecord, Iface, MetricsLedger, MODE_NONE, SwitchRecord,
                      Terminal, write_outputs)
from .mobility import RegionKind, Role, World
from .rrc import (CellSite, RrcConfig, RrcContext, RrcEvent, RrcState, SystemInfo,
                  begin_attach, cell_search, step_fsm)
from .sps import (Grant, Mode3Scheduler, SensingStore, SlMode, draw_c_resel,
                  occurrence_tick, select_csr)
from .stack import BROADCAST, MacSdu, MessageKind, UserPlane, V2xMessage

SYSTEM = -1


@dataclass
class UuTransfer:
    occ_id: int
    msg: V2xMessage
    ue: int
    cell: int
    remaining_ttis: int


class VehicleNode:
    __slots__ = ("vid", "role", "rrc", "plane", "sensing", "cam", "grants",
                 "tx_tick", "hs_token", "inact_token", "switch_decided")

    def __init__(self, vid: int, role: Role, plane: UserPlane,
                 sensing: SensingStore, cam: CamService):
        self.vid = vid
        self.role = role
        self.rrc = RrcContext()
        self.plane = plane
        self.sensing = sensing
        self.cam = cam
        self.grants: dict[MessageKind, Grant] = {}
        self.tx_tick = -1
        self.hs_token = 0
        self.inact_token = 0
        self.switch_decided = 0


class EnodebNode:
    __slots__ = ("nid", "position_m", "region_idx", "coverage_radius_m",
                 "scheduler", "uu_queue", "uu_busy")

    def __init__(self, nid: int, position_m: float, region_idx: int,
                 coverage_radius_m: float, scheduler: Mode3Scheduler):
        self.nid = nid
        self.position_m = position_m
        self.region_idx = region_idx
        self.coverage_radius_m = coverage_radius_m
        self.scheduler = scheduler
        self.uu_queue: deque[UuTransfer] = deque()
        self.uu_busy = False


class Simulation:
    """Builds a scenario and runs it to completion; see run()."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.tb = cfg.time_base()
        self.engine = Engine(self.tb)
        self.grid = cfg.grid_config()
        self.chan = cfg.channel_config()
        self.sps_params = cfg.sps_params()
        self.rrc_cfg = cfg.rrc_config()
        self.stack_cfg = cfg.stack_config()
        self.cam_cfg = cfg.cam_config()
        self.alert_cfg = cfg.alert_config()
        self.policy = cfg.policy()
        self.layout = cfg.layout()
        self.world_cfg = cfg.world_config()
        self.ledger = MetricsLedger()

        self.world = World(self.layout, self.world_cfg,
                           rng_of=lambda vid: self._rng(f"v{vid}/mobility"))
        self.world.populate()

        self.vehicles: list[VehicleNode] = []
        for v in self.world.vehicles:
            node = VehicleNode(
                vid=v.vid,
                role=v.role,
                plane=UserPlane(self.stack_cfg, v.vid),
                sensing=SensingStore(self.grid.n_subch, self.chan.noise_dbm,
                                     self.sps_params, self.tb),
                cam=CamService(v.vid, self.cam_cfg, self.tb, self._rng(f"v{v.vid}/cam")),
            )
            self.vehicles.append(node)
            self.engine.register(v.vid, self._on_vehicle_event)

        self.enodebs: dict[int, EnodebNode] = {}
        self.cells: list[CellSite] = []
        next_id = len(self.vehicles)
        for region_idx, region in self.layout.covered_regions():
            center = self.layout.starts[region_idx] + region.length_m / 2.0
            enb = EnodebNode(
                nid=next_id, position_m=center, region_idx=region_idx,
                coverage_radius_m=region.length_m / 2.0,
                scheduler=Mode3Scheduler(self.grid, self.sps_params, self.tb,
                                         self._rng(f"enb{next_id}/sps")),
            )
            self.enodebs[next_id] = enb
            self.cells.append(CellSite(next_id, center, enb.coverage_radius_m))
            self.engine.register(next_id, self._on_enb_event)
            next_id += 1
        self.rsu_id = next_id
        self.alert_source = AlertSource(self.alert_cfg, self.tb, self._rng("rsu/alert"))

        self.engine.register(SYSTEM, self._on_system_event)
        self.head_id = 0
        self.focus_ids = (list(self.world.platoon_ids) if cfg.metrics.focus == "platoon"
                          else [v.vid for v in self.world.vehicles])
        self._focus_set = set(self.focus_ids)
        self.duration_ticks = self.tb.ticks(cfg.duration_s * 1000.0)
        self.mobility_dt_ticks = self.tb.ticks(self.world_cfg.mobility_step_ms)
        self.search_period_ticks = self.tb.ticks(self.rrc_cfg.cell_search_period_ms)
        self.cam_grant_l_subch = tb_prbs_required(
            self.cam_cfg.size_max_bytes, self.grid, self.stack_cfg.non_ip_overhead).l_subch

        self._trace_seq = 0
        self._grant_seq = 0
        self._tick_txs: dict[int, list[Transmission]] = {}
        self._occ_sl: dict[int, int] = {}      # trace -> sidelink occurrence
        self._open_uu: dict[int, UuTransfer] = {}
        self._started = False
        self._sps_rngs = [self._rng(f"v{v.vid}/sps") for v in self.vehicles]

        self._env = LinkEnv(self.chan, self.world.distance, self._rx_params)

    # --- small helpers ------------------------------------------------------

    def _rng(self, stream_id: str):
        return rng_stream(self.cfg.seed, stream_id)

    def _rx_params(self, vid: int) -> tuple[float, float]:
        kind = self.layout.regions[self.world.vehicles[vid].region_idx].kind
        return self.cfg.region_channel_params(kind)

    def _next_trace(self) -> int:
        self._trace_seq += 1
        return self._trace_seq

    def _next_grant_id(self) -> int:
        self._grant_seq += 1
        return self._grant_seq

    @property
    def now(self) -> int:
        return self.engine.now

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for node in self.vehicles:
            self.engine.schedule(node.cam.first_tick(), node.vid, "cam")
        self.engine.schedule(self.mobility_dt_ticks, SYSTEM, "mob")
        if self.policy != ModePolicy.MODE4_ONLY and self.cells:
            self.engine.schedule(0, SYSTEM, "search")
        if self.alert_source.active:
            self.engine.schedule(self.alert_source.next_gap_ticks(), SYSTEM, "alert")

    def run(self) -> dict:
        """Run to the configured duration and return the summary dictionary."""
        self.start()
        run = self.engine.run_until(self.duration_ticks)
        self._finalize_pending()
        self.ledger.verify()
        return self._build_summary(run)

    # --- event dispatch ------------------------------------------------------

    def _on_vehicle_event(self, ev) -> None:
        node = self.vehicles[ev.target]
        kind = ev.kind
        if kind == "tx":
            self._on_tx(node, *ev.payload)
        elif kind == "cam":
            self._on_cam(node)
        elif kind == "hs":
            self._on_handshake_complete(node, ev.payload)
        elif kind == "inact":
            self._on_inactivity(node, ev.payload)
        elif kind == "slav":
            self._on_sidelink_available(node, ev.payload)
        else:
            raise InvariantError(f"unknown vehicle event {kind!r}")

    def _on_enb_event(self, ev) -> None:
        enb = self.enodebs[ev.target]
        if ev.kind == "uu":
            self._on_uu_service(enb)
        elif ev.kind == "uud":
            self._on_uu_delivery(enb, ev.payload)
        else:
            raise InvariantError(f"unknown enb event {ev.kind!r}")

    def _on_system_event(self, ev) -> None:
        kind = ev.kind
        if kind == "resolve":
            self._on_resolve()
        elif kind == "mob":
            self.world.step(self.mobility_dt_ticks / (1000.0 * self.tb.ticks_per_ms))
            self.engine.schedule_in(self.mobility_dt_ticks, SYSTEM, "mob")
        elif kind == "search":
            self._on_cell_search()
            self.engine.schedule_in(self.search_period_ticks, SYSTEM, "search")
        elif kind == "alert":
            self._on_alert_arrival()
        else:
            raise InvariantError(f"unknown system event {kind!r}")

    # --- message generation ----------------------------------------------------

    def _on_cam(self, node: VehicleNode) -> None:
        now = self.now
        msg = node.cam.make(now, self._next_trace())
        self._occ_sl[msg.trace_id] = self.ledger.on_generated(
            msg.trace_id, MessageKind.CAM, Iface.SL, node.vid, now, msg.deadline)
        node.plane.enqueue(msg)
        self._ensure_grant(node, MessageKind.CAM)
        self.engine.schedule_in(node.cam.period_ticks, node.vid, "cam")

    def _on_alert_arrival(self) -> None:
        now = self.now
        msg = self.alert_source.make(now, self._next_trace(), self.rsu_id, self.head_id)
        occ_uu = self.ledger.on_generated(
            msg.trace_id, MessageKind.ALERT, Iface.UU, self.rsu_id, now, msg.deadline)
        head = self.vehicles[self.head_id]
        ctx = head.rrc
        if ctx.serving_cell is not None and ctx.state != RrcState.IDLE:
            self._rrc_traffic(head)
            enb = self.enodebs[ctx.serving_cell]
            ttis = math.ceil(msg.payload_bytes / self.stack_cfg.uu_capacity_bytes_per_tti)
            transfer = UuTransfer(occ_uu, msg, self.head_id, enb.nid, ttis)
            self._open_uu[occ_uu] = transfer
            enb.uu_queue.append(transfer)
            if not enb.uu_busy:
                enb.uu_busy = True
                self.engine.schedule_in(1, enb.nid, "uu")
        else:
            self.ledger.on_terminal_loss(occ_uu, Terminal.NO_COVERAGE)
            self.ledger.set_expected_rx(occ_uu, 1)
            self.ledger.on_rx(occ_uu, self.rsu_id, self.head_id, now,
                              RxOutcome.NO_COVERAGE, True, MODE_NONE, Iface.UU)
        self.engine.schedule_in(self.alert_source.next_gap_ticks(), SYSTEM, "alert")

    # --- infrastructure link ---------------------------------------------------

    def _uu_abort(self, transfer: UuTransfer) -> None:
        self._open_uu.pop(transfer.occ_id, None)
        self.ledger.on_terminal_loss(transfer.occ_id, Terminal.ABORTED)
        self.ledger.set_expected_rx(transfer.occ_id, 1)
        self.ledger.on_rx(transfer.occ_id, self.rsu_id, transfer.ue, self.now,
                          RxOutcome.ABORTED, True, MODE_NONE, Iface.UU)

    def _on_uu_service(self, enb: EnodebNode) -> None:
        queue = enb.uu_queue
        if not queue:
            enb.uu_busy = False
            return
        transfer = queue.popleft()
        ctx = self.vehicles[transfer.ue].rrc
        if ctx.serving_cell != enb.nid or ctx.state == RrcState.IDLE:
            self._uu_abort(transfer)
        else:
            self._rrc_traffic(self.vehicles[transfer.ue])
            transfer.remaining_ttis -= 1
            if transfer.remaining_ttis <= 0:
                self.engine.schedule_in(self.stack_cfg.uu_processing_ttis, enb.nid, "uud", transfer)
            else:
                queue.append(transfer)   # round-robin: back of the line
        if queue:
            self.engine.schedule_in(1, enb.nid, "uu")
        else:
            enb.uu_busy = False

    def _on_uu_delivery(self, enb: EnodebNode, transfer: UuTransfer) -> None:
        now = self.now
        ctx = self.vehicles[transfer.ue].rrc
        self._open_uu.pop(transfer.occ_id, None)
        if ctx.serving_cell != enb.nid or ctx.state == RrcState.IDLE:
            self.ledger.on_terminal_loss(transfer.occ_id, Terminal.ABORTED)
            self.ledger.set_expected_rx(transfer.occ_id, 1)
            self.ledger.on_rx(transfer.occ_id, self.rsu_id, transfer.ue, now,
                              RxOutcome.ABORTED, True, MODE_NONE, Iface.UU)
            return
        self._rrc_traffic(self.vehicles[transfer.ue])
        self.ledger.on_tx(transfer.occ_id, now, self.rsu_id, MODE_NONE, Iface.UU, -1, 0)
        self.ledger.set_expected_rx(transfer.occ_id, 1)
        self.ledger.on_rx(transfer.occ_id, self.rsu_id, transfer.ue, now,
                          RxOutcome.RECEIVED, True, MODE_NONE, Iface.UU)
        # Relay onto the sidelink with the original trace and deadline.
        head = self.vehicles[transfer.ue]
        fwd = forward_alert(transfer.msg, head.vid)
        if fwd.deadline <= now:
            occ_sl = self.ledger.on_generated(fwd.trace_id, MessageKind.ALERT, Iface.SL,
                                              head.vid, fwd.created_at, fwd.deadline)
            self._occ_sl[fwd.trace_id] = occ_sl
            self._pretx_loss(head, occ_sl, Terminal.EXPIRED)
            return
        occ_sl = self.ledger.on_generated(fwd.trace_id, MessageKind.ALERT, Iface.SL,
                                          head.vid, fwd.created_at, fwd.deadline)
        self._occ_sl[fwd.trace_id] = occ_sl
        head.plane.enqueue(fwd)
        self._ensure_grant(head, MessageKind.ALERT)

    # --- grants ------------------------------------------------------------------

    def _grant_l_subch(self, kind: MessageKind, head: MacSdu) -> int:
        if kind == MessageKind.CAM:
            return self.cam_grant_l_subch
        return tb_prbs_required(head.msg.payload_bytes, self.grid,
                                self.stack_cfg.non_ip_overhead).l_subch

    def _grant_mode(self, node: VehicleNode) -> SlMode | None:
        """Which allocation path this node may use right now, or None to wait."""
        if self.policy == ModePolicy.MODE3_ONLY:
            return SlMode.MODE3 if node.rrc.state != RrcState.IDLE else None
        if self.policy == ModePolicy.MODE4_ONLY:
            return SlMode.MODE4
        return node.rrc.mode

    def _ensure_grant(self, node: VehicleNode, kind: MessageKind) -> None:
        if kind in node.grants:
            return
        now = self.now
        queue = node.plane.queues[kind]
        while queue:
            self._drop_expired(node)
            if not queue:
                return
            if not node.rrc.sidelink_ready(now):
                return
            mode = self._grant_mode(node)
            if mode is None:
                return
            head = queue[0]
            try:
                l_subch = self._grant_l_subch(kind, head)
            except OversizedTbError:
                queue.popleft()
                self._pretx_loss(node, self._occ_sl[head.msg.trace_id], Terminal.OVERSIZED)
                continue
            period_ticks = (node.cam.period_ticks if kind == MessageKind.CAM
                            else self.sps_params.p_step_ms * self.tb.ticks_per_ms)
            grant = None
            if mode == SlMode.MODE4:
                rng = self._sps_rngs[node.vid]
                c_resel = draw_c_resel(rng, self.sps_params) if kind == MessageKind.CAM else 1
                try:
                    res = select_csr(node.sensing, self.grid, self.sps_params, self.tb, now,
                                     period_ticks, c_resel, l_subch, rng,
                                     deadline_tick=head.msg.deadline)
                except EmptySelectionWindowError:
                    res = None
                if res is not None:
                    self.ledger.on_escalations(now, node.vid, res.escalations)
                    grant = Grant(
                        csr=res.csr, period_ticks=period_ticks, c_resel=c_resel,
                        mode=SlMode.MODE4, owner=node.vid, kind=int(kind),
                        reservation_ms=(node.cam.period_ticks // self.tb.ticks_per_ms
                                        if kind == MessageKind.CAM else 0),
                        grant_id=self._next_grant_id(), initial_c_resel=c_resel,
                    )
            else:
                self._rrc_traffic(node)
                enb = self.enodebs[node.rrc.serving_cell]
                c_resel = None if kind == MessageKind.CAM else 1
                grant = enb.scheduler.request(node.vid, int(kind), l_subch, period_ticks,
                                              now, deadline_tick=head.msg.deadline,
                                              c_resel_override=c_resel)
                if grant is not None:
                    grant.grant_id = self._next_grant_id()
            if grant is None:
                queue.popleft()
                self._pretx_loss(node, self._occ_sl[head.msg.trace_id], Terminal.DENIED)
                continue
            node.grants[kind] = grant
            self.ledger.on_grant(GrantRecord(now, node.vid, int(grant.mode), int(kind),
                                             grant.csr.subframe, grant.csr.subch_start,
                                             grant.csr.l_subch, grant.period_ticks,
                                             grant.c_resel))
            self.engine.schedule(grant.csr.subframe, node.vid, "tx", (kind, grant.grant_id))
            grant.occ_index = 1
            return

    def _drop_grants(self, node: VehicleNode, release_mode3: bool = True) -> None:
        for kind, grant in list(node.grants.items()):
            if release_mode3 and grant.mode == SlMode.MODE3 and node.rrc.serving_cell in self.enodebs:
                self.enodebs[node.rrc.serving_cell].scheduler.release(node.vid, int(kind))
        node.grants.clear()

    # --- transmission ----------------------------------------------------------

    def _on_tx(self, node: VehicleNode, kind: MessageKind, grant_id: int) -> None:
        grant = node.grants.get(kind)
        if grant is None or grant.grant_id != grant_id:
            return   # grant was dropped or replaced; stale occurrence
        now = self.now
        self._drop_expired(node)
        queue = node.plane.queues[kind]

        # An urgent one-shot landing on the same subframe wins the radio;
        # the periodic message skips this occurrence (and usually expires).
        if kind == MessageKind.CAM:
            alert = node.grants.get(MessageKind.ALERT)
            if (alert is not None and node.plane.queues[MessageKind.ALERT]
                    and occurrence_tick(alert.csr.subframe, 0, alert.period_ticks, self.grid) == now):
                self._schedule_next_occurrence(node, kind, grant)
                return

        def fits(sdu: MacSdu) -> bool:
            try:
                need = tb_prbs_required(sdu.msg.payload_bytes, self.grid,
                                        self.stack_cfg.non_ip_overhead).l_subch
            except OversizedTbError:
                return False
            return need <= grant.csr.l_subch

        sdu = node.plane.head_for_grant(kind, fits)
        if sdu is None:
            if queue:
                # Head outgrew this grant: re-select sized to the head.
                self._release_grant(node, kind, grant)
                self._ensure_grant(node, kind)
            elif kind == MessageKind.ALERT:
                self._release_grant(node, kind, grant)   # one-shot done
            else:
                self._schedule_next_occurrence(node, kind, grant)
            return

        if node.tx_tick == now:
            raise InvariantError(f"vehicle {node.vid} would transmit twice in subframe {now}")
        if is_slss_subframe(now, self.grid):
            raise InvariantError(f"transmission scheduled on sync subframe {now}")
        node.tx_tick = now
        node.plane.store_harq_tx(sdu.msg.destination, sdu)
        occ_id = self._occ_sl[sdu.msg.trace_id]
        tx = Transmission(
            sender=node.vid,
            csr=Csr(now, grant.csr.subch_start, grant.csr.l_subch),
            occ_id=occ_id,
            tx_power_dbm=self.chan.tx_power_dbm,
            reservation_ms=grant.reservation_ms,
            mode=int(grant.mode),
            sdu=sdu,
        )
        bucket = self._tick_txs.get(now)
        if bucket is None:
            self._tick_txs[now] = [tx]
            self.engine.schedule(now, SYSTEM, "resolve")
        else:
            bucket.append(tx)
        region_idx = self.world.vehicles[node.vid].region_idx
        self.ledger.on_tx(occ_id, now, node.vid, int(grant.mode), Iface.SL, region_idx, 0)

        if grant.mode == SlMode.MODE3:
            serving = node.rrc.serving_cell
            spent = (self.enodebs[serving].scheduler.on_transmission(grant)
                     if serving in self.enodebs else sps_mod.on_transmission(grant))
        else:
            spent = sps_mod.on_transmission(grant)
        if spent:
            node.grants.pop(kind, None)
        else:
            self._schedule_next_occurrence(node, kind, grant)

    def _schedule_next_occurrence(self, node: VehicleNode, kind: MessageKind, grant: Grant) -> None:
        t = occurrence_tick(grant.csr.subframe, grant.occ_index, grant.period_ticks, self.grid)
        grant.occ_index += 1
        self.engine.schedule(t, node.vid, "tx", (kind, grant.grant_id))

    def _release_grant(self, node: VehicleNode, kind: MessageKind, grant: Grant) -> None:
        if grant.mode == SlMode.MODE3 and node.rrc.serving_cell in self.enodebs:
            self.enodebs[node.rrc.serving_cell].scheduler.release(node.vid, int(kind))
        node.grants.pop(kind, None)

    # --- delivery ------------------------------------------------------------------

    def _on_resolve(self) -> None:
        now = self.now
        txs = self._tick_txs.pop(now)
        sense_sets: dict[int, list[int]] = {}
        receiver_ids: set[int] = set(self._focus_set)
        for tx in txs:
            neighbors = self.world.neighbors_within(tx.sender, self.chan.sensing_range_m)
            sense_sets[tx.sender] = neighbors
            receiver_ids.update(neighbors)
        receivers = sorted(receiver_ids)
        deliveries = deliver_subframe(now, txs, receivers, self._env)

        sense_members = {s: set(n) for s, n in sense_sets.items()}
        expected: dict[int, int] = {tx.occ_id: 0 for tx in txs}
        sensed: list[Delivery] = []
        for d in deliveries:
            if d.outcome != RxOutcome.HALF_DUPLEX and d.receiver in sense_members[d.sender]:
                node = self.vehicles[d.receiver]
                # A busy radio neither decodes nor measures; everything else does.
                node.sensing.note_power(now, 0, 0, 0.0)   # ensure row exists cheaply
                sensed.append(d)
            if d.receiver in self._focus_set and d.sender != d.receiver:
                expected[d.occ_id] += 1
                tx = self._tx_by_occ(txs, d.occ_id)
                self.ledger.on_rx(d.occ_id, d.sender, d.receiver, now, d.outcome,
                                  d.in_range, tx.mode, Iface.SL)
                if d.outcome == RxOutcome.RECEIVED:
                    sdu: MacSdu = tx.sdu
                    self.vehicles[d.receiver].plane.accept(d.sender, sdu.lcid, sdu.seq, sdu)
        # Power first, then control decode, so the recorded aggregate matches the slot.
        tx_by_occ = {tx.occ_id: tx for tx in txs}
        for d in sensed:
            tx = tx_by_occ[d.occ_id]
            self.vehicles[d.receiver].sensing.note_power(
                now, tx.csr.subch_start, tx.csr.l_subch, dbm_to_mw(d.rsrp_dbm))
        for d in sensed:
            tx = tx_by_occ[d.occ_id]
            store = self.vehicles[d.receiver].sensing
            row = store._power.get(now)
            rssi_mw = store.noise_mw
            if row is not None:
                for s in range(tx.csr.subch_start, tx.csr.subch_start + tx.csr.l_subch):
                    rssi_mw += row[s]
            store.note_sci(now, tx.csr.subch_start, tx.csr.l_subch, d.rsrp_dbm,
                           10.0 * math.log10(rssi_mw), tx.reservation_ms)
        for occ_id, n in expected.items():
            self.ledger.set_expected_rx(occ_id, n)

    @staticmethod
    def _tx_by_occ(txs: list[Transmission], occ_id: int) -> Transmission:
        for tx in txs:
            if tx.occ_id == occ_id:
                return tx
        raise InvariantError(f"no transmission for occurrence {occ_id}")

    # --- losses before transmission ---------------------------------------------

    def _drop_expired(self, node: VehicleNode) -> None:
        dropped = node.plane.purge_expired(self.now)
        for sdu in dropped:
            self._pretx_loss(node, self._occ_sl[sdu.msg.trace_id], Terminal.EXPIRED)

    def _pretx_loss(self, node: VehicleNode, occ_id: int, terminal: Terminal) -> None:
        """Resolve a never-transmitted broadcast: one loss row per intended recipient."""
        now = self.now
        self.ledger.on_terminal_loss(occ_id, terminal)
        outcome = {
            Terminal.EXPIRED: RxOutcome.EXPIRED,
            Terminal.DENIED: RxOutcome.DENIED,
            Terminal.OVERSIZED: RxOutcome.OVERSIZED,
        }[terminal]
        mode = int(node.rrc.mode)
        count = 0
        for rx in self.focus_ids:
            if rx == node.vid:
                continue
            _, rx_range = self._rx_params(rx)
            in_range = self.world.distance(node.vid, rx) <= rx_range
            self.ledger.on_rx(occ_id, node.vid, rx, now, outcome, in_range, mode, Iface.SL)
            count += 1
        self.ledger.set_expected_rx(occ_id, count)

    # --- control plane ----------------------------------------------------------

    def _rrc_traffic(self, node: VehicleNode) -> None:
        transition = step_fsm(node.rrc, RrcEvent.TRAFFIC, self.now, self.rrc_cfg, self.tb,
                              sync_period_ticks=self.grid.slss_period_ticks)
        if transition is not None and node.rrc.state == RrcState.CONN:
            self._schedule_inactivity(node)

    def _schedule_inactivity(self, node: VehicleNode) -> None:
        node.inact_token += 1
        self.engine.schedule_in(self.tb.ticks(self.rrc_cfg.inactivity_timeout_ms),
                                node.vid, "inact", node.inact_token)

    def _on_inactivity(self, node: VehicleNode, token: int) -> None:
        if token != node.inact_token or node.rrc.state != RrcState.CONN:
            return
        timeout = self.tb.ticks(self.rrc_cfg.inactivity_timeout_ms)
        idle_for = self.now - node.rrc.last_activity
        if idle_for >= timeout:
            step_fsm(node.rrc, RrcEvent.INACTIVITY_TIMEOUT, self.now, self.rrc_cfg, self.tb,
                     sync_period_ticks=self.grid.slss_period_ticks)
        else:
            node.inact_token += 1
            self.engine.schedule(node.rrc.last_activity + timeout, node.vid,
                                 "inact", node.inact_token)

    def _found_cell(self, node: VehicleNode) -> int | None:
        pos = self.world.vehicles[node.vid].position_m
        exponent, _ = self._rx_params(node.vid)

        def rsrp_of(cell: CellSite, d: float) -> float:
            return rsrp_dbm(self.rrc_cfg.enodeb_tx_power_dbm, d, exponent, self.chan.carrier_ghz)

        return cell_search(pos, self.cells, self.rrc_cfg, rsrp_of,
                           lambda a, b: self.layout.ring_distance(a, b))

    def _on_cell_search(self) -> None:
        now = self.now
        for node in self.vehicles:
            ctx = node.rrc
            found = self._found_cell(node)
            if ctx.state != RrcState.IDLE:
                if found == ctx.serving_cell:
                    continue
                # Out of the serving cell's reach (or into another's): detach.
                serving = ctx.serving_cell
                self._drop_grants(node)
                if serving in self.enodebs:
                    self.enodebs[serving].scheduler.release(node.vid)
                step_fsm(ctx, RrcEvent.COVERAGE_LOST, now, self.rrc_cfg, self.tb,
                         sync_period_ticks=self.grid.slss_period_ticks)
                node.switch_decided = now
                self.engine.schedule(ctx.mode4_usable_from, node.vid, "slav",
                                     ctx.mode4_usable_from)
            if ctx.state == RrcState.IDLE:
                if ctx.pending_attach is not None:
                    if found != ctx.pending_attach[0]:
                        step_fsm(ctx, RrcEvent.HANDSHAKE_ABORTED, now, self.rrc_cfg, self.tb)
                        self.ledger.on_switch(SwitchRecord(node.vid, int(SlMode.MODE4),
                                                           int(SlMode.MODE3),
                                                           node.switch_decided, None))
                    continue
                if found is not None and self.policy != ModePolicy.MODE4_ONLY:
                    self._drop_grants(node, release_mode3=False)
                    complete_at = begin_attach(ctx, found, now, self.tb, self.rrc_cfg)
                    node.switch_decided = now
                    node.hs_token += 1
                    self.engine.schedule(complete_at, node.vid, "hs", node.hs_token)

    def _on_handshake_complete(self, node: VehicleNode, token: int) -> None:
        ctx = node.rrc
        if token != node.hs_token or ctx.pending_attach is None:
            return
        cell_id = ctx.pending_attach[0]
        if self._found_cell(node) != cell_id:
            step_fsm(ctx, RrcEvent.HANDSHAKE_ABORTED, self.now, self.rrc_cfg, self.tb)
            self.ledger.on_switch(SwitchRecord(node.vid, int(SlMode.MODE4),
                                               int(SlMode.MODE3), node.switch_decided, None))
            return
        si = SystemInfo(cell_id, self.grid, self.grid.slss_period_ticks)
        step_fsm(ctx, RrcEvent.HANDSHAKE_COMPLETE, self.now, self.rrc_cfg, self.tb, si=si,
                 sync_period_ticks=self.grid.slss_period_ticks)
        self.ledger.on_switch(SwitchRecord(node.vid, int(SlMode.MODE4), int(SlMode.MODE3),
                                           node.switch_decided, self.now))
        self._schedule_inactivity(node)
        for kind in (MessageKind.ALERT, MessageKind.CAM):
            if node.plane.queues[kind]:
                self._ensure_grant(node, kind)

    def _on_sidelink_available(self, node: VehicleNode, expected_tick: int) -> None:
        ctx = node.rrc
        if ctx.state != RrcState.IDLE or ctx.mode4_usable_from != expected_tick:
            return
        if ctx.pending_mode4_at == expected_tick:
            ctx.pending_mode4_at = None
            self.ledger.on_switch(SwitchRecord(node.vid, int(SlMode.MODE3), int(SlMode.MODE4),
                                               node.switch_decided, self.now))
        for kind in (MessageKind.ALERT, MessageKind.CAM):
            if node.plane.queues[kind]:
                self._ensure_grant(node, kind)

    # --- finalization ---------------------------------------------------------------

    def _finalize_pending(self) -> None:
        for node in self.vehicles:
            self._drop_expired(node)
            for queue in node.plane.queues.values():
                while queue:
                    sdu = queue.popleft()
                    occ = self._occ_sl[sdu.msg.trace_id]
                    self.ledger.on_terminal_loss(occ, Terminal.PENDING)
        for transfer in list(self._open_uu.values()):
            self.ledger.on_terminal_loss(transfer.occ_id, Terminal.PENDING)
        self._open_uu.clear()

    def _normalized_load(self) -> float:
        mean_cam = (self.cam_cfg.size_min_bytes + self.cam_cfg.size_max_bytes) / 2.0
        offered = len(self.vehicles) * self.cam_cfg.rate_hz * mean_cam
        if self.alert_source.active:
            mean_alert = (self.alert_cfg.size_min_bytes + self.alert_cfg.size_max_bytes) / 2.0
            offered += self.alert_cfg.rate_hz * mean_alert
        ticks_per_s = 1000.0 * self.tb.ticks_per_ms
        pool_fraction = 1.0 - 1.0 / self.grid.slss_period_ticks
        capacity = ticks_per_s * pool_fraction * self.grid.n_subch * self.grid.subch_size \
            * self.grid.bytes_per_prb
        return offered / capacity

    def _latency_ms(self, kind: int | None, mode: int | None) -> dict | None:
        stats = self.ledger.latency_summary_ticks(kind=kind, mode=mode)
        if stats is None:
            return None
        tpm = self.tb.ticks_per_ms
        return {
            "n": stats["n"],
            "mean": round(stats["mean"] / tpm, 6),
            "p50": round(stats["p50"] / tpm, 6),
            "p95": round(stats["p95"] / tpm, 6),
            "max": round(stats["max"] / tpm, 6),
        }

    def _build_summary(self, run) -> dict:
        ledger = self.ledger
        tpm = self.tb.ticks_per_ms

        def rounded(x):
            return None if x is None else round(x, 6)

        switch_means = ledger.switch_latency_means_ticks()
        esc = [e for _, _, e in ledger.escalation_log]
        p_r_overall = ledger.p_r()
        summary = {
            "schema_version": 1,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "mode_policy": self.cfg.mode_policy,
            "duration_s": self.cfg.duration_s,
            "numerology_mu": self.cfg.numerology_mu,
            "normalized_load": round(self._normalized_load(), 6),
            "dispatch": {"events": run.events_dispatched, "sha256": run.dispatch_sha256},
            "counts": {
                "occurrences": len(ledger.occ_trace),
                "transmissions": len(ledger.tx_records),
                "reception_records": len(ledger.rx_records),
                "grants_issued": len(ledger.grant_records),
            },
            "attribution": ledger.attribution_counts(),
            "rx_outcomes": ledger.rx_outcome_counts(),
            "p_r": {
                "overall": rounded(p_r_overall),
                "mode3": rounded(ledger.p_r(mode=int(SlMode.MODE3))),
                "mode4": rounded(ledger.p_r(mode=int(SlMode.MODE4))),
                "switching": rounded(p_r_overall) if self.policy == ModePolicy.SWITCHING else None,
                "cam": rounded(ledger.p_r(kind=int(MessageKind.CAM))),
                "alert": rounded(ledger.p_r(kind=int(MessageKind.ALERT))),
            },
            "cam_reached_fraction": rounded(ledger.cam_reached_fraction()),
            "latency_ms": {
                "cam": self._latency_ms(int(MessageKind.CAM), None),
                "alert": self._latency_ms(int(MessageKind.ALERT), None),
            },
            "latency_by_mode_ms": {
                "mode3": {
                    "cam": self._latency_ms(int(MessageKind.CAM), int(SlMode.MODE3)),
                    "alert": self._latency_ms(int(MessageKind.ALERT), int(SlMode.MODE3)),
                },
                "mode4": {
                    "cam": self._latency_ms(int(MessageKind.CAM), int(SlMode.MODE4)),
                    "alert": self._latency_ms(int(MessageKind.ALERT), int(SlMode.MODE4)),
                },
            },
            "mode_switches": {
                "completed": sum(1 for s in ledger.switch_records if s.complete_tick is not None),
                "aborted": sum(1 for s in ledger.switch_records if s.complete_tick is None),
                "mean_latency_ms": {
                    "mode4_to_mode3": rounded(None if switch_means["mode4_to_mode3"] is None
                                              else switch_means["mode4_to_mode3"] / tpm),
                    "mode3_to_mode4": rounded(None if switch_means["mode3_to_mode4"] is None
                                              else switch_means["mode3_to_mode4"] / tpm),
                },
            },
            "escalations": {
                "selections": len(esc),
                "with_escalation": sum(1 for e in esc if e > 0),
                "total": sum(esc),
                "max": max(esc) if esc else 0,
            },
        }
        return summary

    def write_outputs(self, out_dir: str) -> dict[str, str]:
        if not hasattr(self, "_summary_cache"):
            raise InvariantError("run() must complete before writing outputs")
        window = self.tb.ticks(self.cfg.metrics.timeseries_window_ms)
        return write_outputs(out_dir, self._summary_cache,
                             self.ledger.timeseries_rows(window, self.tb.ticks_per_ms),
                             self.ledger.attribution_rows())


def run_scenario(cfg: ScenarioConfig, out_dir: str | None = None) -> dict:
    """Convenience wrapper: build, run, optionally write outputs; returns the summary."""
    sim = Simulation(cfg)
    summary = sim.run()
    sim._summary_cache = summary
    if out_dir is not None:
        sim.write_outputs(out_dir)
    return summary
