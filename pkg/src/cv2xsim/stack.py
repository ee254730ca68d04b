"""User plane: dual IP/non-IP ingress, unacknowledged pass-through, MAC queues and buffers.

One message is one transport block; there is no segmentation, so grants are
sized per message kind and an oversized payload is rejected at the grid.
Broadcast gets no acknowledgement or retransmission: the buffers exist for
flow bookkeeping and bounded memory, not for recovery.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

from .errors import ConnectionRefused, InvariantError


class MessageKind(IntEnum):
    CAM = 0
    ALERT = 1


class Pipeline(IntEnum):
    NON_IP = 0
    IP = 1


BROADCAST = -1


@dataclass(frozen=True, slots=True)
class V2xMessage:
    """Application payload moving through the stack; the trace id survives relaying."""

    trace_id: int
    kind: MessageKind
    pipeline: Pipeline
    payload_bytes: int
    created_at: int
    source: int
    destination: int = BROADCAST   # node id, or BROADCAST
    deadline: int = 0

    def __post_init__(self):
        if self.kind == MessageKind.CAM and (self.pipeline != Pipeline.NON_IP or self.destination != BROADCAST):
            raise InvariantError("periodic status messages are non-IP broadcast by definition")
        if self.payload_bytes < 1:
            raise InvariantError("payload must be at least one byte")


@dataclass(frozen=True)
class StackConfig:
    pdcp_header_bytes: int = 2
    rohc_bytes: int = 4            # compressed stand-in for the 40-byte IP/UDP header
    ip_header_bytes: int = 40
    rlc_um_header_bytes: int = 1
    mac_header_bytes: int = 2
    lcid_space: int = 32           # 2^5 logical channels per vehicle
    harq_processes: int = 8
    uu_capacity_bytes_per_tti: int = 1000
    uu_processing_ttis: int = 4

    def validate(self) -> None:
        from .errors import ConfigError

        if self.lcid_space < 1 or self.harq_processes < 1:
            raise ConfigError("stack.lcid_space and stack.harq_processes must be >= 1")
        if self.uu_capacity_bytes_per_tti < 1:
            raise ConfigError("stack.uu_capacity_bytes_per_tti must be >= 1")

    @property
    def non_ip_overhead(self) -> int:
        return self.pdcp_header_bytes + self.rlc_um_header_bytes + self.mac_header_bytes

    @property
    def ip_overhead(self) -> int:
        return self.pdcp_header_bytes + self.rohc_bytes + self.rlc_um_header_bytes + self.mac_header_bytes


class Pdu(NamedTuple):
    lcid: int
    size_bytes: int
    msg: V2xMessage


class MacSdu(NamedTuple):
    lcid: int
    size_bytes: int
    seq: int
    msg: V2xMessage


class ConnectionTable:
    """Maps a vehicle's logical flows to channel identifiers."""

    def __init__(self, lcid_space: int):
        self.lcid_space = lcid_space
        self._by_flow: dict[tuple, int] = {}

    def lcid_for(self, pipeline: Pipeline, kind: MessageKind, destination: int) -> int:
        key = (pipeline, kind, destination)
        lcid = self._by_flow.get(key)
        if lcid is None:
            if len(self._by_flow) >= self.lcid_space:
                raise ConnectionRefused(f"all {self.lcid_space} channel identifiers in use")
            lcid = len(self._by_flow)
            self._by_flow[key] = lcid
        return lcid

    def __len__(self) -> int:
        return len(self._by_flow)


@dataclass
class UserPlane:
    """Per-vehicle transmit path plus receive-side duplicate filtering."""

    cfg: StackConfig
    owner: int
    table: ConnectionTable = field(init=False)
    queues: dict[MessageKind, deque] = field(init=False)
    harq_tx: OrderedDict = field(init=False)
    harq_rx: OrderedDict = field(init=False)
    _tx_seq: dict[int, int] = field(init=False)
    _rx_seen: dict[tuple[int, int], set] = field(init=False)
    expired_count: int = field(init=False, default=0)

    def __post_init__(self):
        self.table = ConnectionTable(self.cfg.lcid_space)
        self.queues = {MessageKind.CAM: deque(), MessageKind.ALERT: deque()}
        self.harq_tx = OrderedDict()
        self.harq_rx = OrderedDict()
        self._tx_seq = {}
        self._rx_seen = {}

    # --- transmit path -------------------------------------------------

    def pdcp_ingress(self, msg: V2xMessage) -> Pdu:
        """Attach the channel id and compress headers; IP keeps only the ROHC stub."""
        lcid = self.table.lcid_for(msg.pipeline, msg.kind, msg.destination)
        size = msg.payload_bytes + self.cfg.pdcp_header_bytes
        if msg.pipeline == Pipeline.IP:
            size += self.cfg.rohc_bytes
        return Pdu(lcid, size, msg)

    def rlc_um_deliver(self, pdu: Pdu) -> MacSdu:
        """Unacknowledged pass-through: one header byte and a running sequence number."""
        seq = self._tx_seq.get(pdu.lcid, 0)
        self._tx_seq[pdu.lcid] = seq + 1
        return MacSdu(pdu.lcid, pdu.size_bytes + self.cfg.rlc_um_header_bytes, seq, pdu.msg)

    def enqueue(self, msg: V2xMessage) -> MacSdu:
        sdu = self.rlc_um_deliver(self.pdcp_ingress(msg))
        self.queues[msg.kind].append(sdu)
        return sdu

    def purge_expired(self, now: int) -> list[MacSdu]:
        """Drop queued units past their deadline; callers attribute the losses."""
        dropped = []
        for q in self.queues.values():
            kept = deque()
            while q:
                sdu = q.popleft()
                if sdu.msg.deadline < now:
                    dropped.append(sdu)
                else:
                    kept.append(sdu)
            q.extend(kept)
        self.expired_count += len(dropped)
        return dropped

    def head_for_grant(self, grant_kind: MessageKind, fits) -> MacSdu | None:
        """Pick what this grant occurrence carries: urgent messages outrank periodic ones.

        `fits(sdu)` checks the grant's capacity.  Returns None when nothing
        eligible fits (the caller may then re-size the grant for the head).
        """
        alert_q = self.queues[MessageKind.ALERT]
        if alert_q and fits(alert_q[0]):
            return alert_q.popleft()
        if grant_kind == MessageKind.CAM:
            cam_q = self.queues[MessageKind.CAM]
            if cam_q and fits(cam_q[0]):
                return cam_q.popleft()
        return None

    def mac_pdu_bytes(self, sdu: MacSdu) -> int:
        return sdu.size_bytes + self.cfg.mac_header_bytes

    def store_harq_tx(self, destination: int, sdu: MacSdu) -> None:
        self.harq_tx[destination] = sdu
        while len(self.harq_tx) > self.cfg.harq_processes:
            self.harq_tx.popitem(last=False)

    # --- receive path ---------------------------------------------------

    def accept(self, sender: int, lcid: int, seq: int, sdu: MacSdu) -> bool:
        """Duplicate filter per (sender, channel); out-of-order units pass through."""
        seen = self._rx_seen.setdefault((sender, lcid), set())
        if seq in seen:
            return False
        seen.add(seq)
        if len(seen) > 1024:   # broadcast never retransmits, keep the window bounded
            seen.clear()
            seen.add(seq)
        self.harq_rx[sender] = sdu
        while len(self.harq_rx) > self.cfg.harq_processes:
            self.harq_rx.popitem(last=False)
        return True
