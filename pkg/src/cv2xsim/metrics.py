"""Ledger of every generation, transmission and reception outcome, and derived metrics.

Reception probability is receptions over in-range intended-recipient
opportunities; latency is reception tick minus creation tick (creation at the
infrastructure for relayed alerts).  The ledger keeps raw per-pair records so
trend assertions live in tests, and it must balance exactly: every generated
occurrence ends in exactly one terminal state, and every transmission or
pre-transmission loss accounts for each of its intended recipients.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from enum import IntEnum
from typing import Iterable, NamedTuple

from .channel import RxOutcome
from .errors import InvariantError
from .sps import SlMode
from .stack import MessageKind

SCHEMA_VERSION = 1

MODE_NONE = -1   # interface legs that are not sidelink carry no mode


class Terminal(IntEnum):
    TRANSMITTED = 0
    EXPIRED = 1      # deadline passed while queued
    DENIED = 2       # no feasible resource
    NO_COVERAGE = 3  # infrastructure leg with a detached target
    OVERSIZED = 4    # payload cannot fit one subframe
    ABORTED = 5      # infrastructure transfer cut mid-flight
    PENDING = 6      # still queued when the run ended


class Iface(IntEnum):
    SL = 0
    UU = 1


class TxRecord(NamedTuple):
    occ_id: int
    tick: int
    sender: int
    mode: int
    kind: int
    iface: int
    region_idx: int


class RxRecord(NamedTuple):
    occ_id: int
    sender: int
    receiver: int
    tick: int
    outcome: int
    in_range: bool
    mode: int
    kind: int
    iface: int


class SwitchRecord(NamedTuple):
    node: int
    from_mode: int
    to_mode: int
    decided_tick: int
    complete_tick: int | None


class GrantRecord(NamedTuple):
    tick: int
    owner: int
    mode: int
    kind: int
    subframe: int
    subch_start: int
    l_subch: int
    period_ticks: int
    c_resel: int


class MetricsLedger:
    """Single-writer run ledger; file emission happens after the run completes."""

    def __init__(self):
        # Occurrence-indexed columns (one slot per generated message leg).
        self.occ_trace: list[int] = []
        self.occ_kind: list[int] = []
        self.occ_iface: list[int] = []
        self.occ_source: list[int] = []
        self.occ_created: list[int] = []
        self.occ_deadline: list[int] = []
        self.occ_terminal: list[int | None] = []
        self.occ_expected_rx: list[int] = []
        self.occ_nt: list[int] = []
        self.occ_nr: list[int] = []
        self._trace_legs: dict[int, dict[int, int]] = defaultdict(dict)

        self.tx_records: list[TxRecord] = []
        self.rx_records: list[RxRecord] = []
        self.grant_records: list[GrantRecord] = []
        self.switch_records: list[SwitchRecord] = []
        self.escalation_log: list[tuple[int, int, int]] = []   # (tick, node, escalations)

        self._rx_count_per_occ: dict[int, int] = defaultdict(int)
        self._latency_samples: dict[tuple[int, int], list[int]] = defaultdict(list)  # (kind, mode)

    # --- recording --------------------------------------------------------

    def on_generated(self, trace_id: int, kind: MessageKind, iface: Iface,
                     source: int, created: int, deadline: int) -> int:
        occ_id = len(self.occ_trace)
        self.occ_trace.append(trace_id)
        self.occ_kind.append(int(kind))
        self.occ_iface.append(int(iface))
        self.occ_source.append(source)
        self.occ_created.append(created)
        self.occ_deadline.append(deadline)
        self.occ_terminal.append(None)
        self.occ_expected_rx.append(0)
        self.occ_nt.append(0)
        self.occ_nr.append(0)
        legs = self._trace_legs[trace_id]
        if int(iface) in legs:
            raise InvariantError(f"trace {trace_id} already has a {Iface(iface).name} leg")
        legs[int(iface)] = occ_id
        return occ_id

    def on_tx(self, occ_id: int, tick: int, sender: int, mode: int, iface: Iface,
              region_idx: int, expected_rx: int) -> None:
        if self.occ_terminal[occ_id] is not None:
            raise InvariantError(f"occurrence {occ_id} already resolved")
        self.occ_terminal[occ_id] = int(Terminal.TRANSMITTED)
        self.occ_expected_rx[occ_id] = expected_rx
        self.tx_records.append(TxRecord(occ_id, tick, sender, mode,
                                        self.occ_kind[occ_id], int(iface), region_idx))

    def on_rx(self, occ_id: int, sender: int, receiver: int, tick: int,
              outcome: RxOutcome, in_range: bool, mode: int, iface: Iface) -> None:
        kind = self.occ_kind[occ_id]
        self.rx_records.append(RxRecord(occ_id, sender, receiver, tick,
                                        int(outcome), in_range, mode, kind, int(iface)))
        self._rx_count_per_occ[occ_id] += 1
        if in_range:
            self.occ_nt[occ_id] += 1
            if outcome == RxOutcome.RECEIVED:
                self.occ_nr[occ_id] += 1
                self._latency_samples[(kind, mode)].append(tick - self.occ_created[occ_id])

    def on_terminal_loss(self, occ_id: int, terminal: Terminal) -> None:
        """Resolve an occurrence that never transmitted; per-recipient loss rows follow via on_rx."""
        if self.occ_terminal[occ_id] is not None:
            raise InvariantError(f"occurrence {occ_id} already resolved")
        self.occ_terminal[occ_id] = int(terminal)

    def set_expected_rx(self, occ_id: int, expected_rx: int) -> None:
        self.occ_expected_rx[occ_id] = expected_rx

    def on_grant(self, rec: GrantRecord) -> None:
        self.grant_records.append(rec)

    def on_switch(self, rec: SwitchRecord) -> None:
        self.switch_records.append(rec)

    def on_escalations(self, tick: int, node: int, escalations: int) -> None:
        self.escalation_log.append((tick, node, escalations))

    # --- queries ------------------------------------------------------------

    def p_r(self, mode: int | None = None, kind: int | None = None,
            iface: int | None = None, senders: Iterable[int] | None = None,
            receivers: Iterable[int] | None = None) -> float | None:
        """Receptions over in-range opportunities under the filter; None when empty."""
        senders = set(senders) if senders is not None else None
        receivers = set(receivers) if receivers is not None else None
        n_t = n_r = 0
        for r in self.rx_records:
            if not r.in_range:
                continue
            if mode is not None and r.mode != mode:
                continue
            if kind is not None and r.kind != kind:
                continue
            if iface is not None and r.iface != iface:
                continue
            if senders is not None and r.sender not in senders:
                continue
            if receivers is not None and r.receiver not in receivers:
                continue
            n_t += 1
            if r.outcome == int(RxOutcome.RECEIVED):
                n_r += 1
        if n_t == 0:
            return None
        return n_r / n_t

    def latency_summary_ticks(self, kind: int | None = None,
                              mode: int | None = None) -> dict | None:
        samples: list[int] = []
        for (k, m), vals in self._latency_samples.items():
            if kind is not None and k != kind:
                continue
            if mode is not None and m != mode:
                continue
            samples.extend(vals)
        if not samples:
            return None
        samples.sort()
        n = len(samples)

        def rank(q: float) -> int:
            return samples[max(0, math.ceil(q * n) - 1)]

        return {
            "n": n,
            "mean": sum(samples) / n,
            "p50": rank(0.50),
            "p95": rank(0.95),
            "max": samples[-1],
        }

    def attribution_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {t.name.lower(): 0 for t in Terminal}
        for t in self.occ_terminal:
            if t is not None:
                counts[Terminal(t).name.lower()] += 1
        return counts

    def rx_outcome_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {o.name.lower(): 0 for o in RxOutcome}
        for r in self.rx_records:
            counts[RxOutcome(r.outcome).name.lower()] += 1
        return counts

    def cam_reached_fraction(self) -> float | None:
        """Of CAM occurrences with at least one in-range recipient, the share received at least once."""
        denom = num = 0
        cam = int(MessageKind.CAM)
        for occ_id, kind in enumerate(self.occ_kind):
            if kind != cam or self.occ_nt[occ_id] == 0:
                continue
            denom += 1
            if self.occ_nr[occ_id] > 0:
                num += 1
        if denom == 0:
            return None
        return num / denom

    def switch_latency_means_ticks(self) -> dict[str, float | None]:
        to3: list[int] = []
        to4: list[int] = []
        for rec in self.switch_records:
            if rec.complete_tick is None:
                continue
            lat = rec.complete_tick - rec.decided_tick
            if rec.to_mode == int(SlMode.MODE3):
                to3.append(lat)
            else:
                to4.append(lat)
        return {
            "mode4_to_mode3": sum(to3) / len(to3) if to3 else None,
            "mode3_to_mode4": sum(to4) / len(to4) if to4 else None,
        }

    # --- verification -----------------------------------------------------------

    def verify(self) -> None:
        """Exact balance of the ledger; raises on any discrepancy."""
        n_occ = len(self.occ_trace)
        for occ_id in range(n_occ):
            if self.occ_terminal[occ_id] is None:
                raise InvariantError(f"occurrence {occ_id} has no terminal state")
        tx_by_occ: dict[int, int] = defaultdict(int)
        for r in self.tx_records:
            tx_by_occ[r.occ_id] += 1
        for occ_id in range(n_occ):
            transmitted = self.occ_terminal[occ_id] == int(Terminal.TRANSMITTED)
            if transmitted and tx_by_occ.get(occ_id, 0) != 1:
                raise InvariantError(f"occurrence {occ_id} marked transmitted with "
                                     f"{tx_by_occ.get(occ_id, 0)} transmissions")
            if not transmitted and tx_by_occ.get(occ_id, 0) != 0:
                raise InvariantError(f"occurrence {occ_id} transmitted but resolved as "
                                     f"{Terminal(self.occ_terminal[occ_id]).name}")
            got = self._rx_count_per_occ.get(occ_id, 0)
            want = self.occ_expected_rx[occ_id]
            if got != want:
                raise InvariantError(
                    f"occurrence {occ_id} has {got} recipient records, expected {want}")
        # Relayed alerts: a sidelink alert leg sourced by a vehicle implies exactly
        # one infrastructure leg under the same trace.
        for trace, legs in self._trace_legs.items():
            if int(Iface.SL) in legs and int(Iface.UU) in legs:
                continue
            sl = legs.get(int(Iface.SL))
            if sl is not None and self.occ_kind[sl] == int(MessageKind.ALERT):
                raise InvariantError(f"relayed alert trace {trace} lacks its infrastructure leg")

    # --- emission ------------------------------------------------------------

    def timeseries_rows(self, window_ticks: int, ticks_per_ms: float) -> list[dict]:
        acc: dict[tuple[int, int], list] = defaultdict(lambda: [0, 0, []])
        for r in self.rx_records:
            if not r.in_range:
                continue
            window = r.tick // window_ticks
            cell = acc[(window, r.mode)]
            cell[0] += 1
            if r.outcome == int(RxOutcome.RECEIVED):
                cell[1] += 1
                cell[2].append(r.tick - self.occ_created[r.occ_id])
        rows = []
        for (window, mode) in sorted(acc):
            n_t, n_r, lats = acc[(window, mode)]
            lats.sort()
            rows.append({
                "window_start_ms": round(window * window_ticks / ticks_per_ms, 6),
                "mode": mode_name(mode),
                "n_t": n_t,
                "n_r": n_r,
                "p_r": round(n_r / n_t, 6),
                "latency_mean_ms": round(sum(lats) / len(lats) / ticks_per_ms, 6) if lats else "",
                "latency_p95_ms": round(lats[max(0, math.ceil(0.95 * len(lats)) - 1)] / ticks_per_ms, 6)
                                  if lats else "",
            })
        return rows

    def attribution_rows(self) -> list[dict]:
        tx_counts: dict[tuple[str, str, str], int] = defaultdict(int)
        for occ_id in range(len(self.occ_trace)):
            terminal = Terminal(self.occ_terminal[occ_id]).name.lower()
            kind = MessageKind(self.occ_kind[occ_id]).name.lower()
            iface = Iface(self.occ_iface[occ_id]).name.lower()
            tx_counts[(terminal, kind, iface)] += 1
        rows = [
            {"scope": "message", "category": term, "kind": kind, "iface": iface, "count": n}
            for (term, kind, iface), n in sorted(tx_counts.items())
        ]
        rx_counts: dict[tuple[str, str, str], int] = defaultdict(int)
        for r in self.rx_records:
            rx_counts[(RxOutcome(r.outcome).name.lower(),
                       MessageKind(r.kind).name.lower(),
                       mode_name(r.mode))] += 1
        rows.extend(
            {"scope": "reception", "category": out, "kind": kind, "iface": mode, "count": n}
            for (out, kind, mode), n in sorted(rx_counts.items())
        )
        return rows


def mode_name(mode: int) -> str:
    if mode == int(SlMode.MODE3):
        return "mode3"
    if mode == int(SlMode.MODE4):
        return "mode4"
    return "none"


def write_outputs(out_dir: str, summary: dict, timeseries: list[dict],
                  attribution: list[dict]) -> dict[str, str]:
    """Write summary JSON plus the two CSVs; byte-stable for a fixed run."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "summary": os.path.join(out_dir, "summary.json"),
        "timeseries": os.path.join(out_dir, "timeseries.csv"),
        "attribution": os.path.join(out_dir, "loss_attribution.csv"),
    }
    with open(paths["summary"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    ts_fields = ["window_start_ms", "mode", "n_t", "n_r", "p_r", "latency_mean_ms", "latency_p95_ms"]
    with open(paths["timeseries"], "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ts_fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(timeseries)
    at_fields = ["scope", "category", "kind", "iface", "count"]
    with open(paths["attribution"], "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=at_fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(attribution)
    return paths
