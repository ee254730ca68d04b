"""Link abstraction: log-distance path loss, RSRP/RSSI, per-subframe delivery outcomes.

Propagation is deterministic (no fading): reception is gated by a per-region
range plus an interference capture threshold, which keeps runs reproducible
without inventing link-level error curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple

from .grid import Csr, SciFootprint, subch_overlap

C_LIGHT = 299_792_458.0


class RxOutcome(IntEnum):
    RECEIVED = 0
    HALF_DUPLEX = 1     # receiver transmitted in the same subframe
    OUT_OF_RANGE = 2
    COLLISION = 3       # overlapping transmission pushed SIR under the capture threshold
    # Loss reasons resolved before any transmission; kept here so the metrics
    # ledger has a single outcome vocabulary.
    EXPIRED = 4
    DENIED = 5
    NO_COVERAGE = 6
    OVERSIZED = 7
    ABORTED = 8


@dataclass(frozen=True)
class ChannelConfig:
    carrier_ghz: float = 5.9
    tx_power_dbm: float = 23.0
    noise_dbm: float = -110.0
    sir_capture_db: float = 3.0
    sensing_range_m: float = 200.0  # beyond this, a transmission is neither decoded nor measured
    # Flat-world defaults; region-dependent scenarios override per receiver.
    pathloss_exponent: float = 2.75
    reception_range_m: float = 100.0

    def validate(self) -> None:
        from .errors import ConfigError

        if self.reception_range_m <= 0 or self.sensing_range_m <= 0:
            raise ConfigError("channel ranges must be positive")
        if self.pathloss_exponent < 2.0:
            raise ConfigError(f"channel.pathloss_exponent must be >= 2, got {self.pathloss_exponent}")
        if self.carrier_ghz <= 0:
            raise ConfigError("channel.carrier_ghz must be positive")


class Transmission(NamedTuple):
    """One sender's sidelink emission for one subframe."""

    sender: int
    csr: Csr
    occ_id: int              # metrics occurrence this TB belongs to
    tx_power_dbm: float
    reservation_ms: int      # reservation interval advertised in the control message (0 = one-shot)
    mode: int = 0            # sidelink mode of the sender at emission time
    sdu: object = None       # MAC unit riding in the TB (lcid/seq for receive-side dedup)
    sci: SciFootprint = SciFootprint()


class Delivery(NamedTuple):
    sender: int
    receiver: int
    occ_id: int
    outcome: RxOutcome
    in_range: bool
    rsrp_dbm: float


def free_space_pl0_db(carrier_ghz: float) -> float:
    """Free-space loss at the 1 m reference distance."""
    f_hz = carrier_ghz * 1e9
    return 20.0 * math.log10(4.0 * math.pi * 1.0 * f_hz / C_LIGHT)


def rsrp_dbm(tx_power_dbm: float, distance_m: float, exponent: float, carrier_ghz: float = 5.9) -> float:
    """Received power under the log-distance law; distances under 1 m clamp to 1 m."""
    d = max(distance_m, 1.0)
    return tx_power_dbm - free_space_pl0_db(carrier_ghz) - 10.0 * exponent * math.log10(d)


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw)


def rssi_dbm(received_dbm: Iterable[float], noise_dbm: float) -> float:
    """Aggregate signal strength: linear sum of arrivals plus the noise floor."""
    total = dbm_to_mw(noise_dbm)
    for p in received_dbm:
        total += dbm_to_mw(p)
    return mw_to_dbm(total)


class LinkEnv:
    """Geometry/region adapter the delivery resolver queries per node pair."""

    def __init__(self, cfg: ChannelConfig, distance_fn, rx_params_fn=None):
        # rx_params_fn(receiver) -> (pathloss_exponent, reception_range_m); defaults to flat config
        self.cfg = cfg
        self.distance = distance_fn
        self.rx_params = rx_params_fn or (lambda node: (cfg.pathloss_exponent, cfg.reception_range_m))


def deliver_subframe(
    tick: int,
    transmissions: list[Transmission],
    receivers: Iterable[int],
    env: LinkEnv,
) -> list[Delivery]:
    """Resolve one subframe: exactly one outcome per (transmission, receiver) pair.

    Outcome precedence: a receiver that transmitted this tick hears nothing at
    any distance; then the range gate; then capture against co-channel
    interference.
    """
    cfg = env.cfg
    senders = {t.sender for t in transmissions}
    out: list[Delivery] = []
    for rx in receivers:
        exponent, rx_range = env.rx_params(rx)
        rx_transmitted = rx in senders
        # Received powers at this receiver, one entry per transmission.
        powers = []
        for t in transmissions:
            d = env.distance(t.sender, rx)
            powers.append(rsrp_dbm(t.tx_power_dbm, d, exponent, cfg.carrier_ghz))
        for i, t in enumerate(transmissions):
            if t.sender == rx:
                continue
            d = env.distance(t.sender, rx)
            in_range = d <= rx_range
            if rx_transmitted:
                out.append(Delivery(t.sender, rx, t.occ_id, RxOutcome.HALF_DUPLEX, in_range, powers[i]))
                continue
            if not in_range:
                out.append(Delivery(t.sender, rx, t.occ_id, RxOutcome.OUT_OF_RANGE, False, powers[i]))
                continue
            interference_mw = 0.0
            for k, other in enumerate(transmissions):
                if k == i or other.sender == rx:
                    continue
                if subch_overlap(t.csr.subch_start, t.csr.l_subch, other.csr.subch_start, other.csr.l_subch):
                    interference_mw += dbm_to_mw(powers[k])
            if interference_mw > 0.0:
                sir_db = powers[i] - mw_to_dbm(interference_mw)
                if sir_db < cfg.sir_capture_db:
                    out.append(Delivery(t.sender, rx, t.occ_id, RxOutcome.COLLISION, True, powers[i]))
                    continue
            out.append(Delivery(t.sender, rx, t.occ_id, RxOutcome.RECEIVED, True, powers[i]))
    return out
