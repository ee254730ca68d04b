"""Time-frequency resource geometry: subchannel/PRB mapping, data subframe pool, TB sizing.

The frequency axis is divided into subchannels of contiguous PRBs; the time
axis into subframes (ticks).  Subframes on the synchronization period are
reserved for sync signals and never carry data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .errors import ConfigError, IndexOutOfGridError, OversizedTbError

SCI_PRBS = 2      # control message always rides on two PRBs next to the data
SCI_BITS = 32
MAX_GRID_PRBS = 110  # permissive carrier-wide bound used for config validation


@dataclass(frozen=True)
class ResourceGridConfig:
    """Geometry of the sidelink grid plus the linear TB capacity model."""

    n_subch: int = 4
    subch_size: int = 12          # PRBs per subchannel
    subch_rb_start: int = 0
    adjacency: bool = True        # control PRBs adjacent to data in the same subframe
    beta: int = 2                 # PRB offset in adjacency mode
    slss_period_ticks: int = 160  # sync subframe period (160 ms at mu=0)
    bytes_per_prb: int = 36       # QPSK, ~1/2 code rate equivalent

    def validate(self) -> None:
        if self.n_subch < 1:
            raise ConfigError(f"grid.n_subch must be >= 1, got {self.n_subch}")
        if self.subch_size < SCI_PRBS:
            raise ConfigError(f"grid.subch_size must be >= {SCI_PRBS} so a subchannel can hold the control PRBs")
        if not self.adjacency:
            raise ConfigError("grid.adjacency: only adjacent control/data placement is implemented")
        if self.beta != 2:
            raise ConfigError(f"grid.beta must be 2 in adjacency mode, got {self.beta}")
        if self.subch_rb_start < 0:
            raise ConfigError("grid.subch_rb_start must be >= 0")
        top = self.subch_rb_start + self.n_subch * self.subch_size + self.beta
        if top > MAX_GRID_PRBS:
            raise ConfigError(f"grid spans {top} PRBs, above the {MAX_GRID_PRBS}-PRB carrier bound")
        if self.slss_period_ticks < 2:
            raise ConfigError("grid.slss_period_ticks must be >= 2")
        if self.bytes_per_prb < 1:
            raise ConfigError("grid.bytes_per_prb must be >= 1")


class Csr(NamedTuple):
    """Candidate single-subframe resource: one subframe plus contiguous subchannels."""

    subframe: int
    subch_start: int
    l_subch: int


class SciFootprint(NamedTuple):
    """Control-message footprint; rides in the same subframe as its TB."""

    prb_count: int = SCI_PRBS
    bits: int = SCI_BITS
    colocated_subframe: bool = True


class TbSize(NamedTuple):
    prbs: int       # PRBs for the data block alone
    l_subch: int    # subchannels covering data plus the control PRBs


def prb_index(m: int, j: int, cfg: ResourceGridConfig) -> int:
    """PRB index of offset j inside subchannel m."""
    if not 0 <= m < cfg.n_subch:
        raise IndexOutOfGridError(f"subchannel index {m} outside [0, {cfg.n_subch})")
    if not 0 <= j < cfg.subch_size:
        raise IndexOutOfGridError(f"PRB offset {j} outside [0, {cfg.subch_size})")
    return cfg.subch_rb_start + m * cfg.subch_size + j + cfg.beta


def is_slss_subframe(tick: int, cfg: ResourceGridConfig) -> bool:
    return tick % cfg.slss_period_ticks == 0


def build_pssch_pool(start: int, end: int, cfg: ResourceGridConfig) -> list[int]:
    """Data subframes in [start, end): every tick except the sync subframes."""
    if start >= end:
        raise ValueError(f"empty interval [{start}, {end})")
    period = cfg.slss_period_ticks
    return [t for t in range(start, end) if t % period != 0]


def tb_prbs_required(payload_bytes: int, cfg: ResourceGridConfig, overhead_bytes: int = 10) -> TbSize:
    """PRBs and subchannels needed to carry one payload in a single subframe.

    The control PRBs ride inside the first subchannel of the allocation, so
    they count toward the subchannel total but not toward the data PRBs.
    """
    if payload_bytes < 1:
        raise ValueError(f"payload_bytes must be >= 1, got {payload_bytes}")
    prbs = math.ceil((payload_bytes + overhead_bytes) / cfg.bytes_per_prb)
    l_subch = math.ceil((prbs + SCI_PRBS) / cfg.subch_size)
    if l_subch > cfg.n_subch:
        raise OversizedTbError(
            f"{payload_bytes}B payload needs {l_subch} subchannels, grid has {cfg.n_subch}"
            " (no segmentation: one message must fit one subframe)"
        )
    return TbSize(prbs, l_subch)


def checked_csr(subframe: int, subch_start: int, l_subch: int, cfg: ResourceGridConfig) -> Csr:
    """Build a Csr, rejecting grid overruns and sync subframes."""
    if l_subch < 1 or subch_start < 0 or subch_start + l_subch > cfg.n_subch:
        raise IndexOutOfGridError(
            f"subchannels [{subch_start}, {subch_start + l_subch}) outside grid of {cfg.n_subch}"
        )
    if is_slss_subframe(subframe, cfg):
        raise IndexOutOfGridError(f"subframe {subframe} is a sync subframe and carries no data")
    return Csr(subframe, subch_start, l_subch)


def subch_overlap(a_start: int, a_len: int, b_start: int, b_len: int) -> bool:
    return a_start < b_start + b_len and b_start < a_start + a_len
