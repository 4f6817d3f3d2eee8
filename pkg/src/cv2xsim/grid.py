"""Static sidelink resource grid: channelization, MCS/TBS tables, RB occupancy."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

RB_BANDWIDTH_MHZ = 0.18
SUBCARRIERS_PER_RB = 12
SCI_RBS = 2

TOTAL_RBS = {10: 50, 20: 100}
LEGAL_SUBCHANNEL_SIZES = (5, 6, 10, 15, 20, 25, 50, 75, 100)
LEGAL_NUM_SUBCHANNELS = (1, 3, 5, 8, 10, 15, 20)

# Largest PSSCH allocation at 10 MHz once the SCI has taken its 2 RBs.
MAX_DATA_RBS = TOTAL_RBS[10] - SCI_RBS


class ChannelConfigError(ValueError):
    pass


class TableLookupError(LookupError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    bandwidth_mhz: int = 10
    num_subchannels: int = 5
    subchannel_size_rb: int = 10
    scheme: str = "adjacent"

    def __post_init__(self):
        if self.bandwidth_mhz not in TOTAL_RBS:
            raise ChannelConfigError(
                f"bandwidth_mhz must be one of {sorted(TOTAL_RBS)}, got {self.bandwidth_mhz}")
        if self.subchannel_size_rb not in LEGAL_SUBCHANNEL_SIZES:
            raise ChannelConfigError(
                f"subchannel_size_rb must be one of {LEGAL_SUBCHANNEL_SIZES}, "
                f"got {self.subchannel_size_rb}")
        if self.num_subchannels not in LEGAL_NUM_SUBCHANNELS:
            raise ChannelConfigError(
                f"num_subchannels must be one of {LEGAL_NUM_SUBCHANNELS}, "
                f"got {self.num_subchannels}")
        if self.num_subchannels * self.subchannel_size_rb > self.total_rbs:
            raise ChannelConfigError(
                f"{self.num_subchannels} x {self.subchannel_size_rb} RBs exceeds the "
                f"{self.total_rbs} RBs available at {self.bandwidth_mhz} MHz")
        if self.scheme != "adjacent":
            raise ChannelConfigError(f"only the adjacent scheme is supported, got {self.scheme!r}")

    @property
    def total_rbs(self) -> int:
        return TOTAL_RBS[self.bandwidth_mhz]

    @property
    def pool_rbs(self) -> int:
        return self.num_subchannels * self.subchannel_size_rb


@dataclass(frozen=True)
class McsEntry:
    i_mcs: int
    modulation: str
    coding_rate: float
    i_tbs: int

    @property
    def bits_per_symbol(self) -> int:
        return 2 if self.modulation == "QPSK" else 4


@dataclass(frozen=True)
class Allocation:
    """Footprint of one transmission: where it sits and how many RBs it lights up."""
    subframe: int
    first_subchannel: int
    n_subchannels: int
    n_rbs_total: int
    i_mcs: int

    def rbs_per_subchannel(self, cfg: ChannelConfig) -> np.ndarray:
        return rbs_per_subchannel(self.first_subchannel, self.n_rbs_total, cfg)


def _load_tbs_table() -> np.ndarray:
    table = np.zeros((11, 50), dtype=np.int64)
    with resources.files("cv2xsim").joinpath("data/tbs_36213.csv").open() as fh:
        rows = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(rows):
            table[int(row["i_tbs"]), int(row["n_prb"]) - 1] = int(row["bits"])
    return table


TBS_TABLE = _load_tbs_table()
TBS_TABLE.setflags(write=False)

# Table 8.6.1-1 restricted to the sidelink range: I_MCS 0..10 are QPSK with I_TBS = I_MCS,
# I_MCS 11 switches to 16QAM and reuses I_TBS 10.
_MCS_TO_TBS = {i: i for i in range(11)}
_MCS_TO_TBS[11] = 10

# Nominal code rate per RB assuming 7 effective data symbols per subframe after DMRS,
# AGC and guard overhead. Only a label: decoding never reads it.
_EFFECTIVE_DATA_RE_PER_RB = SUBCARRIERS_PER_RB * 7
_CRC_BITS = 24


@lru_cache(maxsize=None)
def mcs_entry(i_mcs: int) -> McsEntry:
    if i_mcs not in _MCS_TO_TBS:
        raise TableLookupError(f"i_mcs {i_mcs} outside the supported range 0..11")
    modulation = "QPSK" if i_mcs <= 10 else "QAM16"
    i_tbs = _MCS_TO_TBS[i_mcs]
    qm = 2 if modulation == "QPSK" else 4
    ref_prb = 10
    rate = (TBS_TABLE[i_tbs, ref_prb - 1] + _CRC_BITS) / (ref_prb * _EFFECTIVE_DATA_RE_PER_RB * qm)
    return McsEntry(i_mcs=i_mcs, modulation=modulation, coding_rate=round(float(rate), 2),
                    i_tbs=i_tbs)


def tbs_lookup(i_tbs: int, n_prb: int) -> int:
    """Transport block size in bits for a TBS index and a PRB count."""
    if not 0 <= i_tbs < TBS_TABLE.shape[0]:
        raise TableLookupError(f"i_tbs {i_tbs} outside embedded table range 0..{TBS_TABLE.shape[0] - 1}")
    if not 1 <= n_prb <= TBS_TABLE.shape[1]:
        raise TableLookupError(f"n_prb {n_prb} outside embedded table range 1..{TBS_TABLE.shape[1]}")
    return int(TBS_TABLE[i_tbs, n_prb - 1])


def rbs_for_packet(mcs: McsEntry, payload: int) -> int:
    """Smallest data-RB count (SCI excluded) whose TBS carries `payload` bytes."""
    if payload <= 0:
        raise ValueError(f"payload must be positive, got {payload}")
    bits = 8 * payload
    row = TBS_TABLE[mcs.i_tbs, :MAX_DATA_RBS]
    # Rows are non-decreasing in n_prb, so the first fit is the minimal one.
    n = int(np.searchsorted(row, bits, side="left"))
    if n >= MAX_DATA_RBS:
        raise CapacityError(
            f"{payload} B does not fit in {MAX_DATA_RBS} data RBs at MCS {mcs.i_mcs}")
    return n + 1


def allocation_shape(mcs: McsEntry, payload: int, cfg: ChannelConfig) -> tuple[int, int]:
    """(n_subchannels, n_rbs_total) including the 2 SCI RBs."""
    n_rbs_total = rbs_for_packet(mcs, payload) + SCI_RBS
    n_sub = math.ceil(n_rbs_total / cfg.subchannel_size_rb)
    if n_sub > cfg.num_subchannels:
        raise CapacityError(
            f"{n_rbs_total} RBs need {n_sub} subchannels, channel has {cfg.num_subchannels}")
    return n_sub, n_rbs_total


def rbs_per_subchannel(first_subchannel: int, n_rbs_total: int, cfg: ChannelConfig) -> np.ndarray:
    """Per-subchannel RB count for a contiguous allocation filled from its first RB."""
    size = cfg.subchannel_size_rb
    counts = np.zeros(cfg.num_subchannels, dtype=np.int64)
    remaining = n_rbs_total
    k = first_subchannel
    while remaining > 0:
        if k >= cfg.num_subchannels:
            raise CapacityError("allocation runs past the last subchannel")
        counts[k] = min(size, remaining)
        remaining -= counts[k]
        k += 1
    return counts


def rb_mask(first_subchannel: int, n_rbs: int, cfg: ChannelConfig, offset: int = 0) -> np.ndarray:
    """Boolean mask over the pool RBs for `n_rbs` RBs starting `offset` RBs into the allocation."""
    mask = np.zeros(cfg.pool_rbs, dtype=bool)
    start = first_subchannel * cfg.subchannel_size_rb + offset
    mask[start:start + n_rbs] = True
    return mask
