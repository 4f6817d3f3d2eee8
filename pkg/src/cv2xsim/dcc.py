"""Distributed congestion control: CBR/CR measurement and MCS 7 <-> 11 adaptation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import ChannelConfig, allocation_shape, mcs_entry
from .mac import Grant
from .phy import tx_power_for_rbs

CBR_WINDOW = 100
CR_PAST = 500
CR_FUTURE = 500
DEFAULT_MCS = 7
CONGESTED_MCS = 11

# (upper CBR bound inclusive, CR limit); None means no limit. The last row is
# printed as "0.8 < CBR <= 0.1" in the source table and is read as <= 1.0.
CR_LIMITS = (
    (0.30, None),
    (0.65, 0.03),
    (0.80, 0.06),
    (1.00, 0.003),
)


@dataclass
class DccState:
    payload: int = 190
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    psd_limit: float = 23.0
    cbr: float = 0.0
    cr: float = 0.0
    current_mcs: int = DEFAULT_MCS
    current_tx_power: float = math.nan

    def __post_init__(self):
        if math.isnan(self.current_tx_power):
            self.current_tx_power = power_for_mcs(self.current_mcs, self.payload, self.channel,
                                                  self.psd_limit)


def power_for_mcs(i_mcs: int, payload: int, channel: ChannelConfig, psd_limit: float = 23.0) -> float:
    _, n_rbs = allocation_shape(mcs_entry(i_mcs), payload, channel)
    return tx_power_for_rbs(n_rbs, psd_limit)


def measure_cbr(window: np.ndarray, rssi_threshold: float = -90.0) -> float:
    """Busy fraction of the subchannel-subframe cells in `window` (rows = subframes).

    NaN cells (unsensed) count as idle. A window shorter than 100 rows at
    start-up is measured over what is there.
    """
    window = np.asarray(window, dtype=float)
    if window.size == 0:
        return 0.0
    with np.errstate(invalid="ignore"):
        busy = np.count_nonzero(window > rssi_threshold)
    return busy / window.size


def measure_cr(own_usage: np.ndarray, grant: Grant | None, now: int, num_subchannels: int,
               past: int = CR_PAST, future: int = CR_FUTURE) -> float:
    """Own channel occupancy: used subchannels over the last `past` subframes plus
    subchannels the active grant still reserves over the next `future`."""
    used = int(np.sum(np.asarray(own_usage)[-past:])) if past else 0
    reserved = 0
    if grant is not None:
        reserved = grant.reserved_subframes(now - 1, now - 1 + future) * grant.n_subchannels
    return (used + reserved) / ((past + future) * num_subchannels)


def cr_limit(cbr: float, table=CR_LIMITS) -> float:
    """CR limit for a measured CBR; ``math.inf`` when unlimited."""
    for upper, limit in table:
        if cbr <= upper:
            return math.inf if limit is None else limit
    return math.inf if table[-1][1] is None else table[-1][1]


def choose_mcs(cbr: float, cr: float, table=CR_LIMITS) -> int:
    limit = cr_limit(cbr, table)
    return CONGESTED_MCS if math.isfinite(limit) and cr > limit else DEFAULT_MCS


def adapt(state: DccState, payload: int | None = None, table=CR_LIMITS) -> tuple[int, float]:
    """Pick the MCS for the measured (cbr, cr) and the PSD-limited power that goes with it."""
    payload = state.payload if payload is None else payload
    mcs = choose_mcs(state.cbr, state.cr, table)
    power = power_for_mcs(mcs, payload, state.channel, state.psd_limit)
    state.current_mcs = mcs
    state.current_tx_power = power
    return mcs, power
