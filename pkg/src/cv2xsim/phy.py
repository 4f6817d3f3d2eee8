"""Radio model: propagation, PSD-limited power and per-subchannel power accounting.

All powers are in dBm unless a name ends in ``_mw``. Power is spread uniformly
over the RBs a transmission occupies; emissions outside those RBs are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import RB_BANDWIDTH_MHZ, SUBCARRIERS_PER_RB, McsEntry

THERMAL_NOISE_DBM_HZ = -174.0
SPEED_OF_LIGHT = 299_792_458.0


class RadioConfigError(ValueError):
    pass


def _default_thresholds() -> dict[int, float]:
    # Non-authoritative SINR thresholds (dB). Anchors: MCS 0 = 2.5, 7 = 5.5, 11 = 8.5,
    # linear in between so that robustness is monotone in the MCS index.
    out = {}
    for i in range(12):
        if i <= 7:
            out[i] = 2.5 + i * (5.5 - 2.5) / 7
        else:
            out[i] = 5.5 + (i - 7) * (8.5 - 5.5) / 4
    return out


@dataclass
class RadioConfig:
    carrier_ghz: float = 5.9
    psd_limit: float = 23.0
    noise_figure: float = 9.0
    shadow_sigma_los: float = 3.0
    rx_sensitivity: float | None = None
    sinr_thresholds: dict[int, float] = field(default_factory=_default_thresholds)
    # WINNER+ B1 LOS constants
    antenna_height: float = 1.5
    effective_env_height: float = 1.0
    near_slope: float = 22.7
    near_intercept: float = 41.0
    near_freq_coeff: float = 20.0
    far_slope: float = 40.0
    far_intercept: float = 9.45
    far_height_coeff: float = 17.3
    far_freq_coeff: float = 2.7
    subchannel_size_rb: int = 10

    def __post_init__(self):
        self.sinr_thresholds = {int(k): float(v) for k, v in self.sinr_thresholds.items()}
        if self.rx_sensitivity is None:
            self.rx_sensitivity = (noise_power(self.subchannel_size_rb * RB_BANDWIDTH_MHZ * 1e6,
                                               self.noise_figure)
                                   + self.threshold(0))

    def threshold(self, i_mcs: int) -> float:
        try:
            return self.sinr_thresholds[i_mcs]
        except KeyError:
            raise RadioConfigError(f"no SINR threshold configured for MCS {i_mcs}") from None

    @property
    def breakpoint_m(self) -> float:
        h = self.antenna_height - self.effective_env_height
        return 4.0 * h * h * self.carrier_ghz * 1e9 / SPEED_OF_LIGHT


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(mw, dtype=float))


def noise_power(bandwidth_hz: float, noise_figure: float) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(bandwidth_hz) + noise_figure


def noise_per_rb(cfg: RadioConfig) -> float:
    return noise_power(RB_BANDWIDTH_MHZ * 1e6, cfg.noise_figure)


def tx_power_for_rbs(n_rbs_total: int, psd_limit: float = 23.0) -> float:
    """Total power that puts the PSD exactly on `psd_limit` (dBm/MHz) over `n_rbs_total` RBs."""
    if n_rbs_total < 1:
        raise ValueError(f"n_rbs_total must be >= 1, got {n_rbs_total}")
    return psd_limit + 10.0 * math.log10(n_rbs_total * RB_BANDWIDTH_MHZ)


def psd(tx_power: float, n_rbs_total: int) -> float:
    return tx_power - 10.0 * math.log10(n_rbs_total * RB_BANDWIDTH_MHZ)


def pathloss(distance, cfg: RadioConfig | None = None):
    """WINNER+ B1 LOS pathloss in dB; accepts scalars or arrays.

    Two slopes joined at the breakpoint 4 h'_tx h'_rx f / c with effective antenna
    heights h' = h - 1 m. Distances below 1 m are clamped; the near slope is
    extended down to 1 m rather than switching to free space.
    """
    cfg = cfg or RadioConfig()
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    fc = cfg.carrier_ghz
    h_eff = cfg.antenna_height - cfg.effective_env_height
    near = cfg.near_slope * np.log10(d) + cfg.near_intercept + cfg.near_freq_coeff * math.log10(fc / 5.0)
    far = (cfg.far_slope * np.log10(d) + cfg.far_intercept
           - 2.0 * cfg.far_height_coeff * math.log10(h_eff)
           + cfg.far_freq_coeff * math.log10(fc / 5.0))
    out = np.where(d < cfg.breakpoint_m, near, far)
    return float(out) if out.ndim == 0 else out


def shadowing_sample(rng: np.random.Generator, sigma: float, size=None):
    """Zero-mean log-normal shadowing in dB."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return 0.0 if size is None else np.zeros(size)
    return rng.normal(0.0, sigma, size=size)


def rsrp_per_re(rx_power: float, n_rbs_total: int) -> float:
    if n_rbs_total < 1:
        raise ValueError(f"n_rbs_total must be >= 1, got {n_rbs_total}")
    return rx_power - 10.0 * math.log10(n_rbs_total * SUBCARRIERS_PER_RB)


def apportion(rx_power: float, rbs_in_subchannel) -> np.ndarray:
    """Split a received power over subchannels in proportion to RB overlap (dBm, -inf if none)."""
    counts = np.asarray(rbs_in_subchannel, dtype=float)
    share = counts / counts.sum()
    return mw_to_dbm(dbm_to_mw(rx_power) * share)


def subchannel_rsrp(rx_power: float, rbs_in_subchannel, n_rbs_total: int,
                    subchannel_size_rb: int) -> np.ndarray:
    """Per-subchannel RSRP: per-RE power averaged over every RE of the subchannel.

    A fully occupied subchannel reports the plain per-RE power; a partially
    occupied one reports proportionally less; an untouched one reports NaN.
    """
    counts = np.asarray(rbs_in_subchannel, dtype=float)
    base = rsrp_per_re(rx_power, n_rbs_total)
    with np.errstate(divide="ignore"):
        out = base + 10.0 * np.log10(counts / subchannel_size_rb)
    out[counts == 0] = np.nan
    return out


def subchannel_rssi(contributions, noise: float) -> float:
    """Linear sum of per-subchannel contributions plus noise, in dBm."""
    total = dbm_to_mw(noise) + float(np.sum(dbm_to_mw(np.asarray(list(contributions), dtype=float))))
    return float(mw_to_dbm(total))


def sinr(signal: float, interference_plus_noise: float) -> float:
    return signal - interference_plus_noise


def combine(*powers_dbm: float) -> float:
    return float(mw_to_dbm(np.sum(dbm_to_mw(np.asarray(powers_dbm, dtype=float)))))


def decode_tb(sinr_db: float, mcs: McsEntry | int, cfg: RadioConfig) -> bool:
    i_mcs = mcs if isinstance(mcs, int) else mcs.i_mcs
    return bool(sinr_db >= cfg.threshold(i_mcs))


def decode_sci(sinr_db: float, cfg: RadioConfig) -> bool:
    return bool(sinr_db >= cfg.threshold(0))
