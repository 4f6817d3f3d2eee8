"""Sensing-based semi-persistent scheduling (SB-SPS) for sidelink Mode 4.

Candidate single-subframe resources (CSRs) are scored from a 1 s sensing
history. The list-based operations below mirror the standard procedure stage
by stage; `select_csr` runs the same stages on arrays and is what the
simulator calls.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grid import Allocation, ChannelConfig

log = logging.getLogger(__name__)

SUPPORTED_RRI = (20, 50) + tuple(range(100, 1001, 100))
SENSING_WINDOW = 1000
MAX_SELECTION_WINDOW = 100
RSRP_STEP_DB = 3.0
DEFAULT_RSRP_THRESHOLD = -126.0
DEFAULT_FRACTION = 0.2
# avg RSSI is quantised before ranking so that ties do not depend on summation order
RSSI_RANK_DECIMALS = 6


class UnsupportedRRI(ValueError):
    pass


class SchedulingFailure(RuntimeError):
    pass


def _check_rri(rri: int) -> None:
    if rri not in SUPPORTED_RRI:
        raise UnsupportedRRI(f"RRI {rri} ms not in {SUPPORTED_RRI}")


def selection_window(t: int, rri: int, t1: int = 0) -> tuple[int, int]:
    """Half-open-on-the-left window (start, end]: subframes start+1 .. end."""
    _check_rri(rri)
    return t + t1, t + min(rri, MAX_SELECTION_WINDOW)


def rrc_range(rri: int) -> tuple[int, int]:
    _check_rri(rri)
    if rri >= 100:
        return 5, 15
    if rri == 50:
        return 10, 30
    return 25, 75


def draw_rrc(rri: int, rng: np.random.Generator) -> int:
    lo, hi = rrc_range(rri)
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class SciRecord:
    origin: int
    rri: int
    first_subchannel: int
    n_subchannels: int
    i_mcs: int
    n_rbs_total: int

    _FMT = struct.Struct("<IHBBBB")

    def encode(self) -> bytes:
        return self._FMT.pack(self.origin, self.rri, self.first_subchannel, self.n_subchannels,
                              self.i_mcs, self.n_rbs_total)

    @classmethod
    def decode(cls, blob: bytes) -> "SciRecord":
        return cls(*cls._FMT.unpack(blob))

    def next_reservation(self, subframe: int) -> int:
        return subframe + self.rri


@dataclass(frozen=True)
class Grant:
    rri: int
    rrc: int
    n_subchannels: int
    first_subchannel: int
    next_subframe: int
    keep_probability: float = 0.0
    expired: bool = False

    def __post_init__(self):
        if not 0.0 <= self.keep_probability <= 0.8:
            raise ValueError(f"keep_probability must lie in [0, 0.8], got {self.keep_probability}")

    def reserved_subframes(self, start: int, end: int) -> int:
        """Number of reserved transmissions in (start, end] still covered by the counter."""
        if self.expired or self.rrc <= 0 or self.next_subframe > end:
            return 0
        first = self.next_subframe
        if first <= start:
            first += self.rri * math.ceil((start + 1 - first) / self.rri)
        if first > end:
            return 0
        return min(self.rrc, (end - first) // self.rri + 1)


def sci_payload(grant: Grant, allocation: Allocation, origin: int) -> SciRecord:
    return SciRecord(origin=origin, rri=grant.rri, first_subchannel=allocation.first_subchannel,
                     n_subchannels=grant.n_subchannels, i_mcs=allocation.i_mcs,
                     n_rbs_total=allocation.n_rbs_total)


def on_transmission(grant: Grant, rng: np.random.Generator) -> Grant:
    """Advance the grant by one period; at counter zero either re-arm or expire."""
    if grant.rrc < 1:
        raise ValueError("on_transmission called on a grant with rrc < 1")
    rrc = grant.rrc - 1
    nxt = grant.next_subframe + grant.rri
    if rrc > 0:
        return replace(grant, rrc=rrc, next_subframe=nxt)
    if grant.keep_probability > 0 and rng.random() < grant.keep_probability:
        return replace(grant, rrc=draw_rrc(grant.rri, rng), next_subframe=nxt)
    return replace(grant, rrc=0, next_subframe=nxt, expired=True)


@dataclass(frozen=True)
class CsrCandidate:
    subframe: int
    first_subchannel: int
    n_subchannels: int
    avg_rssi: float = math.nan
    worst_rsrp: float = math.nan

    @property
    def key(self) -> tuple[int, int]:
        return self.subframe, self.first_subchannel


class SensingWindow:
    """Per-vehicle history of the last `size` subframes.

    RSSI cells and own-transmission flags live in rings indexed by
    ``subframe % size``; ``stamp`` records which subframe last wrote each slot so
    stale or never-written slots read as missing. Decoded SCIs are kept as
    column arrays with their per-subchannel RSRP (NaN where the transmission
    put no RBs).
    """

    def __init__(self, num_subchannels: int, size: int = SENSING_WINDOW, *,
                 rssi: np.ndarray | None = None, own_tx: np.ndarray | None = None,
                 stamp: np.ndarray | None = None, now: int = 0):
        self.size = size
        self.num_subchannels = num_subchannels
        self.rssi = rssi if rssi is not None else np.full((size, num_subchannels), np.nan)
        self.own_tx = own_tx if own_tx is not None else np.zeros(size, dtype=bool)
        self.stamp = stamp if stamp is not None else np.full(size, -1, dtype=np.int64)
        self.now = now
        self.sci_subframe = np.zeros(0, dtype=np.int64)
        self.sci_rri = np.zeros(0, dtype=np.int64)
        self.sci_first = np.zeros(0, dtype=np.int64)
        self.sci_nsub = np.zeros(0, dtype=np.int64)
        self.sci_rsrp = np.zeros((0, num_subchannels))

    def observe(self, subframe: int, rssi_row=None) -> None:
        """Store one subframe; ``rssi_row=None`` marks it unsensed (own transmission)."""
        slot = subframe % self.size
        self.stamp[slot] = subframe
        if rssi_row is None:
            self.own_tx[slot] = True
            self.rssi[slot] = np.nan
        else:
            self.own_tx[slot] = False
            self.rssi[slot] = rssi_row
        self.now = max(self.now, subframe + 1)

    def add_sci(self, subframe: int, sci: SciRecord, rsrp_row) -> None:
        self.set_scis(np.append(self.sci_subframe, subframe), np.append(self.sci_rri, sci.rri),
                      np.append(self.sci_first, sci.first_subchannel),
                      np.append(self.sci_nsub, sci.n_subchannels),
                      np.vstack([self.sci_rsrp, np.asarray(rsrp_row, dtype=float)[None, :]]))

    def set_scis(self, subframe, rri, first, nsub, rsrp) -> None:
        self.sci_subframe = np.asarray(subframe, dtype=np.int64)
        self.sci_rri = np.asarray(rri, dtype=np.int64)
        self.sci_first = np.asarray(first, dtype=np.int64)
        self.sci_nsub = np.asarray(nsub, dtype=np.int64)
        self.sci_rsrp = np.asarray(rsrp, dtype=float).reshape(-1, self.num_subchannels)

    def advance(self, now: int) -> None:
        self.now = now

    @property
    def start(self) -> int:
        return self.now - self.size

    def valid(self, subframes: np.ndarray) -> np.ndarray:
        subframes = np.asarray(subframes)
        ok = (subframes >= self.start) & (subframes < self.now)
        return ok & (self.stamp[subframes % self.size] == subframes)


@dataclass
class _Features:
    """Per-candidate scores over the full enumerated candidate set."""
    subframe: np.ndarray
    first: np.ndarray
    n_subchannels: int
    reserved: np.ndarray
    unsensed: np.ndarray
    worst_rsrp: np.ndarray
    avg_rssi: np.ndarray
    positions: int

    def index(self, csrs: Sequence[CsrCandidate]) -> np.ndarray:
        start = self.subframe[0] if len(self.subframe) else 0
        return np.array([(c.subframe - start) * self.positions + c.first_subchannel for c in csrs],
                        dtype=np.int64)

    def candidates(self, idx) -> list[CsrCandidate]:
        return [CsrCandidate(int(self.subframe[i]), int(self.first[i]), self.n_subchannels,
                             float(self.avg_rssi[i]), float(self.worst_rsrp[i])) for i in idx]


def _period_history(window: tuple[int, int], sensing: SensingWindow, period: int):
    """For each selection subframe, the sensing subframes c - k*period that are in the window."""
    start, end = window
    subframes = np.arange(start + 1, end + 1)
    kmax = max(1, math.ceil((end - sensing.start) / period))
    hist = subframes[:, None] - period * np.arange(1, kmax + 1)[None, :]
    return subframes, hist, sensing.valid(hist)


def _features(window, n_subchannels: int, sensing: SensingWindow, period: int,
              num_subchannels: int) -> _Features:
    subframes, hist, valid = _period_history(window, sensing, period)
    L = len(subframes)
    S = num_subchannels
    m = n_subchannels
    P = S - m + 1
    slots = hist % sensing.size

    unsensed_sf = (sensing.own_tx[slots] & valid).any(axis=1)

    rssi = sensing.rssi[slots]                       # (L, K, S)
    rssi_mw = np.where(valid[:, :, None], np.power(10.0, rssi / 10.0), np.nan)
    counts = np.sum(~np.isnan(rssi_mw), axis=1)
    sums = np.nansum(rssi_mw, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cell_rssi_mw = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)   # (L, S)

    reserved = np.zeros((L, S), dtype=bool)
    cell_rsrp = np.full((L, S), np.nan)
    s = sensing.sci_subframe
    if len(s):
        keep = (s >= sensing.start) & (s < sensing.now)
        s = s[keep]
        rri = sensing.sci_rri[keep]
        first = sensing.sci_first[keep]
        nsub = sensing.sci_nsub[keep]
        rsrp = sensing.sci_rsrp[keep]
        start, end = window
        sub_idx = np.arange(S)
        covers = (sub_idx[None, :] >= first[:, None]) & (sub_idx[None, :] < (first + nsub)[:, None])

        # announced next reservation
        nxt = s + rri
        hit = (nxt > start) & (nxt <= end)
        for r in np.flatnonzero(hit):
            reserved[nxt[r] - start - 1] |= covers[r]

        # latest RSRP whose periodic projection lands on the cell
        # first s + q*rri (q >= 1) past the window start
        c0 = s + rri * (np.maximum(start - s, 0) // rri + 1)
        rec, cell_sf = [], []
        q = 0
        while True:
            c = c0 + q * rri
            ok = c <= end
            if not ok.any():
                break
            rec.append(np.flatnonzero(ok))
            cell_sf.append(c[ok] - start - 1)
            q += 1
        if rec:
            rec = np.concatenate(rec)
            cell_sf = np.concatenate(cell_sf)
            r_idx, j_idx = np.nonzero(covers[rec])
            rows = cell_sf[r_idx]
            recs = rec[r_idx]
            key = rows * S + j_idx
            val = rsrp[recs, j_idx]
            tie = np.where(np.isnan(val), -np.inf, val)
            order = np.lexsort((tie, s[recs], key))
            key_sorted = key[order]
            last = np.r_[key_sorted[1:] != key_sorted[:-1], True]
            chosen = order[last]
            cell_rsrp.reshape(-1)[key[chosen]] = val[chosen]

    # aggregate cells into m-wide candidates
    cand_reserved = np.zeros((L, P), dtype=bool)
    rsrp_stack = np.empty((m, L, P))
    rssi_sum = np.zeros((L, P))
    rssi_n = np.zeros((L, P))
    for k in range(m):
        cand_reserved |= reserved[:, k:k + P]
        rsrp_stack[k] = cell_rsrp[:, k:k + P]
        part = cell_rssi_mw[:, k:k + P]
        rssi_sum += np.nan_to_num(part)
        rssi_n += ~np.isnan(part)
    all_nan = np.isnan(rsrp_stack).all(axis=0)
    worst = np.where(all_nan, np.nan, np.nanmax(np.where(np.isnan(rsrp_stack), -np.inf, rsrp_stack),
                                                axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        avg_mw = np.where(rssi_n > 0, rssi_sum / np.maximum(rssi_n, 1), np.nan)
        avg_rssi = 10.0 * np.log10(avg_mw)

    return _Features(
        subframe=np.repeat(subframes, P),
        first=np.tile(np.arange(P), L),
        n_subchannels=m,
        reserved=cand_reserved.reshape(-1),
        unsensed=np.repeat(unsensed_sf, P),
        worst_rsrp=worst.reshape(-1),
        avg_rssi=avg_rssi.reshape(-1),
        positions=P,
    )


def enumerate_csrs(window: tuple[int, int], n_subchannels: int,
                   cfg: ChannelConfig) -> list[CsrCandidate]:
    if not 1 <= n_subchannels <= cfg.num_subchannels:
        raise ValueError(f"need {n_subchannels} subchannels, channel has {cfg.num_subchannels}")
    start, end = window
    return [CsrCandidate(sf, j, n_subchannels)
            for sf in range(start + 1, end + 1)
            for j in range(cfg.num_subchannels - n_subchannels + 1)]


def _feats_for(csrs, sensing: SensingWindow, rri: int, window=None) -> _Features | None:
    if not csrs:
        return None
    m = csrs[0].n_subchannels
    if window is None:
        window = (min(c.subframe for c in csrs) - 1, max(c.subframe for c in csrs))
    return _features(window, m, sensing, rri, sensing.num_subchannels)


def filter_unsensed_and_reserved(csrs: list[CsrCandidate], sensing: SensingWindow, rri: int,
                                 window: tuple[int, int] | None = None) -> list[CsrCandidate]:
    """Drop CSRs under an announced reservation or behind an own-transmission blind spot.

    `rri` is the period of the grant being selected: an unsensed subframe u
    hides whatever sits at u + k*rri.
    """
    f = _feats_for(csrs, sensing, rri, window)
    if f is None:
        return []
    idx = f.index(csrs)
    drop = f.reserved[idx] | f.unsensed[idx]
    return [c for c, d in zip(csrs, drop) if not d]


def _rsrp_loop(worst_rsrp: np.ndarray, total: int, base: float, fraction: float):
    target = fraction * total
    rsrp = np.where(np.isnan(worst_rsrp), -np.inf, worst_rsrp)
    thr = base
    iterations = 0
    while True:
        keep = ~(rsrp > thr)
        if keep.sum() >= target:
            return keep, thr, iterations
        if keep.all():
            return keep, math.inf, iterations
        thr += RSRP_STEP_DB
        iterations += 1


def filter_rsrp(csrs: list[CsrCandidate], sensing: SensingWindow, base_threshold: float,
                window_size: int, rri: int, fraction: float = DEFAULT_FRACTION,
                window: tuple[int, int] | None = None):
    """RSRP exclusion with 3 dB threshold relaxation.

    `window_size` is the pre-filter candidate total the 20 % target is measured
    against. Returns (survivors, final threshold, number of threshold raises);
    the threshold is ``inf`` when even admitting everything misses the target.
    """
    f = _feats_for(csrs, sensing, rri, window)
    if f is None:
        return [], base_threshold, 0
    idx = f.index(csrs)
    keep, thr, it = _rsrp_loop(f.worst_rsrp[idx], window_size, base_threshold, fraction)
    out = [replace(c, worst_rsrp=float(f.worst_rsrp[i]), avg_rssi=float(f.avg_rssi[i]))
           for c, i, k in zip(csrs, idx, keep) if k]
    return out, thr, it


def _rank_lowest(avg_rssi: np.ndarray, subframe: np.ndarray, first: np.ndarray, quota: int):
    key = np.round(np.where(np.isnan(avg_rssi), np.inf, avg_rssi), RSSI_RANK_DECIMALS)
    order = np.lexsort((first, subframe, key))
    return order[:quota]


def select_lowest_rssi(csrs: list[CsrCandidate], sensing: SensingWindow, window_size: int,
                       rri: int, fraction: float = DEFAULT_FRACTION,
                       window: tuple[int, int] | None = None) -> list[CsrCandidate]:
    f = _feats_for(csrs, sensing, rri, window)
    if f is None:
        return []
    idx = f.index(csrs)
    quota = math.ceil(fraction * window_size)
    pick = _rank_lowest(f.avg_rssi[idx], f.subframe[idx], f.first[idx], quota)
    return f.candidates(idx[pick])


def choose_csr(shortlist: Sequence[CsrCandidate], rng: np.random.Generator) -> CsrCandidate:
    if not shortlist:
        raise SchedulingFailure("empty CSR shortlist")
    return shortlist[int(rng.integers(len(shortlist)))]


@dataclass
class Selection:
    shortlist: list[CsrCandidate]
    total: int
    after_exclusion: int
    threshold: float
    iterations: int


def shortlist_csrs(t: int, rri: int, n_subchannels: int, cfg: ChannelConfig,
                   sensing: SensingWindow, base_threshold: float = DEFAULT_RSRP_THRESHOLD,
                   fraction: float = DEFAULT_FRACTION, t1: int = 0,
                   window: tuple[int, int] | None = None) -> Selection:
    """Full pipeline: enumerate, exclude, relax RSRP, keep the quietest 20 %."""
    window = window or selection_window(t, rri, t1)
    if not 1 <= n_subchannels <= cfg.num_subchannels:
        raise ValueError(f"need {n_subchannels} subchannels, channel has {cfg.num_subchannels}")
    f = _features(window, n_subchannels, sensing, rri, cfg.num_subchannels)
    total = len(f.subframe)
    alive = np.flatnonzero(~(f.reserved | f.unsensed))
    keep, thr, it = _rsrp_loop(f.worst_rsrp[alive], total, base_threshold, fraction)
    alive = alive[keep]
    quota = math.ceil(fraction * total)
    pick = _rank_lowest(f.avg_rssi[alive], f.subframe[alive], f.first[alive], quota)
    return Selection(f.candidates(alive[pick]), total, int((~(f.reserved | f.unsensed)).sum()),
                     thr, it)


def select_csr(t: int, rri: int, n_subchannels: int, cfg: ChannelConfig, sensing: SensingWindow,
               rng: np.random.Generator, **kw) -> CsrCandidate:
    sel = shortlist_csrs(t, rri, n_subchannels, cfg, sensing, **kw)
    return choose_csr(sel.shortlist, rng)
