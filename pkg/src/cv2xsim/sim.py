"""Subframe-stepped highway simulation of the Mode 4 sidelink.

One `World` owns every vehicle. Per-vehicle state that the channel touches
every subframe (sensing rings, positions, current MCS) is kept in arrays
indexed by vehicle id; grants stay as per-vehicle objects.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import dcc, mac, phy
from .config import ScenarioConfig
from .grid import SCI_RBS, Allocation, allocation_shape, mcs_entry
from .metrics import RESULTS, RunMetrics, TxOutcome, classify_codes

log = logging.getLogger(__name__)


@dataclass
class Vehicle:
    id: int
    lane: int
    position: float
    direction: int
    next_app_arrival: int


def build_topology(cfg: ScenarioConfig, rng: np.random.Generator) -> list[Vehicle]:
    """Per-lane Poisson placement on a torus road; lanes split evenly between directions."""
    per_lane = cfg.density * cfg.road_length / cfg.lanes
    vehicles = []
    for lane in range(cfg.lanes):
        n = int(rng.poisson(per_lane)) if per_lane > 0 else 0
        pos = np.sort(rng.uniform(0.0, cfg.road_length, size=n))
        direction = 1 if lane < cfg.lanes // 2 else -1
        for x in pos:
            vehicles.append(Vehicle(len(vehicles), lane, float(x), direction, 0))
    phases = rng.integers(0, cfg.app_period, size=len(vehicles))
    for v, ph in zip(vehicles, phases):
        v.next_app_arrival = int(ph)
    return vehicles


class _EventLog:
    """Decoded-SCI history shared by all receivers: one row per transmission."""

    def __init__(self, n_vehicles: int, n_sub: int, capacity: int = 256):
        self.V, self.S = n_vehicles, n_sub
        self.n = 0
        self._alloc(capacity)

    def _alloc(self, cap):
        old = getattr(self, "subframe", None)
        fields = dict(subframe=np.zeros(cap, np.int64), rri=np.zeros(cap, np.int64),
                      first=np.zeros(cap, np.int64), nsub=np.zeros(cap, np.int64),
                      decoded=np.zeros((cap, self.V), bool),
                      rsrp=np.full((cap, self.V, self.S), np.nan, np.float32))
        if old is not None:
            for k, arr in fields.items():
                arr[:self.n] = getattr(self, k)[:self.n]
        for k, arr in fields.items():
            setattr(self, k, arr)

    def append(self, subframe, rri, first, nsub, decoded, rsrp):
        k = len(rri)
        if self.n + k > len(self.subframe):
            self._alloc(max(2 * len(self.subframe), self.n + k))
        sl = slice(self.n, self.n + k)
        self.subframe[sl] = subframe
        self.rri[sl] = rri
        self.first[sl] = first
        self.nsub[sl] = nsub
        self.decoded[sl] = decoded
        self.rsrp[sl] = rsrp
        self.n += k

    def prune(self, oldest: int):
        keep = np.flatnonzero(self.subframe[:self.n] >= oldest)
        if len(keep) == self.n:
            return
        for k in ("subframe", "rri", "first", "nsub", "decoded", "rsrp"):
            arr = getattr(self, k)
            arr[:len(keep)] = arr[keep]
        self.n = len(keep)

    def for_receiver(self, v: int, start: int, end: int):
        sf = self.subframe[:self.n]
        idx = np.flatnonzero(self.decoded[:self.n, v] & (sf >= start) & (sf < end))
        return sf[idx], self.rri[idx], self.first[idx], self.nsub[idx], self.rsrp[idx, v, :]


class World:
    def __init__(self, cfg: ScenarioConfig, record_outcomes: bool = False):
        self.cfg = cfg
        self.channel = cfg.channel()
        self.radio = cfg.radio()
        topo_ss, chan_ss, mac_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng_channel = np.random.default_rng(chan_ss)
        self.rng_mac = np.random.default_rng(mac_ss)
        self.vehicles = build_topology(cfg, np.random.default_rng(topo_ss))
        V = self.V = len(self.vehicles)
        S = self.S = self.channel.num_subchannels
        self.size_rb = self.channel.subchannel_size_rb
        self.R = self.channel.pool_rbs

        self.x = np.array([v.position for v in self.vehicles], dtype=float)
        self.y = np.array([v.lane * cfg.lane_width for v in self.vehicles], dtype=float)
        self.direction = np.array([v.direction for v in self.vehicles], dtype=float)
        self.phase = np.array([v.next_app_arrival for v in self.vehicles], dtype=np.int64)
        self.step_m = cfg.speed_kmh / 3.6 / 1000.0

        self.shapes = {}
        for m in (7, 11) if cfg.mcs_mode == "adaptive" else (self._fixed_mcs(),):
            nsub, nrb = allocation_shape(mcs_entry(m), cfg.packet_size, self.channel)
            self.shapes[m] = (nsub, nrb, phy.tx_power_for_rbs(nrb, cfg.psd_limit))
        m0 = 7 if cfg.mcs_mode == "adaptive" else self._fixed_mcs()
        self.mcs = np.full(V, m0, dtype=np.int64)
        self.dcc = [dcc.DccState(payload=cfg.packet_size, channel=self.channel,
                                 psd_limit=cfg.psd_limit, current_mcs=m0) for _ in range(V)]

        self.grants: list[mac.Grant | None] = [None] * V
        self.next_tx = np.full(V, -1, dtype=np.int64)
        self.pending = np.zeros(V, dtype=bool)

        W = mac.SENSING_WINDOW
        self.rssi_ring = np.full((V, W, S), np.nan)
        self.own_tx = np.zeros((V, W), dtype=bool)
        self.own_used = np.zeros((V, W), dtype=np.int64)
        self.stamp = np.full(W, -1, dtype=np.int64)
        self.events = _EventLog(V, S)

        self.noise_rb_mw = float(phy.dbm_to_mw(phy.noise_per_rb(self.radio)))
        self.thresholds = np.array([self.radio.sinr_thresholds.get(i, np.nan) for i in range(12)])
        self.metrics = RunMetrics(bin_width=cfg.bin_width, max_range=cfg.max_range,
                                  error_range=cfg.error_range, num_subchannels=S,
                                  outcomes=[] if record_outcomes else None)
        self.counters = dict(packets=0, transmissions=0, dropped=0, reselections=0,
                             max_psd=-math.inf)
        self._rssi_acc = np.zeros(S)
        self._rssi_n = 0
        self._tx_id = 0
        self.last_transmitters = np.zeros(0, dtype=np.int64)

    def _fixed_mcs(self) -> int:
        return 7 if self.cfg.mcs_mode == "fixed7" else 11

    # ------------------------------------------------------------------
    def distances(self, src: np.ndarray) -> np.ndarray:
        L = self.cfg.road_length
        dx = np.abs(self.x[src, None] - self.x[None, :])
        dx = np.minimum(dx, L - dx)
        dy = self.y[src, None] - self.y[None, :]
        return np.hypot(dx, dy)

    def sensing_view(self, v: int, now: int) -> mac.SensingWindow:
        sw = mac.SensingWindow(self.S, mac.SENSING_WINDOW, rssi=self.rssi_ring[v],
                               own_tx=self.own_tx[v], stamp=self.stamp, now=now)
        sw.set_scis(*self.events.for_receiver(v, now - mac.SENSING_WINDOW, now))
        return sw

    def _reselect(self, v: int, t: int) -> bool:
        cfg = self.cfg
        nsub = self.shapes[int(self.mcs[v])][0]
        try:
            csr = mac.select_csr(t, cfg.rri, nsub, self.channel, self.sensing_view(v, t),
                                 self.rng_mac, base_threshold=cfg.rsrp_threshold, t1=cfg.t1)
        except mac.SchedulingFailure:
            log.warning("vehicle %d: no CSR available at subframe %d, packet dropped", v, t)
            self.grants[v] = None
            self.next_tx[v] = -1
            return False
        self.grants[v] = mac.Grant(rri=cfg.rri, rrc=mac.draw_rrc(cfg.rri, self.rng_mac),
                                   n_subchannels=nsub, first_subchannel=csr.first_subchannel,
                                   next_subframe=csr.subframe,
                                   keep_probability=cfg.keep_probability)
        self.next_tx[v] = csr.subframe
        self.counters["reselections"] += 1
        return True

    def _mac_phase(self, t: int) -> list[tuple[int, int, int]]:
        """Fire due reservations, then admit new packets.

        Returns (vehicle, first subchannel, reserved subchannels) per transmitter.
        """
        transmitters = []
        for v in np.flatnonzero(self.next_tx == t):
            v = int(v)
            g = self.grants[v]
            if self.shapes[int(self.mcs[v])][0] > g.n_subchannels:
                # reservation too narrow for the current MCS: reselect for the waiting packet
                self.grants[v] = None
                self.next_tx[v] = -1
                if self.pending[v] and not self._reselect(v, t):
                    self.pending[v] = False
                    self.counters["dropped"] += 1
                continue
            if self.pending[v]:
                transmitters.append((v, g.first_subchannel, g.n_subchannels))
                self.pending[v] = False
            g = mac.on_transmission(g, self.rng_mac)
            if g.expired:
                self.grants[v] = None
                self.next_tx[v] = -1
            else:
                self.grants[v] = g
                self.next_tx[v] = g.next_subframe

        for v in np.flatnonzero(self.phase == t % self.cfg.app_period):
            v = int(v)
            if self.pending[v]:
                self.counters["dropped"] += 1
            self.pending[v] = True
            if t >= self.cfg.warmup:
                self.counters["packets"] += 1
            if self.grants[v] is None and not self._reselect(v, t):
                self.pending[v] = False
                self.counters["dropped"] += 1
        return transmitters

    def step(self, t: int) -> None:
        cfg = self.cfg
        S, size, R = self.S, self.size_rb, self.R
        # 1. mobility
        self.x = np.mod(self.x + self.direction * self.step_m, cfg.road_length)
        # 2. traffic and reservations
        fired = np.array(self._mac_phase(t), dtype=np.int64).reshape(-1, 3)
        tx = fired[:, 0]
        self.last_transmitters = tx
        slot = t % mac.SENSING_WINDOW
        is_tx = np.zeros(self.V, dtype=bool)
        is_tx[tx] = True
        noise_sub_mw = self.noise_rb_mw * size
        record = t >= cfg.warmup

        # 3. channel resolution
        rx_rb = np.zeros((self.V, R))
        if len(tx):
            T = len(tx)
            mcs_t = self.mcs[tx]
            nrb = np.array([self.shapes[int(m)][1] for m in mcs_t])
            power = np.array([self.shapes[int(m)][2] for m in mcs_t])
            first = fired[:, 1]
            nsub_res = fired[:, 2]
            rri = np.full(T, cfg.rri)
            psd = power - 10.0 * np.log10(nrb * 0.18)
            self.counters["max_psd"] = max(self.counters["max_psd"], float(psd.max()))
            self.counters["transmissions"] += T if record else 0

            d = self.distances(tx)
            pl = phy.pathloss(d, self.radio)
            sh = phy.shadowing_sample(self.rng_channel, self.radio.shadow_sigma_los, size=(T, self.V))
            rx_total = power[:, None] - pl - sh
            p_rb = phy.dbm_to_mw(rx_total - 10.0 * np.log10(nrb)[:, None])      # (T, V)

            rb = np.arange(R)
            start = first * size
            occ = (rb[None, :] >= start[:, None]) & (rb[None, :] < (start + nrb)[:, None])
            sci = (rb[None, :] >= start[:, None]) & (rb[None, :] < (start + SCI_RBS)[:, None])
            data = occ & ~sci
            rx_rb = p_rb.T @ occ.astype(float)                                   # (V, R)

            sig_sci = p_rb * SCI_RBS
            i_sci = np.maximum(sci.astype(float) @ rx_rb.T - sig_sci, 0.0)
            n_data = (nrb - SCI_RBS)[:, None]
            sig_tb = p_rb * n_data
            i_tb = np.maximum(data.astype(float) @ rx_rb.T - sig_tb, 0.0)
            with np.errstate(divide="ignore"):
                sinr_sci = phy.mw_to_dbm(sig_sci) - phy.mw_to_dbm(i_sci + SCI_RBS * self.noise_rb_mw)
                snr_tb = phy.mw_to_dbm(sig_tb) - phy.mw_to_dbm(n_data * self.noise_rb_mw)
                sinr_tb = phy.mw_to_dbm(sig_tb) - phy.mw_to_dbm(i_tb + n_data * self.noise_rb_mw)
            thr = self.thresholds[mcs_t][:, None]
            rx_busy = is_tx[None, :]
            sci_ok = (sinr_sci >= self.radio.threshold(0)) & ~rx_busy
            tb_ok = sinr_tb >= thr
            sci_ok[np.arange(T), tx] = False

            # sensing: decoded SCIs with their per-subchannel RSRP
            counts = np.stack([np.clip(start + nrb - j * size, 0, size)
                               - np.clip(start - j * size, 0, size) for j in range(S)], axis=1)
            base = rx_total - 10.0 * np.log10(nrb * 12)[:, None]                 # (T, V)
            with np.errstate(divide="ignore"):
                frac_db = 10.0 * np.log10(counts / size)                          # (T, S)
            rsrp = base[:, :, None] + frac_db[:, None, :]
            rsrp[np.broadcast_to((counts == 0)[:, None, :], rsrp.shape)] = np.nan
            self.events.append(t, rri, first, nsub_res, sci_ok, rsrp)
            self.own_used[:, slot] = 0
            self.own_used[tx, slot] = np.ceil(nrb / size).astype(np.int64)

            if record:
                self._record(t, tx, d, sci_ok, tb_ok, snr_tb, thr, rx_total, rx_busy, first, nrb, mcs_t)
        else:
            self.own_used[:, slot] = 0

        rssi_sub = phy.mw_to_dbm(rx_rb.reshape(self.V, S, size).sum(axis=2) + noise_sub_mw)
        # 4. sensing rings; transmitters are deaf this subframe
        rssi_sub[is_tx] = np.nan
        self.rssi_ring[:, slot, :] = rssi_sub
        self.own_tx[:, slot] = is_tx
        self.stamp[slot] = t
        if t % mac.SENSING_WINDOW == 0:
            self.events.prune(t - mac.SENSING_WINDOW)
        if record and self.V:
            sensed = ~is_tx
            if sensed.any():
                self._rssi_acc += rssi_sub[sensed].mean(axis=0)
                self._rssi_n += 1

        # 5. congestion control epoch
        if (t + 1) % cfg.dcc_period == 0:
            self._dcc_epoch(t, record)

    def _record(self, t, tx, d, sci_ok, tb_ok, snr_tb, thr, rx_total, rx_busy, first, nrb, mcs_t):
        cfg = self.cfg
        codes = classify_codes(rx_busy, sci_ok, tb_ok, snr_tb, thr, rx_total,
                               self.radio.rx_sensitivity)
        T = len(tx)
        mask = d <= cfg.max_range
        mask[np.arange(T), tx] = False
        self.metrics.record(d[mask], codes[mask])
        if self.metrics.outcomes is not None:
            for i, v in enumerate(tx):
                alloc = Allocation(t, int(first[i]), int(math.ceil(nrb[i] / self.size_rb)),
                                   int(nrb[i]), int(mcs_t[i]))
                for r in np.flatnonzero(mask[i]):
                    self.metrics.outcomes.append(TxOutcome(self._tx_id, int(v), t, alloc,
                                                           int(mcs_t[i]), int(r), float(d[i, r]),
                                                           RESULTS[codes[i, r]]))
                self._tx_id += 1

    def _dcc_epoch(self, t: int, record: bool) -> None:
        cfg = self.cfg
        W = mac.SENSING_WINDOW
        now = t + 1
        cbr_sf = np.arange(max(0, now - cfg.cbr_window), now)
        cbr_slots = cbr_sf % W
        valid = self.stamp[cbr_slots] == cbr_sf
        window = self.rssi_ring[:, cbr_slots[valid], :]
        n_rows = int(valid.sum())
        with np.errstate(invalid="ignore"):
            busy = np.count_nonzero(window > cfg.rssi_threshold, axis=(1, 2))
        cbr = busy / (n_rows * self.S) if n_rows else np.zeros(self.V)

        cr_sf = np.arange(max(0, now - cfg.cr_past), now)
        used = self.own_used[:, cr_sf % W]
        used = np.where((self.stamp[cr_sf % W] == cr_sf)[None, :], used, 0)
        for v in range(self.V):
            st = self.dcc[v]
            st.cbr = float(cbr[v])
            st.cr = dcc.measure_cr(used[v], self.grants[v], now, self.S, cfg.cr_past, cfg.cr_future)
            if cfg.mcs_mode == "adaptive":
                m, _ = dcc.adapt(st)
                self.mcs[v] = m
        if record:
            self.metrics.cbr.append((t, np.asarray(cbr, dtype=float).copy()))
            self.metrics.mcs.append((t, self.V, int(np.count_nonzero(self.mcs == 11))))
            if self._rssi_n:
                self.metrics.rssi.append((t, self._rssi_acc / self._rssi_n))
            self._rssi_acc = np.zeros(self.S)
            self._rssi_n = 0


def run(cfg: ScenarioConfig, record_outcomes: bool = False) -> RunMetrics:
    """Warm up for `cfg.warmup` subframes, then simulate `cfg.duration` seconds."""
    world = World(cfg, record_outcomes=record_outcomes)
    total = cfg.warmup + int(round(cfg.duration * 1000))
    for t in range(total):
        world.step(t)
    world.metrics.counters = dict(world.counters, vehicles=world.V)
    return world.metrics
