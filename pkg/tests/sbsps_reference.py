"""Exhaustive SB-SPS reference used to cross-check the vectorised pipeline."""
import math
import random

import numpy as np

from cv2xsim.grid import ChannelConfig
from cv2xsim.mac import SensingWindow, shortlist_csrs


def reference_shortlist(world, start, end, m, S, rri, base=-126.0, fraction=0.2):
    """Straight loops over every candidate; returns (shortlist keys, threshold, total)."""
    now, size, rssi, own, scis = (world[k] for k in ("now", "size", "rssi", "own", "scis"))
    lo = now - size

    def history(sf):
        return [h for h in range(sf - rri, lo - 1, -rri) if lo <= h < now and h in rssi]

    def cell_rsrp(sf, j):
        best = None
        for s, r, f, n, vals in scis:
            if not (lo <= s < now) or not (f <= j < f + n):
                continue
            if sf > s and (sf - s) % r == 0:
                v = vals[j]
                rank = (s, -math.inf if math.isnan(v) else v)
                if best is None or rank > best[0]:
                    best = (rank, v)
        return math.nan if best is None else best[1]

    cands = []
    for sf in range(start + 1, end + 1):
        hist = history(sf)
        blind = any(h in own for h in hist)
        for j in range(S - m + 1):
            subs = range(j, j + m)
            reserved = any(lo <= s < now and s + r == sf and f < j + m and j < f + n
                           for s, r, f, n, _ in scis)
            rsrps = [v for v in (cell_rsrp(sf, k) for k in subs) if not math.isnan(v)]
            worst = max(rsrps) if rsrps else math.nan
            per_sub = []
            for k in subs:
                vals = [10 ** (rssi[h][k] / 10) for h in hist
                        if h not in own and not math.isnan(rssi[h][k])]
                if vals:
                    per_sub.append(math.fsum(vals) / len(vals))
            avg = 10 * math.log10(math.fsum(per_sub) / len(per_sub)) if per_sub else math.nan
            cands.append(dict(key=(sf, j), drop=reserved or blind, worst=worst, avg=avg))
    total = len(cands)
    alive = [c for c in cands if not c["drop"]]
    thr = base
    while True:
        surv = [c for c in alive if math.isnan(c["worst"]) or c["worst"] <= thr]
        if len(surv) >= fraction * total:
            break
        if len(surv) == len(alive):
            thr = math.inf
            break
        thr += 3.0
    surv.sort(key=lambda c: (math.inf if math.isnan(c["avg"]) else round(c["avg"], 6), c["key"]))
    return [c["key"] for c in surv[:math.ceil(fraction * total)]], thr, total


def random_world(r: random.Random, S, size, now, rri):
    rssi, own = {}, set()
    for h in range(now - size, now):
        u = r.random()
        if u < 0.1:
            own.add(h)
            rssi[h] = [math.nan] * S
        elif u < 0.9:
            rssi[h] = [r.choice([-100.0, -95.0, -90.0, -85.0, -70.0]) + r.choice([0.0, 0.5])
                       for _ in range(S)]
    scis = []
    for _ in range(r.randint(0, 6)):
        f = r.randrange(S)
        n = r.randint(1, S - f)
        vals = [r.choice([math.nan, -130.0, -120.0, -110.0, -100.0]) if f <= k < f + n else math.nan
                for k in range(S)]
        scis.append((r.randrange(now - size - 5, now), r.choice([rri, 2 * rri, 20]), f, n, vals))
    return dict(now=now, size=size, rssi=rssi, own=own, scis=scis)


def load_window(world, S):
    sw = SensingWindow(S, size=world["size"])
    for h in sorted(world["rssi"]):
        sw.observe(h, None if h in world["own"] else world["rssi"][h])
    sw.set_scis([s[0] for s in world["scis"]], [s[1] for s in world["scis"]],
                [s[2] for s in world["scis"]], [s[3] for s in world["scis"]],
                np.array([s[4] for s in world["scis"]]).reshape(-1, S))
    sw.advance(world["now"])
    return sw


def compare_random_grids(n_cases=100, seed=2024):
    """Run the pipeline and the reference on random small grids; return mismatching trials."""
    r = random.Random(seed)
    cfg = ChannelConfig(num_subchannels=3)
    bad = []
    for trial in range(n_cases):
        rri = r.choice([20, 50, 100])
        L = r.randint(1, 10)
        m = r.randint(1, 3)
        now = 500
        world = random_world(r, 3, size=r.choice([2 * rri, 3 * rri + 7]), now=now, rri=rri)
        sel = shortlist_csrs(now, rri, m, cfg, load_window(world, 3), window=(now, now + L))
        keys_ref, thr_ref, total = reference_shortlist(world, now, now + L, m, 3, rri)
        got = [(c.subframe, c.first_subchannel) for c in sel.shortlist]
        ok = got == keys_ref and sel.threshold == thr_ref and sel.total == total
        if math.isfinite(sel.threshold):
            ok = ok and len(sel.shortlist) >= 0.2 * total
        if not ok:
            bad.append(trial)
    return bad
