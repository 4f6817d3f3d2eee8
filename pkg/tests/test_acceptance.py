"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The density/MCS trend scenario is simulated once per module and shared.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cv2xsim import dcc, mac, phy
from cv2xsim.cli import main
from cv2xsim.config import ScenarioConfig
from cv2xsim.grid import ChannelConfig, allocation_shape, mcs_entry, rbs_per_subchannel
from cv2xsim.metrics import RESULTS, RxContext, classify_codes, classify_loss
from cv2xsim.sim import World, run
from sbsps_reference import compare_random_grids

CFG = ChannelConfig()
DENSITIES = (0.06, 0.20)
MODES = ("fixed7", "fixed11", "adaptive")
SEEDS = (1, 2)
MANY = settings(max_examples=1000, deadline=None)


def report(capsys, label, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}", flush=True)
    assert ok, f"{label}: {detail}"


def _trend_run(args):
    density, mode, seed = args
    m = run(ScenarioConfig(road_length=1000.0, duration=20.0, density=density, mcs_mode=mode,
                           seed=seed))
    return args, dict(pdr={r[0]: r[4] for r in m.pdr_table()}, cbr=m.mean_cbr(),
                      rssi=m.mean_rssi(), mcs11=m.mcs11_fraction(),
                      half_duplex=m.error_fraction("half_duplex"),
                      max_psd=m.counters["max_psd"])


@pytest.fixture(scope="module")
def trend():
    jobs = list(itertools.product(DENSITIES, MODES, SEEDS))
    workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return dict(pool.map(_trend_run, jobs))
    return dict(map(_trend_run, jobs))


def _mean(trend, density, mode, key):
    return float(np.mean([trend[density, mode, s][key] for s in SEEDS]))


def _mean_pdr(trend, density, mode):
    bins = {}
    for s in SEEDS:
        for b, p in trend[density, mode, s]["pdr"].items():
            bins.setdefault(b, []).append(p)
    return {b: float(np.mean(v)) for b, v in bins.items()}


# 1 ---------------------------------------------------------------------------

def test_c1_occupancy_table(capsys):
    subs = tuple(allocation_shape(mcs_entry(m), 190, CFG)[0] for m in range(1, 12))
    rbs = {m: allocation_shape(mcs_entry(m), 190, CFG)[1] for m in (5, 7, 11)}
    ok = subs == (5, 4, 3, 3, 2, 2, 2, 2, 2, 2, 2) and rbs == {5: 20, 7: 15, 11: 11}
    report(capsys, "C1 occupancy table", ok, f"subchannels={subs} rbs={rbs}")


# 2 ---------------------------------------------------------------------------

def test_c2_power_and_psd(capsys, trend):
    p15, p11 = phy.tx_power_for_rbs(15), phy.tx_power_for_rbs(11)
    worst = max(r["max_psd"] for r in trend.values())
    ok = abs(p15 - 27.32) <= 0.01 and abs(p11 - 25.97) <= 0.01 and worst <= 23.0 + 1e-6
    report(capsys, "C2 power/PSD", ok,
           f"P(15)={p15:.4f} P(11)={p11:.4f} max PSD over all runs={worst:.6f} dBm/MHz")


# 3 ---------------------------------------------------------------------------

def test_c3_sbsps_oracle_equivalence(capsys):
    bad = compare_random_grids(100)
    report(capsys, "C3 SB-SPS oracle equivalence", bad == [], f"100 grids, mismatches={bad}")


# 4 ---------------------------------------------------------------------------

def test_c4_cr_limit_table(capsys):
    got = [dcc.cr_limit(c) for c in (0.2, 0.5, 0.7, 0.9)]
    edges = (dcc.cr_limit(0.3), dcc.cr_limit(0.300001), dcc.cr_limit(0.65), dcc.cr_limit(0.8),
             dcc.cr_limit(1.0))
    ok = got == [math.inf, 0.03, 0.06, 0.003] and edges == (math.inf, 0.03, 0.03, 0.06, 0.003)
    report(capsys, "C4 CR limit table", ok, f"ranges={got} boundaries={edges}")


# 5 ---------------------------------------------------------------------------

def test_c5a_pdr_ordering(capsys, trend):
    p7, p11 = _mean_pdr(trend, 0.20, "fixed7"), _mean_pdr(trend, 0.20, "fixed11")
    bins = sorted(b for b in p7 if b >= 100 and b in p11)
    bad = [b for b in bins if p7[b] < p11[b]]
    report(capsys, "C5a PDR(MCS7) >= PDR(MCS11) beyond 100 m at 0.20", len(bad) <= 1,
           f"{len(bins)} bins, violations at {bad}")


def test_c5b_cbr_ordering(capsys, trend):
    c7, c11 = _mean(trend, 0.20, "fixed7", "cbr"), _mean(trend, 0.20, "fixed11", "cbr")
    report(capsys, "C5b CBR(MCS11) < CBR(MCS7) at 0.20", c11 < c7, f"{c11:.4f} vs {c7:.4f}")


def test_c5c_rssi_ordering(capsys, trend):
    pairs = {d: (_mean(trend, d, "fixed11", "rssi"), _mean(trend, d, "fixed7", "rssi"))
             for d in DENSITIES}
    ok = all(a < b for a, b in pairs.values())
    detail = ", ".join(f"{d}: {a:.2f} vs {b:.2f} dBm" for d, (a, b) in pairs.items())
    report(capsys, "C5c RSSI(MCS11) < RSSI(MCS7) at every density", ok, detail)


def test_c5d_adaptive_idle_at_low_density(capsys, trend):
    f = _mean(trend, 0.06, "adaptive", "mcs11")
    report(capsys, "C5d MCS-11 usage < 10% at 0.06", f < 0.10, f"{f:.3f}")


def test_c5d_adaptive_saturates_at_high_density(capsys, trend):
    f = _mean(trend, 0.20, "adaptive", "mcs11")
    cbr = _mean(trend, 0.20, "adaptive", "cbr")
    report(capsys, "C5d MCS-11 usage > 90% at 0.20", f > 0.90,
           f"{f:.3f} (mean CBR {cbr:.3f}, limit {dcc.cr_limit(cbr)}, CR per vehicle <= 0.004)")


def test_c5e_half_duplex_invariance(capsys, trend):
    spread = {(d, s): max(trend[d, m, s]["half_duplex"] for m in MODES)
              - min(trend[d, m, s]["half_duplex"] for m in MODES)
              for d in DENSITIES for s in SEEDS}
    worst = max(spread.values())
    report(capsys, "C5e half-duplex fraction spread <= 1 pp", worst <= 0.01,
           f"worst spread {100 * worst:.3f} pp")


# 6 ---------------------------------------------------------------------------

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_c6_determinism(capsys, tmp_path):
    argv = ["-O", "road_length=500", "-O", "density=0.1", "-O", "duration=2", "--seeds", "1", "2"]
    codes = (main(argv + ["-o", str(tmp_path / "a")]), main(argv + ["-o", str(tmp_path / "b")]))
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    report(capsys, "C6 determinism", codes == (0, 0) and a == b and len(a) > 0,
           f"{len(a)} files compared, exit codes {codes}")


# 7 ---------------------------------------------------------------------------

@MANY
@given(st.integers(1, 11), st.integers(1, 190))
def _prop_shape(mcs, payload):
    n_sub, n_rbs = allocation_shape(mcs_entry(mcs), payload, CFG)
    assert (n_sub - 1) * 10 < n_rbs <= n_sub * 10


@MANY
@given(st.integers(1, 50), st.floats(-130, -30), st.integers(0, 3), st.integers(5, 11))
def _prop_phy(n, rx, first, mcs):
    assert abs(phy.psd(phy.tx_power_for_rbs(n), n) - 23.0) < 1e-9
    counts = rbs_per_subchannel(first, allocation_shape(mcs_entry(mcs), 190, CFG)[1], CFG)
    total = np.sum(phy.dbm_to_mw(phy.apportion(rx, counts)))
    assert math.isclose(total, float(phy.dbm_to_mw(rx)), rel_tol=1e-9)


@MANY
@given(st.lists(st.one_of(st.floats(-140, -40), st.just(math.nan)), min_size=1, max_size=40),
       st.integers(0, 60))
def _prop_rsrp_loop(values, extra):
    worst = np.array(values)
    keep, thr, it = mac._rsrp_loop(worst, len(values) + extra, -126.0, 0.2)
    finite = worst[~np.isnan(worst)]
    top = finite.max() if len(finite) else -126.0
    assert thr >= -126.0
    assert it <= max(0, math.ceil((top + 126.0) / 3)) + 1
    if math.isfinite(thr):
        assert keep.sum() >= 0.2 * (len(values) + extra)


@MANY
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def _prop_keep_zero(rrc, seed):
    g, rng = mac.Grant(100, rrc, 2, 0, 0), np.random.default_rng(seed)
    for _ in range(rrc):
        assert not g.expired
        g = mac.on_transmission(g, rng)
    assert g.expired


@MANY
@given(st.floats(0, 1), st.floats(0, 1))
def _prop_dcc(cbr, cr):
    a = dcc.adapt(dcc.DccState(cbr=cbr, cr=cr))
    assert a == dcc.adapt(dcc.DccState(cbr=cbr, cr=cr))
    assert abs(phy.psd(a[1], {7: 15, 11: 11}[a[0]]) - 23.0) < 1e-6


@MANY
@given(st.booleans(), st.booleans(), st.booleans(), st.floats(-20, 40), st.floats(-130, -50))
def _prop_classifier(rx_tx, sci_ok, tb_ok, snr, power):
    code = classify_codes(np.array([rx_tx]), np.array([sci_ok]), np.array([tb_ok]),
                          np.array([snr]), 5.5, np.array([power]), -100.0)[0]
    if rx_tx or not (sci_ok and tb_ok):
        assert RESULTS[code] == classify_loss(RxContext(rx_tx, sci_ok, snr, 5.5, power, -100.0))
    else:
        assert RESULTS[code] == "delivered"


def _prop_sim_half_duplex():
    cfg = ScenarioConfig(road_length=300.0, density=0.3, duration=1.0, warmup=0)
    w = World(cfg, record_outcomes=True)
    tx_at = {}
    for t in range(1000):
        w.step(t)
        tx_at[t] = set(w.last_transmitters.tolist())
    per_tx = {}
    for o in w.metrics.outcomes:
        busy = o.receiver in tx_at[o.subframe]
        assert (o.result == "half_duplex") == busy
        per_tx.setdefault(o.tx_id, []).append(o.receiver)
    assert all(len(r) == len(set(r)) for r in per_tx.values())
    assert sum(w.metrics.result_counts.values()) == len(w.metrics.outcomes)


PROPERTIES = {"grid shapes": _prop_shape, "phy PSD/apportion": _prop_phy,
              "mac RSRP loop": _prop_rsrp_loop, "mac keep-0 reselection": _prop_keep_zero,
              "dcc purity/PSD": _prop_dcc, "metrics classifier": _prop_classifier,
              "sim half-duplex/conservation": _prop_sim_half_duplex}


def test_c7_property_suites(capsys):
    failed = []
    for name, prop in PROPERTIES.items():
        try:
            prop()
        except Exception as exc:  # noqa: BLE001 - collected into the report
            failed.append(f"{name}: {type(exc).__name__}")
    report(capsys, "C7 property suites", not failed,
           f"{len(PROPERTIES)} suites, 1000 cases each where randomized, failures={failed}")
