import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cv2xsim import dcc
from cv2xsim.dcc import DccState, adapt, choose_mcs, cr_limit, measure_cbr, measure_cr
from cv2xsim.grid import ChannelConfig
from cv2xsim.mac import Grant
from cv2xsim.phy import psd

CFG = ChannelConfig()


def test_cbr_silent_and_saturated():
    assert measure_cbr(np.full((100, 5), -110.0)) == 0.0
    assert measure_cbr(np.full((100, 5), -60.0)) == 1.0


def test_cbr_direct_count():
    w = np.full(500, -110.0)
    w[np.random.default_rng(0).choice(500, 150, replace=False)] = -85.0
    assert measure_cbr(w.reshape(100, 5)) == pytest.approx(0.3)


def test_cbr_threshold_is_strict_and_nan_idle():
    w = np.array([[-90.0, -89.9, np.nan, -120.0]])
    assert measure_cbr(w) == 0.25


def test_cbr_short_window_uses_available_span():
    w = np.full((10, 5), -110.0)
    w[:, 0] = -50.0
    assert measure_cbr(w) == pytest.approx(0.2)
    assert measure_cbr(np.zeros((0, 5))) == 0.0


def test_cr_empty():
    assert measure_cr(np.zeros(500), None, 1000, 5) == 0.0


def _steady_usage(nsub):
    usage = np.zeros(500)
    usage[30::100] = nsub
    return usage


@pytest.mark.parametrize("nsub,expected", [(2, 0.004), (5, 0.01)])
def test_cr_steady_state(nsub, expected):
    now = 1000
    g = Grant(100, 10, nsub, 0, now + 30)
    assert measure_cr(_steady_usage(nsub), g, now, 5) == pytest.approx(expected)


def test_cr_counts_only_remaining_reservations():
    g = Grant(100, 2, 2, 0, 1030)
    assert measure_cr(np.zeros(500), g, 1000, 5) == pytest.approx(4 / 5000)


@pytest.mark.parametrize("cbr,limit", [(0.0, math.inf), (0.2, math.inf), (0.3, math.inf),
                                       (0.300001, 0.03), (0.5, 0.03), (0.65, 0.03),
                                       (0.7, 0.06), (0.8, 0.06), (0.9, 0.003), (1.0, 0.003)])
def test_cr_limit_table(cbr, limit):
    assert cr_limit(cbr) == limit


@pytest.mark.parametrize("cbr,cr,mcs,power", [(0.2, 0.9, 7, 27.32), (0.4, 0.05, 11, 25.97),
                                              (0.4, 0.004, 7, 27.32)])
def test_adapt_examples(cbr, cr, mcs, power):
    st_ = DccState(cbr=cbr, cr=cr)
    got = adapt(st_, 190)
    assert got[0] == mcs
    assert got[1] == pytest.approx(power, abs=0.01)
    assert (st_.current_mcs, st_.current_tx_power) == got


def test_default_state_power():
    s = DccState()
    assert s.current_mcs == 7
    assert s.current_tx_power == pytest.approx(27.32, abs=0.01)


@given(st.floats(0, 1), st.floats(0, 1))
def test_adapt_pure_and_psd_locked(cbr, cr):
    a = adapt(DccState(cbr=cbr, cr=cr))
    b = adapt(DccState(cbr=cbr, cr=cr))
    assert a == b
    n_rbs = {7: 15, 11: 11}[a[0]]
    assert psd(a[1], n_rbs) == pytest.approx(23.0, abs=1e-6)
    assert a[0] == choose_mcs(cbr, cr)


def test_adaptation_keeps_subchannel_count():
    from cv2xsim.grid import allocation_shape, mcs_entry
    assert allocation_shape(mcs_entry(dcc.DEFAULT_MCS), 190, CFG)[0] == \
        allocation_shape(mcs_entry(dcc.CONGESTED_MCS), 190, CFG)[0]


def test_custom_limit_table():
    table = ((0.1, None), (1.0, 0.001))
    assert choose_mcs(0.5, 0.004, table) == 11
    assert choose_mcs(0.05, 0.9, table) == 7
