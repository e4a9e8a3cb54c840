import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedara.metrics import (
    DriftParams,
    UndefinedMetricError,
    dir_discrepancy,
    drift_closed_form,
    drift_monte_carlo,
    loglog_slope,
    mag_discrepancy,
)
from fedara.numerics import ContractError, Rng

G = np.array([[1.0, 2.0], [0.0, -1.0]])


def test_mag_identical_is_zero():
    assert mag_discrepancy(G, [G, G.copy()]) == 0.0


def test_mag_three_four_five():
    assert mag_discrepancy(G, [G + np.array([[3.0, 4.0], [0.0, 0.0]])]) == 5.0


def test_mag_additive_over_clients():
    delta = np.array([[0.0, 0.0], [0.0, 0.5]])
    assert mag_discrepancy(G, [G + delta, G - delta, G + delta.T]) == pytest.approx(3 * 0.5, abs=0)


def test_mag_shape_mismatch():
    with pytest.raises(ContractError):
        mag_discrepancy(G, [np.zeros((2, 3))])
    with pytest.raises(ContractError):
        mag_discrepancy(G, [])


def test_dir_identical_and_antipodal():
    assert dir_discrepancy(G, [G, G]) == pytest.approx(1.0, abs=1e-15)
    assert dir_discrepancy(G, [-G]) == pytest.approx(-1.0, abs=1e-15)
    assert dir_discrepancy(np.eye(2), [np.array([[0.0, 1.0], [1.0, 0.0]])]) == 0.0


def test_dir_zero_norm_is_undefined():
    with pytest.raises(UndefinedMetricError):
        dir_discrepancy(np.zeros((2, 2)), [G])
    with pytest.raises(UndefinedMetricError):
        dir_discrepancy(G, [G, np.zeros((2, 2))])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_dir_bounded(seed, k):
    rng = Rng(seed)
    g = rng.normal((3, 3))
    assert -1.0 - 1e-12 <= dir_discrepancy(g, [rng.fork(str(i)).normal((3, 3)) for i in range(k)]) <= 1.0 + 1e-12


def test_closed_form_examples():
    p = DriftParams(rho_b=0.5, rho_a=0.5)
    assert drift_closed_form(p, "BA", 8) == pytest.approx(22.0)
    assert drift_closed_form(p, "BEA", 8) == pytest.approx(8.0)
    q = DriftParams(tau_b=2.0, tau_a=3.0, tau_e=0.5, rho_b=1.0, rho_a=1.0)
    assert drift_closed_form(q, "BA", 1) == 6.0
    assert drift_closed_form(q, "BEA", 1) == 3.0


def test_bea_below_ba_with_correlation():
    p = DriftParams()
    for r in (1, 2, 8, 32):
        assert drift_closed_form(p, "BEA", r) <= drift_closed_form(p, "BA", r)


@pytest.mark.parametrize("kwargs", [
    dict(trials=99), dict(rho_b=1.0), dict(rho_a=-0.1), dict(tau_e=0.0), dict(r_values=()),
])
def test_drift_params_validation(kwargs):
    with pytest.raises(ContractError):
        DriftParams(**kwargs)


def test_monte_carlo_agrees_with_closed_form_small():
    report = drift_monte_carlo(DriftParams(d=16, r_values=(1, 3, 6), trials=4000, seed=3))
    for row in report.rows:
        assert abs(row.z) < 3.5, row
        assert row.mc_mean >= 0


def test_uncorrelated_slopes_are_linear():
    report = drift_monte_carlo(DriftParams(d=32, rho_b=0.0, rho_a=0.0, trials=1000, seed=1))
    for flavor in ("BA", "BEA"):
        assert 0.9 <= report.slopes[flavor] <= 1.1


def test_slope_of_exact_power():
    rs = [2, 4, 8]
    assert loglog_slope(rs, [r**2 for r in rs]) == pytest.approx(2.0)


def test_csv_layout_and_determinism():
    p = DriftParams(d=8, r_values=(2, 4), trials=100, seed=5)
    text = drift_monte_carlo(p).to_csv()
    lines = text.splitlines()
    assert lines[0] == "flavor,r,mc_mean,stderr,closed_form,slope"
    assert [ln.split(",")[:2] for ln in lines[1:]] == [["BA", "2"], ["BA", "4"], ["BEA", "2"], ["BEA", "4"]]
    assert text == drift_monte_carlo(p).to_csv()
