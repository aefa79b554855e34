import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradinv.cost import CostInputs, cost_table, estimate_hours, format_table

# published table values (GPU hours)
TABLE = {5_000: "934.48", 50_000: "46,579.01", 500_000: "4,215,524.32"}


def _exact(N, T=50, b=128, t=Fraction(1, 4), n=10_000):
    # rational-arithmetic oracle of the same closed form
    nt = Fraction(N * T)
    return nt / b * t + Fraction(n, b) * t + 10 + Fraction(1, 6) * (nt / 5000) ** 2


@pytest.mark.parametrize("N", sorted(TABLE))
def test_table_values_at_display_precision(N):
    h = estimate_hours(CostInputs(N=N))
    assert f"{h:,.2f}" == TABLE[N]
    assert math.isclose(h, float(_exact(N)), rel_tol=1e-15)
    assert estimate_hours(CostInputs(N=N, defense="none")) == 0.25
    assert estimate_hours(CostInputs(N=N, defense="gradprune")) == 0.25


def test_formatted_table():
    text = format_table(cost_table())
    for v in TABLE.values():
        assert v in text
    csv = format_table(cost_table(), "csv").splitlines()
    assert csv[0] == "N,No defense,GradPrune,InstaHide"
    assert csv[1] == "5000,0.25,0.25,934.48"
    assert csv[3] == "500000,0.25,0.25,4215524.32"


def test_quadratic_term_dominates_at_large_N():
    for N in (5e5, 1e6, 5e6):
        cluster = (N * 50 / 5e3) ** 2 / 6
        assert cluster / estimate_hours(CostInputs(N=N)) > 0.9


@given(st.floats(1, 1e7), st.floats(1, 1e7))
def test_monotone_in_N(a, b):
    lo, hi = sorted((a, b))
    if lo == hi:
        return
    assert estimate_hours(CostInputs(N=lo)) < estimate_hours(CostInputs(N=hi))
    assert estimate_hours(CostInputs(N=lo, defense="none")) == estimate_hours(CostInputs(N=hi, defense="none"))


def test_invalid_inputs():
    for kw in ({"N": 0}, {"N": 10, "T": -1}, {"N": 10, "t": 0}, {"N": 10, "defense": "dp"}):
        with pytest.raises(ValueError):
            estimate_hours(CostInputs(**kw))
