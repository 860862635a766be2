import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIXTURES, fixture_case
from dnnsopf.caseio import (
    CaseParseError,
    CaseValidationError,
    SingularBranchError,
    build_admittance,
    load_case,
    parse_case,
    partition_variables,
    serialize_case,
)

CASE2 = (FIXTURES / "case2.m").read_text()


def _replace_table(text, name, body):
    return re.sub(rf"mpc\.{name}\s*=\s*\[.*?\];", f"mpc.{name} = [\n{body}\n];", text, flags=re.S)


def test_two_bus_fixture_counts():
    case = parse_case(CASE2)
    assert case.n_bus == 2
    assert len(case.branches) == 1 and len(case.generators) == 1
    assert case.buses[1].p_d == pytest.approx(0.5)


def test_stock_14_bus_counts():
    case = load_case("case14")
    assert (case.n_bus, len(case.generators), len(case.branches)) == (14, 5, 20)


def test_bundled_fixtures_parse():
    for name, n in [("case6ww", 6), ("case14_ieee_pglib", 14), ("case118", 118)]:
        assert load_case(name).n_bus == n


def test_missing_generator_table():
    text = re.sub(r"mpc\.gen\s*=\s*\[.*?\];", "", CASE2, flags=re.S)
    with pytest.raises(CaseParseError, match="missing generator table"):
        parse_case(text)


def test_missing_file():
    with pytest.raises(FileNotFoundError, match="case file not found"):
        load_case("/nonexistent/case.m")


def test_duplicate_slack():
    text = CASE2.replace("\t2\t1\t50\t0", "\t2\t3\t50\t0")
    with pytest.raises(CaseValidationError):
        parse_case(text)


def test_dangling_branch():
    text = _replace_table(CASE2, "branch", "1\t7\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;")
    with pytest.raises(CaseValidationError, match="unknown bus"):
        parse_case(text)


def test_piecewise_linear_cost_rejected():
    text = _replace_table(CASE2, "gencost", "1\t0\t0\t2\t0\t0\t100\t1000;")
    with pytest.raises(CaseValidationError, match="polynomial"):
        parse_case(text)


def test_out_of_service_dropped():
    text = _replace_table(
        CASE2, "branch",
        "1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;\n1\t2\t0\t0.2\t0\t0\t0\t0\t0\t0\t0\t-360\t360;",
    )
    assert len(parse_case(text).branches) == 1


def test_zero_rate_means_unlimited():
    assert np.isinf(parse_case(CASE2).branches[0].rate)


def test_single_branch_admittance():
    Y = build_admittance(parse_case(CASE2))
    assert Y.G[0, 1] == pytest.approx(0.0, abs=1e-15)
    assert Y.B[0, 1] == pytest.approx(10.0, rel=1e-12)
    assert Y.B[0, 0] == pytest.approx(-10.0, rel=1e-12)


def test_singular_branch():
    text = _replace_table(CASE2, "branch", "1\t2\t0\t0\t0\t0\t0\t0\t0\t0\t1\t-360\t360;")
    with pytest.raises(SingularBranchError):
        build_admittance(parse_case(text))


def _pi_model_oracle(case):
    """Textbook assembly by explicit 2x2 stamps, one branch at a time."""
    pos = case.bus_position()
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        tap = (br.tap if br.tap else 1.0) * np.exp(1j * np.deg2rad(br.shift))
        f, t = pos[br.from_bus], pos[br.to_bus]
        Y[f, f] += (ys + 0.5j * br.b) / (tap * np.conj(tap))
        Y[t, t] += ys + 0.5j * br.b
        Y[f, t] += -ys / np.conj(tap)
        Y[t, f] += -ys / tap
    for b in case.buses:
        Y[pos[b.id], pos[b.id]] += complex(b.g_sh, b.b_sh)
    return Y


@pytest.mark.parametrize("name", ["case2", "case6ww", "case14", "case14_ieee_pglib", "case118"])
def test_admittance_matches_stamp_oracle(name):
    case = fixture_case(name)
    Y = build_admittance(case)
    ref = _pi_model_oracle(case)
    np.testing.assert_allclose(Y.G, ref.real, atol=1e-12, rtol=0)
    np.testing.assert_allclose(Y.B, ref.imag, atol=1e-12, rtol=0)
    assert np.array_equal(Y.G != 0, Y.G.T != 0) or np.array_equal(Y.B != 0, Y.B.T != 0)


def test_row_sums_vanish_without_shunts_or_taps():
    from dataclasses import replace

    case = fixture_case("case14")
    case = replace(
        case,
        branches=tuple(replace(b, b=0.0, tap=0.0, shift=0.0) for b in case.branches),
        buses=tuple(replace(b, g_sh=0.0, b_sh=0.0) for b in case.buses),
    )
    Y = build_admittance(case)
    np.testing.assert_allclose(Y.G.sum(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(Y.B.sum(axis=1), 0, atol=1e-12)


def test_partition_dimensions():
    idx = partition_variables(fixture_case("case14_ieee_pglib"))
    assert (idx.dim_x, idx.dim_u, idx.dim_phi) == (9, 27, 28)
    assert partition_variables(parse_case(CASE2)).dim_x == 1


@pytest.mark.parametrize("name", ["case2", "case2_ed", "case6ww", "case14", "case14_ieee_pglib", "case118"])
def test_dimension_rules(name):
    case = fixture_case(name)
    idx = partition_variables(case)
    assert idx.dim_x == 2 * len(case.generators) - 1
    assert idx.dim_u == 2 * case.n_bus - 1
    assert idx.dim_phi == 2 * case.n_bus


@pytest.mark.parametrize("name", ["case2", "case6ww", "case14_ieee_pglib", "case118"])
def test_round_trip(name):
    case = fixture_case(name)
    again = parse_case(serialize_case(case), name=case.name)
    assert again == case


@settings(max_examples=40, deadline=None)
@given(
    pd=st.floats(0, 300), qd=st.floats(-50, 50), r=st.floats(0, 0.2), x=st.floats(0.01, 1.0),
    b=st.floats(0, 0.5), rate=st.floats(0, 500), c2=st.floats(0, 1), c1=st.floats(0, 100),
)
def test_round_trip_random_two_bus(pd, qd, r, x, b, rate, c2, c1):
    text = _replace_table(CASE2, "bus",
                          f"1\t3\t0\t0\t0\t0\t1\t1\t0\t100\t1\t1.1\t0.9;\n"
                          f"2\t1\t{pd!r}\t{qd!r}\t0\t0\t1\t1\t0\t100\t1\t1.1\t0.9;")
    text = _replace_table(text, "branch", f"1\t2\t{r!r}\t{x!r}\t{b!r}\t{rate!r}\t0\t0\t0\t0\t1\t-360\t360;")
    text = _replace_table(text, "gencost", f"2\t0\t0\t3\t{c2!r}\t{c1!r}\t0;")
    case = parse_case(text)
    assert parse_case(serialize_case(case)) == case


def test_json_dump_is_valid():
    import json

    d = json.loads(fixture_case("case2").to_json())
    assert d["base_mva"] == 100
