import math

import numpy as np
import pytest

from models.case import BusType, NetworkCase
from services.case_service import read_text
from utils.exceptions import CaseFormatError, CaseValidationError


def test_case2_is_read_in_per_unit(case2):
    assert case2.n_bus == 2
    assert case2.reference_bus.id == 1
    assert case2.buses[1].type == BusType.LOAD_ONLY
    gen = case2.generators[0]
    assert gen.a == pytest.approx(10.0)
    assert gen.b == pytest.approx(2.0)
    assert gen.p_max == pytest.approx(2.0)
    assert gen.participation == pytest.approx(1.0)
    assert gen.ramp_limit == pytest.approx(0.75 * 2.0)
    assert case2.loads[0].p_d == pytest.approx(1.0)
    assert case2.loads[0].lr == 0.0
    assert case2.branches[0].theta_diff_max == pytest.approx(math.pi / 4)
    assert not case2.branches[0].limited


def test_case14_topology_and_defaults(case14):
    assert case14.n_bus == 14
    assert len(case14.generators) == 5
    assert len(case14.branches) == 20
    assert case14.generator_buses == [1, 2, 3, 6, 8]
    # rho proportional to 1/a: two units at 2000 $/pu-h, three at 4000
    assert case14.participation() == pytest.approx([2 / 7, 2 / 7, 1 / 7, 1 / 7, 1 / 7])
    assert case14.participation().sum() == pytest.approx(1.0)
    bus9 = case14.buses[case14.bus_index[9]]
    assert bus9.bs == pytest.approx(0.19)
    taps = {(b.from_bus, b.to_bus): b.tap_ratio for b in case14.branches}
    assert taps[(4, 7)] == pytest.approx(0.978)
    assert taps[(1, 2)] == 1.0


def test_dump_case_round_trips(case_service, case3):
    text = case_service.dump_case(case3)
    assert '"format": "robust-acopf-case"' in text
    again = case_service.parse_case(text, "native-json", name=case3.name)
    assert again.model_dump() == case3.model_dump()
    assert case_service.dump_case(again) == text


def test_admittance_matches_branch_data(case_service, case2):
    ybus = case_service.build_admittance(case2).toarray()
    y = 1.0 / complex(0.0, 0.1)
    assert ybus[0, 0] == pytest.approx(y)
    assert ybus[0, 1] == pytest.approx(-y)
    assert np.allclose(ybus, ybus.T)


def test_tap_ratio_scales_the_from_side(case_service, two_bus_text):
    text = two_bus_text.format(load=50, r=0).replace("1 2 0 0.1 0 0 0 0 0 0 1", "1 2 0 0.1 0 0 0 0 0.95 0 1")
    case = case_service.parse_case(text, "mcase")
    assert case.branches[0].tap_ratio == pytest.approx(0.95)
    ybus = case_service.build_admittance(case).toarray()
    y = 1.0 / complex(0.0, 0.1)
    assert ybus[0, 0] == pytest.approx(y / 0.95 ** 2)
    assert ybus[0, 1] == pytest.approx(-y / 0.95)
    assert ybus[1, 0] == pytest.approx(-y / 0.95)
    assert ybus[1, 1] == pytest.approx(y)


def test_admittance_matches_dense_construction(case_service, case14):
    n = case14.n_bus
    index = case14.bus_index
    oracle = np.zeros((n, n), dtype=complex)
    for branch in case14.branches:
        f, t = index[branch.from_bus], index[branch.to_bus]
        y_s = 1.0 / complex(branch.r, branch.x)
        tap = branch.tap_ratio * np.exp(1j * branch.tap_shift)
        charging = 0.5j * branch.b_sh
        oracle[f, f] += (y_s + charging) / abs(tap) ** 2
        oracle[f, t] -= y_s / np.conj(tap)
        oracle[t, f] -= y_s / tap
        oracle[t, t] += y_s + charging
    for k, bus in enumerate(case14.buses):
        oracle[k, k] += complex(bus.gs, bus.bs)
    ybus = case_service.build_admittance(case14).toarray()
    assert np.allclose(ybus, oracle, atol=1e-12)
    # bus 9 carries the 19 MVAr capacitor
    assert case14.buses[index[9]].bs == pytest.approx(0.19)


def test_admittance_follows_bus_relabelling(case_service, case14):
    ids = [bus.id for bus in case14.buses]
    relabel = dict(zip(ids, np.random.default_rng(4).permutation(ids).tolist()))
    data = case14.model_dump()
    for bus in data["buses"]:
        bus["id"] = relabel[bus["id"]]
    data["buses"].sort(key=lambda bus: bus["id"])
    for branch in data["branches"]:
        branch["from_bus"], branch["to_bus"] = relabel[branch["from_bus"]], relabel[branch["to_bus"]]
    data["branches"].reverse()
    for key in ("generators", "loads", "res_units"):
        for item in data[key]:
            item["bus"] = relabel[item["bus"]]
    permuted = NetworkCase.model_validate(data)

    ybus = case_service.build_admittance(case14).toarray()
    moved = case_service.build_admittance(permuted).toarray()
    new = permuted.bus_index
    order = [new[relabel[bus_id]] for bus_id in ids]
    assert np.allclose(moved[np.ix_(order, order)], ybus, atol=1e-12)


def test_missing_table_is_a_format_error(case_service, two_bus_text):
    text = two_bus_text.format(load=100, r=0).replace("mpc.gencost", "mpc.unused")
    with pytest.raises(CaseFormatError, match="gencost"):
        case_service.parse_case(text, "mcase")


def test_non_numeric_entry_reports_the_line(case_service, two_bus_text):
    text = two_bus_text.format(load="abc", r=0)
    with pytest.raises(CaseFormatError) as info:
        case_service.parse_case(text, "mcase", source_name="tiny.m")
    assert info.value.location == "tiny.m:7"


def test_short_rows_are_rejected(case_service, two_bus_text):
    text = two_bus_text.format(load=100, r=0).replace("1 2 0 0.1 0 0 0 0 0 0 1 -360 360;", "1 2 0 0.1;")
    with pytest.raises(CaseFormatError, match="columns"):
        case_service.parse_case(text, "mcase")


def test_quadratic_cost_needs_linearization(case_service, two_bus_text):
    text = two_bus_text.format(load=100, r=0).replace("2 0 0 2 0.1 2;", "2 0 0 3 0.01 0.1 2;")
    with pytest.raises(CaseFormatError, match="quadratic"):
        case_service.parse_case(text, "mcase")
    case = case_service.parse_case(text, "mcase", linearize_quadratic=True)
    # tangent at p_max / 2 = 1 pu: a = 2 * 100 * 1 + 10
    assert case.generators[0].a == pytest.approx(210.0)
    assert case.generators[0].b == 0.0


def test_isolated_bus_is_a_validation_error(case_service, two_bus_text):
    text = two_bus_text.format(load=100, r=0).replace("2 1 100 0", "2 4 100 0")
    with pytest.raises(CaseValidationError):
        case_service.parse_case(text, "mcase")


def test_disconnected_network_is_rejected(case_service, two_bus_text):
    text = two_bus_text.format(load=100, r=0).replace(
        "1 2 0 0.1 0 0 0 0 0 0 1 -360 360;", "1 2 0 0.1 0 0 0 0 0 0 0 -360 360;")
    with pytest.raises(CaseValidationError):
        case_service.parse_case(text, "mcase")


def test_bad_json_reports_line_and_column(case_service):
    with pytest.raises(CaseFormatError) as info:
        case_service.parse_case(read_text('{\n  "buses": [,]\n}'), "native-json", source_name="bad.json")
    assert info.value.location.startswith("bad.json:2:")


def test_place_res_fills_largest_loads_first(case_service, case14):
    case = case_service.place_res(case14, 0.1)
    target = 0.1 * sum(g.p_max for g in case14.generators)
    assert sum(u.p_r for u in case.res_units) == pytest.approx(target)
    # bus 3 carries the largest load (94.2 MW) and hosts the whole target
    assert [u.bus for u in case.res_units] == [3]
    assert all(u.s_max == pytest.approx(1.1 * u.p_r) for u in case.res_units)


def test_place_res_zero_penetration_is_identity(case_service, case3):
    assert case_service.place_res(case3, 0.0) is case3


def test_literal_ramp_limits_follow_base_points(case_service, case3):
    case = case_service.apply_ramp_limits(case3, 0.5, "literal", np.array([1.2, 0.4]))
    assert [g.ramp_limit for g in case.generators] == pytest.approx([0.6, 0.2])
    scaled = case_service.apply_ramp_limits(case3, 0.5, "scaled")
    assert [g.ramp_limit for g in scaled.generators] == pytest.approx([1.25, 1.0])
