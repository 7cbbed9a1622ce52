import numpy as np
import pytest

from models.robust import RobustMode, RobustSetpoints
from models.uncertainty import InjectionKind, Scenario, ScenarioLabel, UncertainInjection, UncertaintySpec
from models.validation import Verdict
from services.validation_service import ValidationService
from utils.exceptions import UncertaintyError


def fixed_setpoints(p_g=(1.0,), c_ii=(1.0,)):
    return RobustSetpoints(case_name="case2", mode=RobustMode.DETERMINISTIC, p_g=list(p_g), c_ii=list(c_ii),
                           participation=[1.0], objective=0.0)


@pytest.fixture
def case2_box(opf_service, case2):
    return opf_service.build_uncertainty(case2, load_fraction=0.1)


@pytest.fixture
def case3_box(opf_service, case3):
    return opf_service.build_uncertainty(case3, load_fraction=0.1)


def test_scenarios_are_reproducible(validation_service, case3_box):
    first = list(validation_service.generate_scenarios(case3_box, n_scenarios=5, seed=11))
    again = list(validation_service.generate_scenarios(case3_box, n_scenarios=5, seed=11))
    other = list(validation_service.generate_scenarios(case3_box, n_scenarios=5, seed=12))
    assert first == again
    assert [s.mu for s in first] != [s.mu for s in other]
    # a scenario depends on (seed, id) only
    shorter = list(validation_service.generate_scenarios(case3_box, n_scenarios=3, seed=11))
    assert shorter == first[:3]
    assert [s.id for s in first] == [0, 1, 2, 3, 4]


def test_in_range_samples_stay_in_the_box(validation_service, case3_box):
    for scenario in validation_service.generate_scenarios(case3_box, n_scenarios=200, seed=1):
        assert scenario.label == ScenarioLabel.IN_RANGE
        assert np.all(np.abs(scenario.vector) <= case3_box.mu_bar)


def test_out_of_range_samples_leave_the_box(validation_service, case3_box):
    width = validation_service.settings.OUT_OF_RANGE_WIDTH * case3_box.nominal
    signs = set()
    for scenario in validation_service.generate_scenarios(case3_box, "out-of-range", n_scenarios=200, seed=1):
        magnitude = np.abs(scenario.vector)
        assert np.all(magnitude > case3_box.mu_bar)
        assert np.all(magnitude <= case3_box.mu_bar + width + 1e-12)
        signs.update(np.sign(scenario.vector).tolist())
    assert signs == {-1.0, 1.0}


def test_out_of_range_needs_a_nondegenerate_box(validation_service):
    with pytest.raises(UncertaintyError):
        list(validation_service.generate_scenarios(UncertaintySpec(), "out-of-range", n_scenarios=2))
    flat = UncertaintySpec(coordinates=[
        UncertainInjection(kind=InjectionKind.LOAD, index=0, bus=2, nominal=1.0, mu_bar=0.0),
    ])
    with pytest.raises(UncertaintyError, match="load\\[0\\]@2"):
        list(validation_service.generate_scenarios(flat, "out-of-range", n_scenarios=2))


def test_scenario_count_must_be_positive(validation_service, case3_box):
    with pytest.raises(UncertaintyError):
        list(validation_service.generate_scenarios(case3_box, n_scenarios=0))


def test_flat_profile_is_robust_on_the_feeder(validation_service, case2, case2_box):
    report = validation_service.validate(case2, fixed_setpoints(), case2_box, n_scenarios=25, seed=4)
    assert report.verdict == Verdict.ROBUST
    assert report.violation_count == 0
    assert report.divergence_count == 0
    assert report.violation_probability == 0.0
    assert set(report.family_histogram.values()) == {0}
    assert "divergence" in report.family_histogram
    assert len(report.scenarios) == 25

    gen_p = [e for e in report.envelope if e.family == "gen_p"]
    assert len(gen_p) == 1
    # lossless feeder: the unit follows the load deviation exactly
    assert 0.9 - 1e-8 <= gen_p[0].min_value <= gen_p[0].max_value <= 1.1 + 1e-8
    assert gen_p[0].upper_limit == pytest.approx(2.0)


def test_worker_pool_matches_serial_run(validation_service, case2, case2_box):
    serial = validation_service.validate(case2, fixed_setpoints(), case2_box, n_scenarios=12, seed=9, workers=1)
    pooled = validation_service.validate(case2, fixed_setpoints(), case2_box, n_scenarios=12, seed=9, workers=3)
    assert [r.model_dump() for r in pooled.scenarios] == [r.model_dump() for r in serial.scenarios]
    assert pooled.envelope == serial.envelope


def test_divergence_counts_as_violation(validation_service, case_service, two_bus_text):
    case = case_service.parse_case(two_bus_text.format(load=2000, r=0), "mcase")
    report = validation_service.validate(case, fixed_setpoints(), UncertaintySpec(), n_scenarios=3, seed=0)
    assert report.divergence_count == 3
    assert report.violation_count == 3
    assert report.family_histogram["divergence"] == 3
    assert report.verdict == Verdict.NOT_ROBUST
    assert report.envelope == []
    assert all(not r.converged and r.families == ["divergence"] for r in report.scenarios)


def test_eta_is_the_largest_setpoint_change(case2):
    eta = ValidationService.eta(fixed_setpoints((1.0,), (1.0,)), fixed_setpoints((1.2,), (0.9,)))
    assert eta == pytest.approx(0.2)
    with pytest.raises(UncertaintyError):
        ValidationService.eta(fixed_setpoints(), RobustSetpoints(
            case_name="x", mode=RobustMode.DETERMINISTIC, p_g=[1.0, 1.0], c_ii=[1.0, 1.0],
            participation=[0.5, 0.5], objective=0.0))


def test_report_frames(validation_service, case2, case2_box):
    report = validation_service.validate(case2, fixed_setpoints(), case2_box, n_scenarios=4, seed=2,
                                         reference=fixed_setpoints((1.1,), (1.0,)))
    assert report.eta == pytest.approx(0.1)
    frame = report.scenario_frame()
    assert list(frame["id"]) == [0, 1, 2, 3]
    assert "margin_voltage" in frame.columns
    summary = ValidationService.summary_frame({"flat": report})
    assert summary.loc[0, "verdict"] == "robust"
    assert summary.loc[0, "n_scenarios"] == 4


@pytest.mark.parametrize("name", ["case2", "case3"])
def test_robust_setpoints_survive_the_box_on_radial_cases(request, opf_service, robust_service,
                                                          validation_service, name):
    case = request.getfixturevalue(name)
    unc = opf_service.build_uncertainty(case, load_fraction=0.05)
    setpoints = robust_service.solve_robust(case, unc)
    report = validation_service.validate(case, setpoints, unc, n_scenarios=200, seed=5)
    assert report.divergence_count == 0
    assert report.violation_count == 0
    assert report.verdict == Verdict.ROBUST


@pytest.mark.parametrize("name", ["case2", "case3"])
def test_nominal_flow_keeps_the_scheduled_dispatch(request, opf_service, robust_service, pf_service, name):
    case = request.getfixturevalue(name)
    unc = opf_service.build_uncertainty(case, load_fraction=0.05)
    setpoints = robust_service.solve_robust(case, unc)
    nominal = Scenario(id=0, label=ScenarioLabel.IN_RANGE, mu=[0.0] * unc.size)
    pf = pf_service.run_pf(case, setpoints, nominal, unc)
    assert pf.converged
    # the relaxation is exact on a radial network, so no mismatch is left for AGC
    assert abs(pf.psi) <= 1e-7
    assert pf.p_g == pytest.approx(setpoints.p_g, abs=1e-7)


def test_envelope_follows_the_layout(validation_service, case3, case3_box):
    setpoints = RobustSetpoints(case_name="case3", mode=RobustMode.DETERMINISTIC, p_g=[0.8, 1.05],
                                c_ii=[1.0, 1.0], participation=case3.participation().tolist(), objective=0.0)
    report = validation_service.validate(case3, setpoints, case3_box, n_scenarios=10, seed=1)
    families = [entry.family for entry in report.envelope]
    assert families[0] == "flow"
    assert families.count("voltage") == case3.n_bus
    assert families.count("angle_diff") == len(case3.branches)
    for entry in report.envelope:
        assert entry.min_value <= entry.max_value


def test_meshed_case_throughput(validation_service, robust_service, opf_service, case14):
    setpoints = robust_service.solve_deterministic(case14)
    unc = opf_service.build_uncertainty(case14, load_fraction=0.05)
    report = validation_service.validate(case14, setpoints, unc, n_scenarios=1000, seed=0)
    assert len(report.scenarios) == 1000
    assert report.divergence_count == 0
    # 10000 scenarios per minute on one worker
    assert report.wall_time < 6.0
