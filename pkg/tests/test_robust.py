import itertools

import numpy as np
import pytest

from models.robust import RobustMode
from services.robust_service import orientation_of
from utils.exceptions import ModelBuildError, SolverError, UncertaintyError


@pytest.fixture
def case3_box(opf_service, case3):
    return opf_service.build_uncertainty(case3, load_fraction=0.05)


@pytest.fixture
def case3_robust(robust_service, case3, case3_box):
    return robust_service.solve_robust(case3, case3_box)


def test_deterministic_setpoints(robust_service, case2):
    setpoints = robust_service.solve_deterministic(case2)
    assert setpoints.mode == RobustMode.DETERMINISTIC
    assert setpoints.objective == pytest.approx(12.0, rel=1e-4)
    assert setpoints.participation == [1.0]
    # p_g = 1 with p_max 2 and ramp 1.5: AGC can move the unit by -1 .. +1
    low, high = setpoints.psi_window
    assert low == pytest.approx(-1.0, abs=1e-4)
    assert high == pytest.approx(1.0, abs=1e-4)


def test_deterministic_infeasible_load(robust_service, case_service, two_bus_text):
    case = case_service.parse_case(two_bus_text.format(load=300, r=0), "mcase")
    with pytest.raises(SolverError) as info:
        robust_service.solve_deterministic(case)
    assert info.value.status is not None


def test_robust_costs_at_least_the_dispatch(robust_service, case3, case3_robust):
    deterministic = robust_service.solve_deterministic(case3)
    assert case3_robust.mode == RobustMode.FULL
    assert case3_robust.objective >= deterministic.objective - 1e-4 * abs(deterministic.objective)
    assert len(case3_robust.p_g) == 2
    assert len(case3_robust.c_ii) == 2


def test_worst_case_is_a_box_vertex(case3_box, case3_robust):
    assert case3_robust.coordinate_names == case3_box.names
    assert np.abs(case3_robust.mu_star) == pytest.approx(case3_box.mu_bar)
    assert len(case3_robust.r_values) == case3_box.size
    assert case3_robust.orientation_rounds >= 1
    assert not case3_robust.saturated


def test_strong_duality_cross_check(robust_service, case3, case3_box, case3_robust):
    report = robust_service.cross_check_strong_duality(case3, case3_box, case3_robust)
    assert report.primal_status == "optimal"
    assert report.relative_gap < 1e-5
    assert report.max_setpoint_diff <= 4e-4


def test_budget_is_monotone(robust_service, case3, case3_box, case3_robust):
    none = robust_service.select_budget(case3, case3_box, 0)
    one = robust_service.select_budget(case3, case3_box, 1)
    deterministic = robust_service.solve_deterministic(case3)
    tol = 1e-4 * abs(case3_robust.objective)
    assert none.setpoints.objective == pytest.approx(deterministic.objective, rel=1e-4)
    assert none.setpoints.objective <= one.setpoints.objective + tol
    assert one.setpoints.objective <= case3_robust.objective + tol
    assert one.full_objective == pytest.approx(case3_robust.objective, rel=1e-4)

    assert sum(one.alpha) == 1.0
    assert one.setpoints.mode == RobustMode.BUDGET
    assert one.setpoints.gamma == 1
    assert sorted(one.ranking) == [0, 1]
    assert one.alpha[one.ranking[0]] == 1.0


def test_budget_out_of_range(robust_service, case3, case3_box):
    with pytest.raises(UncertaintyError):
        robust_service.select_budget(case3, case3_box, 3)


def test_dual_rc_mode_checks(robust_service, case3, case3_box):
    with pytest.raises(ModelBuildError):
        robust_service.build_dual_rc(case3, case3_box, mode="deterministic")
    with pytest.raises(ModelBuildError, match="alpha"):
        robust_service.build_dual_rc(case3, case3_box, mode="budget")
    with pytest.raises(ModelBuildError):
        robust_service.build_dual_rc(case3, case3_box, mode="budget", alpha=np.array([0.5, 1.0]))


def test_dual_rc_exposes_stationarity_rows(robust_service, case3, case3_box):
    drc = robust_service.build_dual_rc(case3, case3_box)
    assert drc.x_rows == ("stat:Pg[0]", "stat:Pg[1]", "stat:cii[1]", "stat:cii[2]")
    assert drc.psi_row == "stat:psi"
    assert len(drc.stationarity_rows) == drc.primal.n_var
    assert drc.interval == pytest.approx(case3_box.mu_bar)
    assert drc.big_m > 0


def test_participation_refinement_keeps_factors_normalized(robust_service, case3, case3_box, case3_robust):
    refinement = robust_service.refine_participation(case3, case3_box, case3_robust)
    if refinement.status == "optimal":
        assert sum(refinement.participation) == pytest.approx(1.0, abs=1e-6)
        assert min(refinement.participation) >= -1e-6
    else:
        assert refinement.participation == case3_robust.participation
        assert refinement.message


def test_exactness_check_runs_both_senses(robust_service, case3, case3_box, case3_robust):
    report = robust_service.exactness_check(case3, case3_box, case3_robust)
    assert [r.sense for r in report.base] == ["max", "min"]
    assert [r.sense for r in report.worst_case] == ["max", "min"]
    summary = report.summary()
    assert set(summary) == {"base_cone_residual", "base_angle_residual",
                            "worst_case_cone_residual", "worst_case_angle_residual"}
    best = report.best_base
    if best is not None:
        assert best.cone_residual >= 0.0


def test_robust_objective_matches_vertex_enumeration(opf_service, case3, case3_box, case3_robust):
    best = -np.inf
    for signs in itertools.product((-1.0, 1.0), repeat=case3_box.size):
        program = opf_service.build_robust_primal(case3, case3_box, np.array(signs) * case3_box.mu_bar)
        solution, _ = opf_service.solve(program)
        assert solution.optimal
        best = max(best, solution.objective)
    assert case3_robust.objective == pytest.approx(best, rel=1e-5)


def test_orientation_ties_follow_the_largest_sensitivity():
    # solver noise on a near-zero sensitivity must not flip the vertex
    assert orientation_of(np.array([-3e-7, 2.0, -1.5])).tolist() == [1.0, 1.0, -1.0]
    assert orientation_of(np.array([-5e-7])).tolist() == [1.0]
    assert orientation_of(np.array([-4e-3, 1e4])).tolist() == [1.0, 1.0]
    assert orientation_of(np.array([-4e-3, 1.0])).tolist() == [-1.0, 1.0]
    assert orientation_of(np.zeros(0)).size == 0


def test_robust_solve_reports_the_normalized_split(case3_box, case3_robust):
    assert case3_robust.warnings == []
    assert case3_robust.complementarity == [0.0] * case3_box.size
    assert case3_robust.complementarity_max == 0.0
    assert len(case3_robust.split_overlap) == case3_box.size
    assert min(case3_robust.split_overlap) >= -1e-9


def test_full_budget_matches_the_full_counterpart(robust_service, case3, case3_box, case3_robust):
    selection = robust_service.select_budget(case3, case3_box, case3_box.size)
    assert selection.alpha == [1.0] * case3_box.size
    assert selection.setpoints.objective == pytest.approx(case3_robust.objective, rel=1e-6)
    assert selection.setpoints.mu_star == pytest.approx(case3_robust.mu_star)
    assert selection.setpoints.x_vector == pytest.approx(case3_robust.x_vector, abs=4e-4)


def test_budget_is_monotone_on_the_meshed_case(robust_service, opf_service, case14):
    unc = opf_service.build_uncertainty(case14, load_fraction=0.05)
    objectives = []
    for gamma in (0, 1, 3, 5, unc.size):
        objectives.append(robust_service.select_budget(case14, unc, gamma).setpoints.objective)
    tol = 1e-6 * abs(objectives[-1])
    assert all(low <= high + tol for low, high in zip(objectives, objectives[1:]))
    assert objectives[-1] > objectives[0]


def test_meshed_dispatch_and_exactness_at_defaults(robust_service, opf_service, case14):
    setpoints = robust_service.solve_deterministic(case14)
    assert setpoints.objective > 0.0
    assert len(setpoints.p_g) == len(case14.generators)
    unc = opf_service.build_uncertainty(case14, load_fraction=0.05)
    report = robust_service.exactness_check(case14, unc, setpoints)
    assert [r.status for r in report.base + report.worst_case] == ["optimal"] * 4
    assert report.best_base is not None


def test_radial_feeder_relaxation_is_exact(robust_service, opf_service, case2):
    unc = opf_service.build_uncertainty(case2, load_fraction=0.1)
    setpoints = robust_service.solve_robust(case2, unc)
    report = robust_service.exactness_check(case2, unc, setpoints)
    assert report.best_base.cone_residual <= 1e-6
    assert report.best_worst_case.cone_residual <= 1e-6
    assert report.exact

