import numpy as np
import pytest

from models.uncertainty import InjectionKind
from utils.exceptions import ModelBuildError, UncertaintyError


def solve(opf_service, program):
    solution, _ = opf_service.solve(program)
    assert solution.optimal, solution.status
    return solution


def test_two_bus_dispatch_cost(opf_service, case2):
    program = opf_service.build_deterministic(case2)
    solution = solve(opf_service, program)
    # lossless feeder: 1 pu at 10 $/pu-h plus the 2 $/h intercept
    assert solution.objective == pytest.approx(12.0, rel=1e-4)
    point = opf_service.operating_point(case2, program, solution.x)
    assert point["p_g"] == pytest.approx([1.0], abs=1e-4)


def test_rated_branch_stays_within_limit(opf_service, case3):
    program = opf_service.build_deterministic(case3)
    solution = solve(opf_service, program)
    limit = case3.branches[0].p_max
    assert limit == pytest.approx(0.8)
    for name in ("Pft[0]", "Ptf[0]"):
        assert abs(program.value(solution.x, name)) <= limit + 1e-5


def test_tighter_angle_band_never_lowers_cost(opf_service, case3):
    loose = solve(opf_service, opf_service.build_deterministic(case3, eps_theta=0.05))
    tight = solve(opf_service, opf_service.build_deterministic(case3, eps_theta=0.005))
    assert tight.objective >= loose.objective - 1e-4 * abs(loose.objective)


def test_invalid_angle_band_is_rejected(opf_service, case3):
    with pytest.raises(ModelBuildError):
        opf_service.build_deterministic(case3, eps_theta=0.0)


def test_uncertainty_box_follows_nominal_loads(opf_service, case3):
    unc = opf_service.build_uncertainty(case3, load_fraction=0.1)
    assert unc.size == 2
    assert all(c.kind == InjectionKind.LOAD for c in unc.coordinates)
    assert unc.mu_bar == pytest.approx([0.03, 0.15])
    assert unc.names == ["load[0]@2", "load[1]@3"]
    assert unc.stress_orientation().tolist() == [1.0, 1.0]


def test_uncertainty_fraction_out_of_range(opf_service, case3):
    with pytest.raises(UncertaintyError):
        opf_service.build_uncertainty(case3, load_fraction=1.5)
    with pytest.raises(UncertaintyError):
        opf_service.build_uncertainty(case3, load_fraction=0.1, gamma=3)


def test_zero_fraction_gives_empty_box(opf_service, case3):
    assert opf_service.build_uncertainty(case3).size == 0


def test_robust_blocks_shapes(opf_service, case3):
    unc = opf_service.build_uncertainty(case3, load_fraction=0.1)
    blocks = opf_service.assemble_robust_blocks(case3, unc)
    assert blocks.x_columns == ("Pg[0]", "Pg[1]", "cii[1]", "cii[2]")
    assert blocks.P.shape == (blocks.f.shape[0], 4)
    assert blocks.Q.shape == (blocks.f.shape[0], len(blocks.y_columns))
    assert blocks.M.shape[0] == blocks.e.shape[0]
    assert blocks.K_E.shape == (len(blocks.balance_hat_rows), 2)
    # psi enters the worst-case active balance at the two generator buses only
    assert np.count_nonzero(blocks.h_E) == 2

    rows = {name: k for k, name in enumerate(blocks.balance_hat_rows)}
    k_e = blocks.K_E.toarray()
    lr = case3.loads[0].lr
    assert lr == pytest.approx(1 / 3)
    assert abs(k_e[rows["Pbal_hat[2]"], 0]) == pytest.approx(1.0)
    assert abs(k_e[rows["Qbal_hat[2]"], 0]) == pytest.approx(lr)
    assert k_e[rows["Pbal_hat[3]"], 0] == 0.0

    summary = opf_service.blocks_summary(blocks)
    assert summary["columns"]["x"] == 4
    assert summary["uncertain"] == 2


def test_robust_primal_at_zero_deviation_matches_dispatch(opf_service, case3):
    unc = opf_service.build_uncertainty(case3, load_fraction=0.1)
    base = solve(opf_service, opf_service.build_deterministic(case3))
    robust = solve(opf_service, opf_service.build_robust_primal(case3, unc, np.zeros(unc.size)))
    assert robust.objective == pytest.approx(base.objective, rel=1e-4)


def test_load_deviation_raises_cost(opf_service, case3):
    unc = opf_service.build_uncertainty(case3, load_fraction=0.1)
    base = solve(opf_service, opf_service.build_robust_primal(case3, unc, np.zeros(unc.size)))
    stressed = solve(opf_service, opf_service.build_robust_primal(case3, unc, unc.mu_bar))
    assert stressed.objective >= base.objective - 1e-6


@pytest.fixture
def case3_res(case_service, case3):
    # 0.45 pu of RES at the largest load bus, rated 1.1 x its output
    return case_service.place_res(case3, 0.1)


def test_res_fraction_adds_res_coordinates(opf_service, case3_res):
    unc = opf_service.build_uncertainty(case3_res, load_fraction=0.05, res_fraction=0.05)
    kinds = [c.kind for c in unc.coordinates]
    assert kinds == [InjectionKind.LOAD, InjectionKind.LOAD, InjectionKind.RES]
    res = unc.coordinates[-1]
    assert res.bus == 3
    assert res.nominal == pytest.approx(0.45)
    assert res.mu_bar == pytest.approx(0.05 * 0.45)
    assert unc.stress_orientation().tolist() == [1.0, 1.0, -1.0]


def test_worst_case_res_rows_are_tighter(opf_service, case3_res):
    unc = opf_service.build_uncertainty(case3_res, res_fraction=0.05)
    program = opf_service.build_robust_primal(case3_res, unc, np.zeros(unc.size))
    bound = {name: program.b_in[k] for k, name in enumerate(program.in_rows)}
    unit = case3_res.res_units[0]
    e = bound["Qr[0]:ub"]
    e_hat = bound["Qr_hat[0]:ub"]
    assert e == pytest.approx(unit.q_limit)
    assert e_hat == pytest.approx(np.sqrt(unit.s_max ** 2 - (unit.p_r + unc.mu_bar[0]) ** 2))
    assert 0.0 < e_hat < e
    assert bound["Qr_hat[0]:lb"] == pytest.approx(e_hat)


def test_res_box_beyond_the_rating_names_the_unit(opf_service, case3_res):
    unc = opf_service.build_uncertainty(case3_res, res_fraction=0.2)
    with pytest.raises(ModelBuildError, match="RES unit 0 at bus 3"):
        opf_service.build_robust_primal(case3_res, unc, np.zeros(unc.size))


def test_mirror_rows_bound_the_opposite_agc_move(opf_service, case3):
    unc = opf_service.build_uncertainty(case3, load_fraction=0.05)
    program = opf_service.build_robust_primal(case3, unc, unc.mu_bar)
    rows = [program.in_rows[k] for k in program.rows_in_block("mirror", "in")]
    assert rows == ["Pg_mirror[0]:ub", "Pg_mirror[0]:lb", "Pg_mirror[1]:ub", "Pg_mirror[1]:lb"]
    a_in = program.a_in.tocsr()
    psi = program.index["psi"]
    hat = program.in_rows.index("Pg_hat[0]:ub")
    mirror = program.in_rows.index("Pg_mirror[0]:ub")
    assert a_in[mirror, psi] == pytest.approx(-a_in[hat, psi])
    assert a_in[hat, psi] == pytest.approx(case3.generators[0].participation)
