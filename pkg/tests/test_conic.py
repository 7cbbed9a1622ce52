import numpy as np
import pytest

from models.conic import SolverSettings
from services.conic_service import ConicService, ProgramBuilder
from services.ipm_service import InteriorPointSolver
from utils.exceptions import ModelBuildError, SolverError, UnknownConstraintError


@pytest.fixture
def conic_service():
    return ConicService()


@pytest.fixture
def solver():
    return InteriorPointSolver(SolverSettings(tolerance=1e-9))


def socp():
    """min t s.t. ||(x1, x2)|| <= t, x1 = 3, x2 = 4"""
    builder = ProgramBuilder("socp")
    t = builder.add_var("t", cost=1.0)
    x1 = builder.add_var("x1")
    x2 = builder.add_var("x2")
    builder.add_eq("fix_x1", {x1: 1.0}, 3.0, "fix")
    builder.add_eq("fix_x2", {x2: 1.0}, 4.0, "fix")
    builder.add_soc("norm", [x1, x2], t)
    return builder.seal()


def test_duplicate_variable_is_rejected():
    builder = ProgramBuilder()
    builder.add_var("x")
    with pytest.raises(ModelBuildError):
        builder.add_var("x")


def test_range_rows_skip_infinite_sides():
    builder = ProgramBuilder()
    x = builder.add_var("x")
    builder.add_range("r", {x: 1.0}, -np.inf, 2.0, "limits")
    builder.add_range("s", {x: 2.0}, 1.0, 3.0, "limits")
    program = builder.seal()
    assert program.in_rows == ("r:ub", "s:ub", "s:lb")
    assert program.b_in.tolist() == [2.0, 3.0, -1.0]
    assert program.rows_in_block("limits", "in") == [0, 1, 2]


def test_standard_form_has_one_block_per_cone(conic_service):
    form = conic_service.assemble_standard_form(socp())
    assert form.dims.q == (3,)
    # the cone head bound is implied by the cone itself
    assert form.dims.l == 0
    assert form.g_names == ("soc:norm[0]", "soc:norm[1]", "soc:norm[2]")


def test_socp_optimum_and_multipliers(conic_service, solver):
    program = socp()
    form = conic_service.assemble_standard_form(program)
    solution = solver.solve(form)
    assert solution.optimal
    assert solution.objective == pytest.approx(5.0, abs=1e-6)
    values = conic_service.named_values(program, solution.x)
    assert values["t"] == pytest.approx(5.0, abs=1e-6)

    duals = conic_service.extract_duals(solution, program, form)
    # d(objective)/d(rhs) of the fixing rows is x_i / t
    assert conic_service.multiplier(duals, "fix_x1") == pytest.approx(0.6, abs=1e-5)
    assert conic_service.multiplier(duals, "fix_x2") == pytest.approx(0.8, abs=1e-5)
    assert duals.loc["fix_x1", "block"] == "fix"
    with pytest.raises(UnknownConstraintError):
        conic_service.multiplier(duals, "nope")

    residuals = conic_service.residuals(program, solution.x)
    assert residuals["equality"] < 1e-7
    assert residuals["cone"] < 1e-7


def test_equality_multiplier_sign_convention(conic_service, solver):
    builder = ProgramBuilder("fix")
    x = builder.add_var("x", cost=1.0)
    builder.add_eq("pin", {x: 1.0}, 3.0, "fix")
    program = builder.seal()
    solution = solver.solve(conic_service.assemble_standard_form(program))
    duals = conic_service.extract_duals(solution, program)
    assert conic_service.multiplier(duals, "pin") == pytest.approx(1.0, abs=1e-6)


def test_duals_of_a_failed_solve_are_refused(conic_service, solver):
    builder = ProgramBuilder("infeasible")
    x = builder.add_var("x", lower=1.0, cost=1.0)
    builder.add_le("cap", {x: 1.0}, 0.0, "limits")
    program = builder.seal()
    solution = solver.solve(conic_service.assemble_standard_form(program))
    assert not solution.optimal
    with pytest.raises(SolverError):
        conic_service.extract_duals(solution, program)


def test_dump_program_lists_rows_and_cones(conic_service):
    text = conic_service.dump_program(socp())
    assert "minimize +1 t +0" in text
    assert "eq fix_x1 [fix]: +1 x1 = 3" in text
    assert "soc norm: ||(x1, x2)|| <= t" in text
