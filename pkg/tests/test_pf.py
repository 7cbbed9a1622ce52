import math

import numpy as np
import pytest

from models.robust import RobustMode, RobustSetpoints
from models.uncertainty import Scenario, ScenarioLabel, UncertaintySpec
import services.pf_service as pf_module
from services.pf_service import PowerFlowService, QuantityLayout, dsbus_dv
from utils.exceptions import ModelBuildError, UncertaintyError

NOMINAL = Scenario(id=0, label=ScenarioLabel.IN_RANGE, mu=[])


def fixed_setpoints(p_g, c_ii, participation=None, name="tiny"):
    return RobustSetpoints(case_name=name, mode=RobustMode.DETERMINISTIC, p_g=p_g, c_ii=c_ii,
                           participation=participation or [1.0], objective=0.0)


def test_lossless_feeder_matches_closed_form(pf_service, case2):
    pf = pf_service.run_pf(case2, fixed_setpoints([1.0], [1.0]), NOMINAL, UncertaintySpec())
    assert pf.converged
    # Q balance at the load bus gives V2 = cos(delta); P balance gives 5 sin(2 delta) = -1
    delta = -0.5 * math.asin(0.2)
    assert pf.theta[1] == pytest.approx(delta, abs=1e-8)
    assert pf.v[1] == pytest.approx(math.cos(delta), abs=1e-8)
    assert pf.psi == pytest.approx(0.0, abs=1e-8)
    assert pf.p_ft[0] == pytest.approx(1.0, abs=1e-8)
    assert pf.p_g[0] == pytest.approx(1.0, abs=1e-8)


def test_losses_are_picked_up_by_the_slack(pf_service, case_service, two_bus_text):
    case = case_service.parse_case(two_bus_text.format(load=100, r=0.02), "mcase")
    pf = pf_service.run_pf(case, fixed_setpoints([1.0], [1.0]), NOMINAL, UncertaintySpec())
    assert pf.converged
    assert pf.psi > 0.0
    assert pf.p_g[0] == pytest.approx(1.0 + pf.psi)
    assert pf.p_ft[0] + pf.p_tf[0] == pytest.approx(pf.psi, abs=1e-8)


def test_load_deviation_shifts_the_mismatch(pf_service, opf_service, case2):
    unc = opf_service.build_uncertainty(case2, load_fraction=0.1)
    scenario = Scenario(id=3, label=ScenarioLabel.IN_RANGE, mu=[0.1])
    pf = pf_service.run_pf(case2, fixed_setpoints([1.0], [1.0]), scenario, unc)
    assert pf.converged
    assert pf.scenario_id == 3
    assert pf.psi == pytest.approx(0.1, abs=1e-8)


def test_setpoints_from_the_relaxation_run(pf_service, robust_service, case3):
    setpoints = robust_service.solve_deterministic(case3)
    pf = pf_service.run_pf(case3, setpoints, NOMINAL, UncertaintySpec())
    assert pf.converged
    assert pf.iterations <= pf_service.settings.PF_MAX_ITER
    # generator terminals hold their scheduled magnitudes
    assert pf.v[:2] == pytest.approx(setpoints.v_g)
    assert abs(pf.psi) < 0.05


def test_overloaded_feeder_diverges_without_raising(pf_service, case_service, two_bus_text):
    case = case_service.parse_case(two_bus_text.format(load=2000, r=0), "mcase")
    pf = pf_service.run_pf(case, fixed_setpoints([1.0], [1.0]), NOMINAL, UncertaintySpec())
    assert not pf.converged
    assert pf.message


def test_dimension_checks(pf_service, opf_service, case2):
    with pytest.raises(ModelBuildError):
        pf_service.run_pf(case2, fixed_setpoints([1.0, 0.5], [1.0, 1.0], [0.5, 0.5]), NOMINAL, UncertaintySpec())
    unc = opf_service.build_uncertainty(case2, load_fraction=0.1)
    scenario = Scenario(id=0, label=ScenarioLabel.IN_RANGE, mu=[0.1, 0.2])
    with pytest.raises(UncertaintyError):
        pf_service.run_pf(case2, fixed_setpoints([1.0], [1.0]), scenario, unc)


@pytest.mark.parametrize("dense", [False, True])
def test_jacobian_matches_finite_differences(case_service, case3, dense):
    ybus = case_service.build_admittance(case3)
    if dense:
        ybus = ybus.toarray()
    rng = np.random.default_rng(7)
    vm = 1.0 + 0.05 * rng.standard_normal(3)
    va = 0.1 * rng.standard_normal(3)
    v = vm * np.exp(1j * va)
    ds_dvm, ds_dva = dsbus_dv(ybus, v)
    if not dense:
        ds_dvm, ds_dva = ds_dvm.toarray(), ds_dva.toarray()

    def sbus(m, a):
        x = m * np.exp(1j * a)
        return x * np.conj(ybus @ x)

    h = 1e-7
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        fd_vm = (sbus(vm + step, va) - sbus(vm - step, va)) / (2 * h)
        fd_va = (sbus(vm, va + step) - sbus(vm, va - step)) / (2 * h)
        assert np.allclose(ds_dvm[:, k], fd_vm, atol=1e-6)
        assert np.allclose(ds_dva[:, k], fd_va, atol=1e-6)


def test_flow_margin_is_relative_to_rating():
    record = PowerFlowService._margin("flow", "branch[0]:1-2", 1.03, None, 1.0)
    assert record.margin == pytest.approx(-0.03)
    assert record.limit == 1.0


def test_margin_uses_the_nearer_bound():
    high = PowerFlowService._margin("voltage", "bus[2]", 1.12, 0.9, 1.1)
    assert high.margin == pytest.approx(-0.02)
    assert high.limit == 1.1
    low = PowerFlowService._margin("voltage", "bus[2]", 0.95, 0.9, 1.1)
    assert low.margin == pytest.approx(0.05)
    assert low.limit == 0.9


def test_high_terminal_voltage_is_flagged(pf_service, case2):
    pf = pf_service.run_pf(case2, fixed_setpoints([1.0], [1.3]), NOMINAL, UncertaintySpec())
    assert pf.converged
    evaluation = pf_service.evaluate_constraints(case2, pf)
    assert evaluation.violated
    assert "voltage" in evaluation.violated_families
    assert evaluation.worst["voltage"].element == "bus[1]"
    # no rated branch in this case
    assert "flow" not in evaluation.worst


def test_monitored_quantities_order(pf_service, case2):
    pf = pf_service.run_pf(case2, fixed_setpoints([1.0], [1.0]), NOMINAL, UncertaintySpec())
    families = [q[0] for q in pf_service.monitored_quantities(case2, pf)]
    assert families == ["gen_p", "gen_q", "ramp", "voltage", "angle", "voltage", "angle", "angle_diff"]


def test_sparse_newton_agrees_with_dense(pf_service, robust_service, opf_service, validation_service, case14,
                                         monkeypatch):
    setpoints = robust_service.solve_deterministic(case14)
    unc = opf_service.build_uncertainty(case14, load_fraction=0.05)
    scenario = next(validation_service.generate_scenarios(unc, n_scenarios=1, seed=3))
    dense = pf_service.run_pf(case14, setpoints, scenario, unc)
    monkeypatch.setattr(pf_module, "DENSE_BUS_LIMIT", 0)
    sparse = pf_service.run_pf(case14, setpoints, scenario, unc)
    assert dense.converged and sparse.converged
    assert sparse.v == pytest.approx(dense.v, abs=1e-9)
    assert sparse.theta == pytest.approx(dense.theta, abs=1e-9)
    assert sparse.psi == pytest.approx(dense.psi, abs=1e-9)


def test_prepared_network_is_reused_across_scenarios(pf_service, opf_service, case2):
    unc = opf_service.build_uncertainty(case2, load_fraction=0.1)
    setpoints = fixed_setpoints([1.0], [1.0])
    network = pf_service.prepare(case2, setpoints, unc)
    for k, mu in enumerate((-0.1, 0.0, 0.05)):
        scenario = Scenario(id=k, label=ScenarioLabel.IN_RANGE, mu=[mu])
        shared = pf_service.run_pf(case2, setpoints, scenario, unc, network=network)
        fresh = pf_service.run_pf(case2, setpoints, scenario, unc)
        assert shared.psi == pytest.approx(fresh.psi, abs=1e-12)
        assert shared.v == pytest.approx(fresh.v, abs=1e-12)
        assert shared.psi == pytest.approx(mu, abs=1e-8)


def test_prepare_checks_the_setpoint_shape(pf_service, case2):
    with pytest.raises(ModelBuildError):
        pf_service.prepare(case2, fixed_setpoints([1.0, 0.5], [1.0, 1.0], [0.5, 0.5]), UncertaintySpec())


def test_vectorized_evaluation_matches_the_record_loop(pf_service, robust_service, case14):
    setpoints = robust_service.solve_deterministic(case14)
    pf = pf_service.run_pf(case14, setpoints, NOMINAL, UncertaintySpec())
    layout = QuantityLayout(case14, setpoints.participation)
    values = layout.values(pf)
    # push a few quantities past their bounds
    values[layout.groups["voltage"][3]] = 1.2
    values[layout.groups["gen_p"][0]] = -0.5
    vectorized = pf_service.evaluate_values(layout, values)
    looped = pf_service.evaluate_constraints(case14, pf, quantities=layout.quantities(values))
    assert vectorized.violated_families == looped.violated_families
    assert {"gen_p", "voltage"} <= set(vectorized.violated_families)
    assert [v.element for v in vectorized.violations] == [v.element for v in looped.violations]
    for family, worst in looped.worst.items():
        assert vectorized.worst[family].margin == pytest.approx(worst.margin)
        assert vectorized.worst[family].element == worst.element


def test_layout_follows_monitored_quantities(pf_service, case3):
    setpoints = fixed_setpoints([1.0, 0.8], [1.0, 1.0], [0.75, 0.25])
    pf = pf_service.run_pf(case3, setpoints, NOMINAL, UncertaintySpec())
    layout = QuantityLayout(case3, setpoints.participation)
    quantities = pf_service.monitored_quantities(case3, pf, setpoints.participation)
    assert [q[:2] for q in quantities] == [entry[:2] for entry in layout.entries]
    assert [q[2] for q in quantities] == pytest.approx(layout.values(pf).tolist())
    assert quantities[0][0] == "flow"
    assert quantities[0][2] == pytest.approx(max(abs(pf.p_ft[0]), abs(pf.p_tf[0])))
