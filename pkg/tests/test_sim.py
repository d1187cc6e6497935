import numpy as np
import pytest
from scipy.integrate import trapezoid

from oracles import linear_response
from pvagg.fleet import Fleet
from pvagg.panel import lut_forward
from pvagg.sim import (
    IntegrationError,
    Metrics,
    SimTrace,
    compare_traces,
    compute_metrics,
    integrate,
    run_frequency_event,
    unit_commands,
)

# --- integrator ----------------------------------------------------------------


def test_exponential_decay():
    tr = integrate(lambda t, x: -x, np.array([1.0]), 1.0, 1e-3)
    assert tr["x0"][-1] == pytest.approx(np.exp(-1.0), abs=1e-8)
    assert tr.t[-1] == pytest.approx(1.0)


def test_linear_system_against_expm():
    A = np.array([[0.0, 1.0, 0.0], [-4.0, -0.4, 1.0], [0.0, 0.0, -2.0]])
    b = np.array([0.0, 0.0, 1.0])
    tr = integrate(lambda t, x: A @ x + b, np.array([1.0, 0.0, 0.0]), 2.0, 1e-3, stride=200)
    exact = linear_response(A, b[:, None], np.array([1.0]), np.array([1.0, 0.0, 0.0]), tr.t)
    X = np.column_stack([tr[f"x{i}"] for i in range(3)])
    assert len(tr) == 11
    assert np.max(np.abs(X - exact)) <= 1e-6


def test_fourth_order_convergence():
    def f(t, x):
        return np.array([x[1], -x[0]])
    errs = [abs(integrate(f, np.array([1.0, 0.0]), 2.0, h)["x0"][-1] - np.cos(2.0)) for h in (0.1, 0.05)]
    assert 14.0 < errs[0] / errs[1] < 18.0


def test_time_dependent_forcing():
    tr = integrate(lambda t, x: np.array([np.cos(t)]), np.zeros(1), 1.0, 1e-3)
    assert tr["x0"][-1] == pytest.approx(np.sin(1.0), abs=1e-12)


def test_blowup_raises_with_partial_trace():
    with pytest.raises(IntegrationError) as err, np.errstate(over="ignore"):
        integrate(lambda t, x: x**2, np.array([1.0]), 2.0, 1e-3, stride=10)
    partial = err.value.trace
    assert 0 < len(partial) < 200
    assert np.all(np.isfinite(partial["x0"]))
    assert isinstance(err.value, FloatingPointError)


def test_bad_step():
    with pytest.raises(ValueError):
        integrate(lambda t, x: -x, np.ones(1), 1.0, 0.0)


# --- traces --------------------------------------------------------------------


def test_trace_invariants(tmp_path):
    tr = SimTrace(np.arange(5) * 0.1)
    tr.add("a", np.arange(5.0))
    with pytest.raises(KeyError):
        tr.add("a", np.zeros(5))
    tr.add("a", np.ones(5), replace=True)
    assert tr["a"][0] == 1.0
    with pytest.raises(ValueError):
        tr.add("b", np.zeros(4))
    with pytest.raises(ValueError):
        SimTrace(np.array([0.0, 0.1, 0.3]))
    assert "a" in tr and "b" not in tr and tr.dt == pytest.approx(0.1)
    text = tr.to_csv(tmp_path / "t.csv")
    assert text.splitlines()[0] == "t_s,a"
    back = SimTrace.from_csv(tmp_path / "t.csv")
    assert np.allclose(back.t, tr.t) and np.array_equal(back["a"], tr["a"])


def test_compare_traces_identical():
    tr = SimTrace(np.arange(10) * 0.1)
    tr.add("y", np.sin(np.arange(10.0)))
    e = compare_traces(tr, tr, "y")
    assert e["steady_state_error"] == 0.0 and e["peak_error"] == 0.0


# --- validation runs -----------------------------------------------------------


def test_array_voltage_step_raises_power(validation_runs):
    b = validation_runs["dV_PV"].benchmark
    pre = b.t < 1.5
    assert np.allclose(b["dP_PV_a"][pre], 0.0, atol=1e-6)
    assert b["dP_PV_a"][-1] > 0


def test_benchmark_steady_state_matches_table(cfg, lut, validation_runs):
    f = cfg.validation_fleet
    vc = cfg.validation_commands
    expect = np.sum(f.p_r / cfg.shared.P_pa * lut_forward(lut, np.array(vc.dV_PV), f.s))
    assert validation_runs["dV_PV"].benchmark["dP_PV_a"][-1] == pytest.approx(expect, rel=1e-3)


def test_zero_command_is_equilibrium(cfg, lut):
    from pvagg.sim import simulate_benchmark
    f = Fleet.from_units(list(cfg.validation_fleet)[:2])
    tr = simulate_benchmark(f, cfg.shared, lut, np.zeros(2), np.zeros(2), t_step=0.01, t_end=0.05, stride=50)
    assert np.max(np.abs(tr["dP_PV_a"])) < 1e-6
    assert np.max(np.abs(tr["dV_dc_a"])) < 1e-9


def test_dc_reference_step_spikes_then_settles(validation_runs):
    b = validation_runs["dV_dc_ref"].benchmark
    peak = np.max(np.abs(b["dP_PV_a"]))
    assert peak > 1e3
    assert abs(b["dP_PV_a"][-1]) < 1e-3 * peak
    assert np.mean(b["dV_dc_a"][-10:]) == pytest.approx(
        np.dot(np.array(validation_runs["dV_dc_ref"].u_agg), [0.0, 1.0]), abs=0.05)


@pytest.mark.parametrize("case", ["dV_PV", "dV_dc_ref"])
def test_energy_conservation(validation_runs, case):
    b = validation_runs[case].benchmark
    de = b["E_dc"] - b["E_dc"][0]
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (b["P_imbalance"][1:] + b["P_imbalance"][:-1]) * np.diff(b.t))])
    assert np.max(np.abs(de - integral)) <= 0.01 * np.max(np.abs(de))
    assert trapezoid(b["P_imbalance"], b.t) == pytest.approx(integral[-1])


def test_validation_aggregate_inputs(validation_runs):
    assert validation_runs["dV_PV"].u_agg[1] == 0.0
    assert validation_runs["dV_dc_ref"].u_agg[0] == 0.0


# --- metrics -------------------------------------------------------------------


def _trace(values, dt=0.01):
    tr = SimTrace(np.arange(len(values)) * dt)
    tr.add("f_controlled_hz", np.asarray(values, dtype=float))
    return tr


def test_metrics_constant():
    m = compute_metrics(_trace(np.full(200, 60.0)))
    assert (m.nadir_hz, m.rocof_hz_s, m.settling_hz) == (60.0, 0.0, 60.0)


def test_metrics_ramp():
    f = 60.0 - 0.1 * np.arange(300) * 0.01
    m = compute_metrics(_trace(f))
    assert m.rocof_hz_s == pytest.approx(0.1, rel=1e-9)
    assert m.nadir_hz == pytest.approx(f[-1])


def test_metrics_settling():
    f = np.concatenate([np.full(100, 60.0), np.full(900, 59.618)])
    assert compute_metrics(_trace(f)).settling_hz == pytest.approx(59.618)


def test_metrics_tracking_needs_reference():
    tr = _trace(np.full(50, 60.0))
    with pytest.raises(KeyError):
        compute_metrics(tr, tracking=True)
    tr.add("ref", np.full(50, 59.97))
    assert compute_metrics(tr, ref_column="ref").tracking_error_pct == pytest.approx(0.05)
    assert isinstance(compute_metrics(tr), Metrics)


# --- frequency event -------------------------------------------------------------


def _short_event(cfg, lut, ctrl, d, t_event=0.05, t_end=0.25):
    return run_frequency_event(cfg.grid, cfg.event_fleet, cfg.shared, lut, ctrl, d, t_event, t_end,
                               dt=cfg.run.dt, stride=100)


def test_no_disturbance_stays_flat(cfg, lut, controller):
    tr = _short_event(cfg, lut, controller, 0.0)
    assert np.max(np.abs(tr["f_controlled_hz"] - 60.0)) < 1e-9
    assert np.max(np.abs(tr["dP_PV_total_W"])) < 1e-3


def test_event_deterministic(cfg, lut, controller):
    a = _short_event(cfg, lut, controller, 0.086)
    b = _short_event(cfg, lut, controller, 0.086)
    assert a.to_csv() == b.to_csv()


def test_event_ordering(event_trace):
    m = compute_metrics(event_trace)
    assert m.nadir_hz <= m.settling_hz <= 60.0
    unc = compute_metrics(event_trace, "f_uncontrolled_hz")
    assert m.nadir_hz >= unc.nadir_hz
    assert m.rocof_hz_s < unc.rocof_hz_s


def test_event_pre_disturbance_quiet(event_trace):
    pre = event_trace.t < 1.0
    assert np.all(event_trace["f_controlled_hz"][pre] == 60.0)
    assert np.all(event_trace["d_pu"][pre] == 0.0)


def test_unit_commands_identical(event_trace, cfg):
    cmds = unit_commands(event_trace, len(cfg.event_fleet))
    assert len(set(cmds)) == 1
    assert cmds[0].dv_pv == event_trace["dV_PV_a_V"][-1]


def test_pv_power_sums_per_unit(event_trace, cfg):
    total = sum(event_trace[f"dP_PV_{i}_W"] for i in range(len(cfg.event_fleet)))
    assert np.allclose(total, event_trace["dP_PV_total_W"], rtol=1e-12, atol=1e-6)


def test_energy_release_proportional_to_rating(cfg, lut):
    from pvagg.sim import simulate_benchmark
    f = cfg.validation_fleet
    tr = simulate_benchmark(f, cfg.shared, lut, np.zeros(len(f)), np.full(len(f), -7.73),
                            t_step=0.01, t_end=0.3, stride=10)
    release = np.array([-tr[f"E_dc_{i}"].min() for i in range(len(f))])
    per_watt = release / f.p_r
    assert np.all(np.abs(per_watt / per_watt.mean() - 1) <= 0.05)
