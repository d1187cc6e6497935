import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from pvagg.control import (
    ControllerConfig,
    UioError,
    build_augmented,
    controller_derivative,
    design_uio,
    estimate_disturbance,
    invert_controls,
    lut_block,
    normalise,
    pv_scales,
)
from pvagg.fleet import aggregate_params
from pvagg.grid import LfcParams, build_lfc, build_reference
from pvagg.panel import lut_column
from pvagg.sim import integrate
from pvagg.statespace import StateSpace


@pytest.fixture(scope="module")
def uio(controller):
    return controller.uio


# --- unknown-input observer --------------------------------------------------


def test_uio_matrices(uio):
    n = uio.A.shape[0]
    CE = uio.C @ uio.E
    assert CE[0, 0] == pytest.approx(-1 / (2 * 5.9746), rel=1e-12)
    assert np.allclose(uio.H, uio.E @ np.linalg.inv(CE.T @ CE) @ CE.T)
    assert np.allclose(uio.T, np.eye(n) - uio.H @ uio.C)
    assert np.allclose(uio.T @ uio.E, 0.0, atol=1e-15)
    assert np.all(np.linalg.eigvals(uio.F).real < 0)
    assert uio.care.residual < 1e-8


def test_uio_without_disturbance_is_luenberger():
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    ss = StateSpace(A, np.array([[0.0], [1.0]]), np.array([[1.0, 0.0]]), np.zeros((2, 1)))
    u = design_uio(ss)
    assert np.array_equal(u.H, np.zeros((2, 1)))
    assert np.array_equal(u.T, np.eye(2))
    assert np.allclose(u.F, A - u.K @ ss.C)


def test_uio_rank_condition():
    ss = StateSpace(-np.eye(2), np.eye(2)[:, :1], np.array([[1.0, 0.0]]), np.array([[0.0], [1.0]]))
    with pytest.raises(UioError):
        design_uio(ss)


def test_observer_error_ignores_disturbance(controller):
    u = controller.uio
    n = u.A.shape[0]
    e0 = np.linspace(0.01, 0.06, n)

    def error_trace(dfun):
        # plant and observer together; the error must not see d(t)
        def f(t, s):
            x, z = s[:n], s[n:]
            y = u.C @ x
            dx = u.A @ x + u.E[:, 0] * dfun(t)
            dz = u.F @ z + u.K @ y
            return np.concatenate([dx, dz])
        x0 = np.zeros(n)
        z0 = x0 - u.H @ (u.C @ x0) - e0
        tr = integrate(f, np.concatenate([x0, z0]), 0.5, 1e-4, stride=50)
        X = np.column_stack([tr[f"x{i}"] for i in range(2 * n)])
        xh = X[:, n:] + (X[:, :n] @ u.C.T) @ u.H.T
        return X[:, :n] - xh

    a = error_trace(lambda t: 0.0)
    b = error_trace(lambda t: 0.1 * np.sin(7 * t) + 0.05)
    assert np.allclose(a, b, atol=1e-10)
    # the error obeys e' = F e
    assert np.allclose(a[-1], expm(0.5 * u.F) @ a[0], atol=1e-9)


def test_estimate_disturbance_exact(uio):
    n = uio.A.shape[0]
    x = np.linspace(-0.01, 0.02, n)
    u = np.array([0.001, 0.0])
    d = 0.037
    ydot = uio.C @ (uio.A @ x + uio.B @ u + uio.E[:, 0] * d)
    assert estimate_disturbance(uio, x, ydot, u)[0] == pytest.approx(d, rel=1e-10)


def test_estimate_disturbance_linear(uio):
    n = uio.A.shape[0]
    x = np.zeros(n)
    u = np.zeros(2)
    ydots = [uio.C @ uio.E[:, 0] * d for d in (0.01, 0.02, 0.05)]
    est = [estimate_disturbance(uio, x, yd, u)[0] for yd in ydots]
    assert est[1] == pytest.approx(2 * est[0]) and est[2] == pytest.approx(5 * est[0])


def test_estimate_requires_full_rank(uio):
    import dataclasses
    bad = dataclasses.replace(uio, E=np.zeros_like(uio.E))
    with pytest.raises(UioError):
        estimate_disturbance(bad, np.zeros(uio.A.shape[0]), 0.0, np.zeros(2))


# --- augmented model and LQR -------------------------------------------------


def test_augmented_structure(controller):
    aug = controller.augmented
    n = controller.n
    assert aug.n == n + 2 == 8
    row = aug.A[n + 1]
    assert np.count_nonzero(row) == 1 and row[n] == 1.0
    assert np.all(aug.B[n + 1] == 0)


def test_error_row_is_exact_when_reference_equals_plant():
    # with reference == plant and identical inputs the error obeys  e' = -(D/2H) e
    grid = LfcParams()
    lfc = build_lfc(grid)
    plant = StateSpace(lfc.A, lfc.E * 0 + np.array([[0.0], [0.0], [1.0]]), lfc.C, lfc.E,
                       outputs=lfc.outputs)
    aug = build_augmented(plant, build_reference(grid.H_g, grid.R_g, grid))
    damp = grid.D / (2 * grid.H_g)
    assert aug.A[3, 3] == pytest.approx(-damp)
    assert np.allclose(aug.A[3, :3], lfc.A[2] + damp * lfc.C[0])


def test_lqr_solution(controller):
    assert controller.lqr_care.residual < 1e-6
    assert np.all(controller.closed_loop_eigvals().real < 0)
    P = controller.lqr_care.P
    assert np.allclose(P, P.T, atol=1e-10 * np.abs(P).max())


def test_normalise_preserves_spectrum(controller):
    sx, su = controller.sx, controller.su
    ss = StateSpace(np.arange(36.0).reshape(6, 6) - 40 * np.eye(6), np.ones((6, 2)), np.eye(6)[:1], np.ones((6, 1)))
    nn = normalise(ss, sx, su)
    assert np.allclose(np.sort_complex(ss.eigvals()), np.sort_complex(nn.eigvals()))
    x_n = np.ones(6)
    u_n = np.array([1.0, 2.0])
    assert np.allclose(sx * nn.derivative(x_n, u_n), ss.derivative(sx * x_n, su * u_n))


def test_pv_scales(shared):
    sx, su = pv_scales(shared, 116e6)
    assert su[0] == 116e6 and sx[3] == shared.V_dc0_ref


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(r_power=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(q_state=-1.0)


# --- table block and command distribution ------------------------------------


def test_lut_block_zero_and_branch(controller, lut, shared):
    agg = controller.agg
    assert lut_block(0.0, agg, lut, shared) == 0.0
    col = lut_column(lut, agg.s)
    full = col.max() * agg.p_r / shared.P_pa
    dv = lut_block(full * (1 - 1e-9), agg, lut, shared)
    k = col.size - 1 - np.argmax(col[::-1])  # clamped nodes below the MPP repeat the maximum
    assert dv == pytest.approx(lut.dv[k], abs=lut.dv[1] - lut.dv[0])


def test_invert_controls():
    cmds = invert_controls((-12.775, -7.730), 10)
    assert len(cmds) == 10 and len(set(cmds)) == 1
    assert (cmds[0].dv_pv, cmds[0].dv_dc_ref) == (-12.775, -7.730)
    assert invert_controls((0.0, 0.0), 3)[2].dv_pv == 0.0
    with pytest.raises(ValueError):
        invert_controls((0.0, 0.0), 0)


@settings(max_examples=200, deadline=None)
@given(a=st.floats(-60, 20), b=st.floats(-50, 50), n=st.integers(1, 50))
def test_invert_controls_round_trip(a, b, n):
    cmds = invert_controls((a, b), n)
    assert all(c.dv_pv == a and c.dv_dc_ref == b for c in cmds)


# --- running controller ------------------------------------------------------


def test_zero_output_gives_zero_control(controller):
    s = controller.initial_state()
    ds, sig = controller_derivative(controller, s, 0.0)
    assert np.all(ds == 0.0)
    assert sig.dP_ref == 0.0 and sig.dV_dc_ref == 0.0 and not sig.saturated
    assert controller.array_voltage(0.0) == 0.0


def test_saturation_is_clamped_and_flagged(controller):
    s = controller.initial_state()
    n, nr = controller.n, controller.reference.n
    s[n + nr] = -1e3  # large error integral drives the power command far past the headroom
    u, sig, _, _ = controller.control(s, 0.0)
    _, sig2 = controller.derivative(s, 0.0)
    assert sig.saturated and sig2.saturated
    assert sig.dP_ref in (controller.p_max, controller.p_min)
    assert sig.dP_ref != u[0]
    v = controller.array_voltage(10 * controller.p_max)
    assert lut.dv[0] <= v <= lut.dv[-1] if (lut := controller.lut) else True


def test_disturbance_estimate_linear(controller):
    s = controller.initial_state()
    a = controller.disturbance_estimate(s, -1e-4)
    b = controller.disturbance_estimate(s, -2e-4)
    assert b == pytest.approx(2 * a)
    assert a > 0  # falling frequency means added load


def test_design_is_deterministic(cfg, controller):
    from pvagg.cli import make_controller
    again = make_controller(cfg, controller.lut)
    assert np.array_equal(again.K_lqr, controller.K_lqr)


def test_aggregate_used_by_controller(cfg, controller):
    assert controller.agg == aggregate_params(cfg.event_fleet)
