"""Supervisory frequency-support controller.

Signal flow: the unknown-input observer estimates the combined grid + PV
state and, from a filtered output derivative, the load disturbance. The
estimate drives a reference grid with the desired inertia and droop. An LQR
on [estimated state, tracking error, error integral] produces the aggregate
power and DC-voltage references. The power reference goes through the
inverse panel table at the fleet's mean irradiance, and the resulting
aggregate commands are handed unchanged to every unit.

Synthesis is done in per-unit coordinates (PV voltages on the DC-link base,
PV powers and currents on the system base) so that the Riccati equations are
well conditioned; the running controller works on physical signals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .care import CareError, CareSolution, solve_care
from .fleet import AggregateParams, SharedParams
from .grid import CombinedSystem
from .panel import LutSaturation, PanelLut, invert_column, lut_column
from .statespace import StateSpace


class UioError(RuntimeError):
    pass


@dataclass
class ControllerConfig:
    H_ref: float = 6.2365
    R_ref: float = 0.0766
    q_state: float = 1e-6
    q_error: float = 1e3
    q_integral: float = 1e4
    r_power: float = 1e-10
    r_voltage: float = 1e-2
    filter_tc: float = 0.002

    def __post_init__(self):
        for name in ("H_ref", "R_ref", "q_error", "q_integral", "r_power", "r_voltage", "filter_tc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"controller.{name} must be strictly positive")
        if self.q_state < 0:
            raise ValueError("controller.q_state must be non-negative")


@dataclass
class UioDesign:
    """Full-order unknown-input observer  z' = F z + T B u + K y,  x_hat = z + H y."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    E: np.ndarray
    H: np.ndarray
    T: np.ndarray
    F: np.ndarray
    K: np.ndarray
    K1: np.ndarray
    care: CareSolution | None = None
    filter_tc: float = 0.002

    @property
    def CE(self) -> np.ndarray:
        return self.C @ self.E


@dataclass
class ControlSignal:
    dP_ref: float
    dV_dc_ref: float
    saturated: bool = False


@dataclass(frozen=True)
class UnitCommand:
    dv_pv: float
    dv_dc_ref: float


def pv_scales(shared: SharedParams, S_b: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit bases for the combined state (3 grid + 3 PV) and the two PV inputs."""
    x = np.array([1.0, 1.0, 1.0, shared.V_dc0_ref, S_b, 2.0 * S_b / shared.V_sd])
    u = np.array([S_b, shared.V_dc0_ref])
    return x, u


def normalise(ss: StateSpace, sx: np.ndarray, su: np.ndarray) -> StateSpace:
    """Similarity transform x = diag(sx) x_n, u = diag(su) u_n."""
    return StateSpace(
        ss.A * sx[None, :] / sx[:, None],
        ss.B * su[None, :] / sx[:, None],
        ss.C * sx[None, :],
        ss.E / sx[:, None],
        ss.states, ss.inputs, ss.outputs, ss.disturbances,
    )


def design_uio(sys, filter_tc: float = 0.002) -> UioDesign:
    """Decouple the disturbance (H, T) and stabilise the error with a dual Riccati gain."""
    ss = sys.ss if isinstance(sys, CombinedSystem) else sys
    A, B, C, E = ss.A, ss.B, ss.C, ss.E
    n = A.shape[0]
    I = np.eye(n)
    if E.size == 0 or not np.any(E):
        H = np.zeros((n, C.shape[0]))
    else:
        CE = C @ E
        if np.linalg.matrix_rank(CE) != np.linalg.matrix_rank(E):
            raise UioError("rank(CE) != rank(E): the disturbance cannot be decoupled")
        H = E @ np.linalg.solve(CE.T @ CE, CE.T)
    T = I - H @ C
    TA = T @ A
    try:
        sol = solve_care(TA.T, C.T, np.eye(n), np.eye(C.shape[0]))
    except CareError as exc:
        raise UioError(f"observer Riccati failed: {exc}") from exc
    K1 = sol.P @ C.T
    F = TA - K1 @ C
    if np.max(np.linalg.eigvals(F).real) >= 0:
        raise UioError("observer error dynamics are not stable")
    return UioDesign(A, B, C, E, H, T, F, K1 + F @ H, K1, sol, filter_tc)


def estimate_disturbance(uio: UioDesign, x_hat, ydot_f, u, model_term=None) -> np.ndarray:
    """Disturbance from the output equation  y' = C (A x + B u) + C E d.

    ``model_term`` may carry C (A x_hat + B u) passed through the same
    first-order filter as the derivative; otherwise it is evaluated
    instantaneously from ``x_hat`` and ``u``.
    """
    CE = uio.CE
    if np.linalg.matrix_rank(CE) < CE.shape[1]:
        raise UioError("CE is rank deficient; disturbance not observable from the output")
    if model_term is None:
        model_term = uio.C @ (uio.A @ np.asarray(x_hat) + uio.B @ np.asarray(u))
    return np.linalg.pinv(CE) @ (np.atleast_1d(ydot_f) - np.atleast_1d(model_term))


def build_augmented(combined, reference: StateSpace) -> StateSpace:
    """Design model over [x (n), e, integral of e] with e = y - y_ref.

    The reference's mechanical power and disturbance input are exogenous;
    its damping acts on  y_ref = y - e  and therefore stays in the error row.
    """
    ss = combined.ss if isinstance(combined, CombinedSystem) else combined
    if ss.C.shape[0] != 1 or reference.C.shape[0] != 1:
        raise ValueError("plant and reference must share a single frequency output")
    if reference.outputs != ss.outputs:
        raise ValueError(f"output mismatch: {ss.outputs} vs {reference.outputs}")
    n, m = ss.B.shape
    C = ss.C
    k = int(np.argmax(np.abs(reference.C[0])))
    damp = -reference.A[k, k]  # D_ref / (2 H_ref)
    A = np.zeros((n + 2, n + 2))
    A[:n, :n] = ss.A
    A[n, :n] = (C @ ss.A)[0] + damp * C[0]
    A[n, n] = -damp
    A[n + 1, n] = 1.0
    B = np.vstack([ss.B, C @ ss.B, np.zeros((1, m))])
    Cout = np.zeros((1, n + 2))
    Cout[0, n] = 1.0
    return StateSpace(
        A, B, Cout,
        states=ss.states + ("e", "int_e"),
        inputs=ss.inputs,
        outputs=("e",),
    )


def lut_block(dP_ref_agg: float, agg: AggregateParams, lut: PanelLut, shared: SharedParams, column=None) -> float:
    """Aggregate array-voltage deviation that yields ``dP_ref_agg`` total watts at S^a."""
    col = lut_column(lut, agg.s) if column is None else column
    return invert_column(lut.dv, col, dP_ref_agg * shared.P_pa / agg.p_r)


def invert_controls(u_agg, fleet_size: int) -> list[UnitCommand]:
    """Every unit receives the aggregate commands unchanged."""
    if fleet_size < 1:
        raise ValueError("fleet_size must be at least 1")
    cmd = UnitCommand(float(u_agg[0]), float(u_agg[1]))
    return [cmd] * fleet_size


@dataclass
class TrackingController:
    """Designed controller plus the bookkeeping needed to run it in a simulation.

    Internal state (per-unit): observer z (n), reference grid (3), error
    integral, derivative-filter state, model-term filter state.
    """

    uio: UioDesign
    reference: StateSpace
    augmented: StateSpace
    K_lqr: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    lqr_care: CareSolution
    sx: np.ndarray
    su: np.ndarray
    agg: AggregateParams
    shared: SharedParams
    lut: PanelLut
    config: ControllerConfig
    column: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.column is None:
            self.column = lut_column(self.lut, self.agg.s)
        scale = self.agg.p_r / self.shared.P_pa
        self.p_max = float(self.column.max()) * scale
        self.p_min = float(self.column.min()) * scale
        self.n = self.uio.A.shape[0]
        ce = self.uio.CE
        self._ce_pinv = np.linalg.pinv(ce)
        self._CA = self.uio.C @ self.uio.A
        self._CB = self.uio.C @ self.uio.B
        self._TB = self.uio.T @ self.uio.B
        self._h = self.uio.H[:, 0]
        self._k = self.uio.K[:, 0]
        self._er = self.reference.E[:, 0]
        self._kx = -self.K_lqr[:, :self.n]
        self._ke = -self.K_lqr[:, self.n]
        self._ki = -self.K_lqr[:, self.n + 1]

    @property
    def n_states(self) -> int:
        return self.n + self.reference.n + 3

    def initial_state(self, y0: float = 0.0) -> np.ndarray:
        s = np.zeros(self.n_states)
        s[self.n + self.reference.n + 1] = y0
        return s

    def split(self, state):
        n, nr = self.n, self.reference.n
        return state[:n], state[n:n + nr], state[n + nr], state[n + nr + 1], state[n + nr + 2]

    def control(self, state, y: float):
        """Unsaturated control law and saturated ControlSignal for the current state."""
        z, xr, ie, _, _ = self.split(state)
        x_hat = z + self.uio.H[:, 0] * y
        e = y - xr[-1]
        aug = np.concatenate([x_hat, (e, ie)])
        u_n = -self.K_lqr @ aug
        u = u_n * self.su
        p = min(max(u[0], self.p_min), self.p_max)
        return u, ControlSignal(p, u[1], p != u[0]), x_hat, e

    def derivative(self, state, y: float):
        """Time derivative of the internal state and the applied ControlSignal."""
        n, nr = self.n, self.reference.n
        z, xr = state[:n], state[n:n + nr]
        ie, yf, mf = state[n + nr], state[n + nr + 1], state[n + nr + 2]
        x_hat = z + self._h * y
        e = y - xr[-1]
        u = (self._kx @ x_hat + self._ke * e + self._ki * ie) * self.su
        p = min(max(u[0], self.p_min), self.p_max)
        sig = ControlSignal(p, u[1], p != u[0])
        u_n = np.array([p, u[1]]) / self.su
        tf = self.config.filter_tc
        ydot = (y - yf) / tf
        model = self._CA[0] @ x_hat + self._CB[0] @ u_n
        d_hat = self._ce_pinv[0, 0] * (ydot - mf)
        # anti-windup: hold the integral while it would push further into saturation
        if sig.saturated and np.sign(-self.K_lqr[0, -1] * e) == np.sign(u[0] - p):
            die = 0.0
        else:
            die = e
        ds = np.concatenate((
            self.uio.F @ z + self._TB @ u_n + self._k * y,
            self.reference.A @ xr + self._er * d_hat,
            (die, ydot, (model - mf) / tf),
        ))
        if not np.isfinite(ds).all():
            raise FloatingPointError("controller state overflow; closed loop unstable")
        return ds, sig

    def disturbance_estimate(self, state, y):
        z, xr, ie, yf, mf = self.split(state)
        return self._ce_pinv[0, 0] * ((y - yf) / self.config.filter_tc - mf)

    def array_voltage(self, dP_ref: float) -> float:
        try:
            return lut_block(dP_ref, self.agg, self.lut, self.shared, self.column)
        except LutSaturation as exc:
            return float(exc.clamped)

    def closed_loop_eigvals(self) -> np.ndarray:
        a = self.augmented
        return np.linalg.eigvals(a.A - a.B @ self.K_lqr)


def controller_derivative(ctrl: TrackingController, state, y: float):
    """Functional form of :meth:`TrackingController.derivative`."""
    return ctrl.derivative(state, y)


def lqr_weights(cfg: ControllerConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    Q = np.diag([cfg.q_state] * n + [cfg.q_error, cfg.q_integral])
    R = np.diag([cfg.r_power, cfg.r_voltage])
    return Q, R


def design_controller(
    combined: CombinedSystem,
    reference: StateSpace,
    agg: AggregateParams,
    shared: SharedParams,
    lut: PanelLut,
    cfg: ControllerConfig | None = None,
) -> TrackingController:
    """Synthesise UIO, augmented model and LQR gain for the combined plant."""
    cfg = cfg or ControllerConfig()
    S_b = combined.ss.meta["S_b"]
    sx, su = pv_scales(shared, S_b)
    plant = normalise(combined.ss, sx, su)
    uio = design_uio(plant, cfg.filter_tc)
    aug = build_augmented(plant, reference)
    Q, R = lqr_weights(cfg, plant.n)
    # per-unit R: power weight is quoted per pu^2, voltage weight per V^2
    R = R * np.diag([1.0, su[1] ** 2])
    sol = solve_care(aug.A, aug.B, Q, R)
    K = np.linalg.solve(R, aug.B.T @ sol.P)
    if np.any(np.linalg.eigvals(aug.A - aug.B @ K).real >= 0):
        raise CareError("tracking LQR closed loop is not stable")
    return TrackingController(uio, reference, aug, K, Q, R, sol, sx, su, agg, shared, lut, cfg)
