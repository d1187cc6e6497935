"""Fixed-step simulation, experiment runners and frequency metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .control import TrackingController, invert_controls
from .fleet import BenchmarkFleet, Fleet, SharedParams, aggregate_inputs, aggregate_params, build_aggregate_ssm
from .grid import F_NOMINAL, LfcParams, build_lfc, build_reference, to_hz
from .panel import PanelLut, lut_forward

DT_LINEAR = 5e-5
DT_BENCHMARK = 1e-5


class IntegrationError(FloatingPointError):
    """Non-finite state; ``trace`` holds everything up to the last finite sample."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SimTrace:
    """Time grid plus labelled columns of equal length."""

    t: np.ndarray
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        for k, v in list(self.columns.items()):
            self.add(k, v, replace=True)
        if self.t.size > 2:
            steps = np.diff(self.t)
            if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(self.t[-1])):
                raise ValueError("time grid must be uniform")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def add(self, label, values, replace=False):
        values = np.asarray(values, dtype=float)
        if values.shape != self.t.shape:
            raise ValueError(f"column {label!r} has shape {values.shape}, time grid {self.t.shape}")
        if label in self.columns and not replace:
            raise KeyError(f"duplicate column label {label!r}")
        self.columns[label] = values

    def __getitem__(self, label) -> np.ndarray:
        return self.columns[label]

    def __contains__(self, label):
        return label in self.columns

    def __len__(self):
        return self.t.size

    def to_csv(self, path=None, labels=None) -> str:
        labels = list(self.columns) if labels is None else list(labels)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s"] + labels)
        data = np.column_stack([self.t] + [self.columns[k] for k in labels])
        for row in data:
            w.writerow([format(x, ".9g") for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "SimTrace":
        if isinstance(source, Path) or "\n" not in str(source):
            source = Path(source).read_text()
        rows = list(csv.reader(io.StringIO(source)))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        return cls(data[:, 0], {h: data[:, i + 1] for i, h in enumerate(header[1:])})


def integrate(deriv, x0, t_end: float, dt: float, t0: float = 0.0, stride: int = 1, labels=None) -> SimTrace:
    """Classical fourth-order Runge-Kutta with a fixed step.

    ``deriv(t, x)`` returns dx/dt. Every ``stride``-th step is recorded.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.array(x0, dtype=float)
    n_steps = int(round((t_end - t0) / dt))
    n_rec = n_steps // stride + 1
    out = np.empty((n_rec, x.size))
    out[0] = x
    h, h2, h6 = dt, 0.5 * dt, dt / 6.0
    rec = 1
    for k in range(n_steps):
        t = t0 + k * dt
        k1 = deriv(t, x)
        k2 = deriv(t + h2, x + h2 * k1)
        k3 = deriv(t + h2, x + h2 * k2)
        k4 = deriv(t + h, x + h * k3)
        x = x + h6 * (k1 + 2.0 * (k2 + k3) + k4)
        if (k + 1) % stride == 0:
            if not np.all(np.isfinite(x)):
                trace = _make_trace(t0, dt * stride, out[:rec], labels)
                raise IntegrationError(f"non-finite state at t = {t + h:.6g} s", trace)
            out[rec] = x
            rec += 1
    return _make_trace(t0, dt * stride, out[:rec], labels)


def _make_trace(t0, step, states, labels):
    labels = labels or [f"x{i}" for i in range(states.shape[1])]
    t = t0 + step * np.arange(states.shape[0])
    return SimTrace(t, {lab: states[:, i] for i, lab in enumerate(labels)})


def _step(t, t_on):
    return t >= t_on - 1e-9


# ---------------------------------------------------------------------------
# aggregate model validation


@dataclass
class ValidationResult:
    benchmark: SimTrace
    aggregate: SimTrace
    u_agg: tuple
    errors: dict


def compare_traces(bench: SimTrace, agg: SimTrace, label: str, tail: float = 0.1) -> dict:
    """Steady-state and peak deviation of ``agg`` from ``bench``, relative to the benchmark peak.

    The steady-state value is the mean over the final ``tail`` fraction.
    """
    b, a = bench[label], agg[label]
    peak = float(np.max(np.abs(b)))
    if peak == 0.0:
        return {"peak": 0.0, "steady_state_error": float(np.max(np.abs(a))), "peak_error": float(np.max(np.abs(a)))}
    n = max(1, int(round(tail * b.size)))
    return {
        "peak": peak,
        "benchmark_final": float(b[-n:].mean()),
        "aggregate_final": float(a[-n:].mean()),
        "steady_state_error": float(abs(a[-n:].mean() - b[-n:].mean()) / peak),
        "peak_error": float(np.max(np.abs(a - b)) / peak),
    }


def simulate_benchmark(fleet: Fleet, shared: SharedParams, lut: PanelLut, dv_pv, dv_dc_ref,
                       t_step: float = 1.5, t_end: float = 4.0, dt: float = DT_BENCHMARK, stride: int = 5):
    """Nonlinear fleet from the de-loaded equilibrium with a command step at ``t_step``.

    Returns the trace of aggregate signals plus per-unit powers and energies.
    """
    bench = BenchmarkFleet(fleet, shared, lut)
    n = len(bench)
    p_before = bench.array_power(0.0)
    p_after = bench.array_power(np.asarray(dv_pv, dtype=float))
    v_before = np.full(n, shared.V_dc0_ref)
    v_after = v_before + np.broadcast_to(np.asarray(dv_dc_ref, dtype=float), (n,))
    flat = bench.flat_derivative

    def deriv(t, x):
        if _step(t, t_step):
            return flat(x, p_after, v_after)
        return flat(x, p_before, v_before)

    labels = [f"{q}_{i}" for q in ("V_dc", "i_d", "x") for i in range(n)]
    raw = integrate(deriv, bench.flat_equilibrium(), t_end, dt, stride=stride, labels=labels)
    states = np.column_stack([raw[k] for k in labels]).reshape(len(raw), 3, n).transpose(0, 2, 1)
    p_pv = bench.pv_power(states)
    dp = p_pv - bench.p_base
    dv = states[:, :, 0] - shared.V_dc0_ref
    on = _step(raw.t, t_step)
    p_arr = np.where(on[:, None], p_after, p_before)

    tr = SimTrace(raw.t)
    tr.add("dP_PV_a", dp.sum(axis=1))
    tr.add("dV_dc_a", dv @ fleet.p_r / fleet.p_r.sum())
    for i in range(n):
        tr.add(f"dP_PV_{i}", dp[:, i])
        tr.add(f"V_dc_{i}", states[:, i, 0])
    # capacitor energy change vs. integral of the power imbalance
    energy = 0.5 * bench.cap * (states[:, :, 0] ** 2 - shared.V_dc0_ref**2)
    tr.add("E_dc", energy.sum(axis=1))
    tr.add("P_imbalance", (p_arr - p_pv).sum(axis=1))
    for i in range(n):
        tr.add(f"E_dc_{i}", energy[:, i])
    return tr


def simulate_aggregate(fleet: Fleet, shared: SharedParams, lut: PanelLut, dv_pv_a: float, dv_dc_ref_a: float,
                       t_step: float = 1.5, t_end: float = 4.0, dt: float = DT_LINEAR):
    agg = aggregate_params(fleet, shared)
    ss = build_aggregate_ssm(agg, shared)
    dp_ref = agg.p_r / shared.P_pa * lut_forward(lut, dv_pv_a, agg.s)
    u_on = np.array([dp_ref, dv_dc_ref_a])
    A, B = ss.A, ss.B
    Bu = B @ u_on

    def deriv(t, x):
        return A @ x + Bu if _step(t, t_step) else A @ x

    raw = integrate(deriv, np.zeros(3), t_end, dt, labels=list(ss.states))
    tr = SimTrace(raw.t)
    tr.add("dP_PV_a", raw["dP_PV_a"])
    tr.add("dV_dc_a", raw["dV_dc_a"])
    return tr


def run_validation(fleet: Fleet, shared: SharedParams, lut: PanelLut, dv_pv, dv_dc_ref,
                   t_step: float = 1.5, t_end: float = 4.0,
                   dt_benchmark: float = DT_BENCHMARK, dt_aggregate: float = DT_LINEAR) -> ValidationResult:
    """Benchmark fleet vs reduced model for one set of individual commands."""
    dv_pv = np.broadcast_to(np.asarray(dv_pv, dtype=float), fleet.p_r.shape)
    dv_dc_ref = np.broadcast_to(np.asarray(dv_dc_ref, dtype=float), fleet.p_r.shape)
    u_agg = aggregate_inputs(fleet, dv_pv, dv_dc_ref)
    stride = max(1, int(round(dt_aggregate / dt_benchmark)))
    bench = simulate_benchmark(fleet, shared, lut, dv_pv, dv_dc_ref, t_step, t_end, dt_benchmark, stride)
    agg = simulate_aggregate(fleet, shared, lut, *u_agg, t_step=t_step, t_end=t_end, dt=dt_aggregate)
    errors = {k: compare_traces(bench, agg, k) for k in ("dP_PV_a", "dV_dc_a")}
    return ValidationResult(bench, agg, u_agg, errors)


# ---------------------------------------------------------------------------
# frequency event


def _lfc_response(p: LfcParams, d: float, t_event: float, t_end: float, dt: float, stride: int) -> np.ndarray:
    ss = build_lfc(p)
    A, Ed = ss.A, ss.E[:, 0] * d

    def deriv(t, x):
        return A @ x + Ed if _step(t, t_event) else A @ x

    return integrate(deriv, np.zeros(3), t_end, dt, stride=stride)["x2"]


def run_frequency_event(grid: LfcParams, fleet: Fleet, shared: SharedParams, lut: PanelLut,
                        ctrl: TrackingController, d: float = 0.086, t_event: float = 1.0,
                        t_end: float = 30.0, dt: float = DT_LINEAR, stride: int = 20) -> SimTrace:
    """Load step on (i) the controlled system, (ii) the reference grid, (iii) the uncontrolled grid.

    The controlled plant is the LFC model fed by the nonlinear benchmark
    fleet; every unit receives the inverted aggregate commands.
    """
    lfc = build_lfc(grid)
    Ag, Bg, Eg = lfc.A, lfc.B[:, 0] / grid.S_b, lfc.E[:, 0]
    bench = BenchmarkFleet(fleet, shared, lut)
    n = len(bench)
    # g(dv, S_i) on the voltage grid for every unit; commands share one dv
    cols = np.column_stack([lut_forward(lut, lut.dv, np.full(lut.dv.size, s)) for s in fleet.s])
    dvg = lut.dv
    nc = ctrl.n_states
    i_units = slice(3, 3 + 3 * n)
    i_ctrl = slice(3 + 3 * n, 3 + 3 * n + nc)
    half_vsd = 0.5 * shared.V_sd

    def unit_array_power(dv_a):
        k = min(max(int(np.searchsorted(dvg, dv_a, side="right")) - 1, 0), dvg.size - 2)
        w = (dv_a - dvg[k]) / (dvg[k + 1] - dvg[k])
        return bench.p_base + bench.n_panels * ((1 - w) * cols[k] + w * cols[k + 1])

    i_cur = slice(3 + n, 3 + 2 * n)
    p_base_tot = bench.p_base.sum()
    v0 = shared.V_dc0_ref

    def deriv(t, s):
        xg = s[:3]
        y = xg[2]
        dc, sig = ctrl.derivative(s[i_ctrl], y)
        p_arr = unit_array_power(ctrl.array_voltage(sig.dP_ref))
        du = bench.flat_derivative(s[i_units], p_arr, v0 + sig.dV_dc_ref)
        dp_tot = half_vsd * s[i_cur].sum() - p_base_tot
        dxg = Ag @ xg + Bg * dp_tot
        if _step(t, t_event):
            dxg = dxg + Eg * d
        return np.concatenate((dxg, du, dc))

    x0 = np.concatenate([np.zeros(3), bench.flat_equilibrium(), ctrl.initial_state()])
    raw = integrate(deriv, x0, t_end, dt, stride=stride)
    S = np.column_stack([raw[f"x{i}"] for i in range(x0.size)])

    tr = SimTrace(raw.t)
    dw = S[:, 2]
    dw_ref = _lfc_response(build_reference(ctrl.config.H_ref, ctrl.config.R_ref, grid).meta["params"],
                           d, t_event, t_end, dt, stride)
    dw_unc = _lfc_response(grid, d, t_event, t_end, dt, stride)
    tr.add("f_controlled_hz", to_hz(dw))
    tr.add("f_reference_hz", to_hz(dw_ref))
    tr.add("f_uncontrolled_hz", to_hz(dw_unc))
    tr.add("dw_controlled_pu", dw)
    tr.add("dw_reference_pu", dw_ref)
    tr.add("dw_uncontrolled_pu", dw_unc)
    tr.add("d_pu", np.where(_step(raw.t, t_event), d, 0.0))

    units = S[:, i_units].reshape(len(raw), 3, n).transpose(0, 2, 1)
    dp_units = half_vsd * units[:, :, 1] - bench.p_base
    cstates = S[:, i_ctrl]
    sigs = [ctrl.control(c, y)[1] for c, y in zip(cstates, dw)]
    dP_ref = np.array([s.dP_ref for s in sigs])
    dv_ref = np.array([s.dV_dc_ref for s in sigs])
    tr.add("d_hat_pu", [ctrl.disturbance_estimate(c, y) for c, y in zip(cstates, dw)])
    tr.add("f_reference_internal_hz", to_hz(cstates[:, ctrl.n + ctrl.reference.n - 1]))
    tr.add("dP_PV_ref_a_W", dP_ref)
    tr.add("dV_dc_ref_a_V", dv_ref)
    tr.add("dV_PV_a_V", [ctrl.array_voltage(p) for p in dP_ref])
    tr.add("saturated", [float(s.saturated) for s in sigs])
    tr.add("dP_PV_total_W", dp_units.sum(axis=1))
    tr.add("dV_dc_a_V", (units[:, :, 0] - shared.V_dc0_ref) @ fleet.p_r / fleet.p_r.sum())
    for i in range(n):
        tr.add(f"dP_PV_{i}_W", dp_units[:, i])
    return tr


def unit_commands(trace: SimTrace, n_units: int, k: int = -1):
    """Per-unit commands at sample ``k`` after inversion."""
    return invert_controls((trace["dV_PV_a_V"][k], trace["dV_dc_ref_a_V"][k]), n_units)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    nadir_hz: float
    rocof_hz_s: float
    settling_hz: float
    tracking_error_pct: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def compute_metrics(trace: SimTrace, column: str = "f_controlled_hz", ref_column: str | None = None,
                    window: float = 0.1, settle_frac: float = 0.1, tracking: bool = False) -> Metrics:
    """Nadir, worst RoCoF over a sliding window, settling frequency and tracking error."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    f = trace[column]
    nadir = float(f.min())
    rocof = 0.0
    if len(trace) > 1:
        w = max(1, int(round(window / trace.dt)))
        if w < f.size:
            rocof = float(np.max(np.abs(f[w:] - f[:-w])) / (w * trace.dt))
    n = max(1, int(round(settle_frac * f.size)))
    settling = float(f[-n:].mean())
    err = None
    if ref_column is not None:
        err = float(np.max(np.abs(f - trace[ref_column])) / F_NOMINAL * 100.0)
    elif tracking:
        raise KeyError("tracking error requested without a reference column")
    return Metrics(nadir, rocof, settling, err)
