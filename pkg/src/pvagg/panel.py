"""Single-diode PV panel model and the power-deviation lookup table.

The table ``g(dv, S)`` maps a deviation of the array voltage away from the
de-loaded operating point to the resulting change of panel output power.
Operating points sit on the high-voltage side of the maximum power point, so
a negative ``dv`` releases headroom and ``g`` decreases with ``dv``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.constants import Boltzmann, elementary_charge
from scipy.optimize import brentq

BANDGAP_EV = 1.12
CURRENT_TOL = 1e-10
MAX_ITER = 200

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(RuntimeError):
    """The implicit diode equation did not converge."""


class LutRangeError(ValueError):
    """Query lies outside the tabulated (dv, S) hull."""


class LutSaturation(ValueError):
    """Requested power deviation is outside what the panel can deliver.

    ``clamped`` holds the voltage deviation at the nearest attainable limit.
    """

    def __init__(self, message: str, clamped: float):
        super().__init__(message)
        self.clamped = clamped


@dataclass(frozen=True)
class PanelParams:
    """Five-parameter single-diode panel.

    Currents in amps, resistances in ohms, ``p_rated`` in watts and
    ``t_ref`` in kelvin. ``i_ph`` is the photocurrent at S = 100 %.
    """

    i_ph: float
    i_0: float
    ideality: float
    r_s: float
    r_sh: float
    n_cells: int
    p_rated: float
    t_ref: float = 300.0

    def __post_init__(self):
        for name in ("i_ph", "i_0", "ideality", "r_s", "r_sh", "p_rated", "t_ref"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PanelParams.{name} must be strictly positive")
        if self.n_cells < 1:
            raise ValueError("PanelParams.n_cells must be at least 1")

    def thermal_voltage(self, t: float) -> float:
        """Modified thermal voltage n * Ns * k * t / q of the whole panel."""
        return self.ideality * self.n_cells * Boltzmann * t / elementary_charge

    def saturation_current(self, t: float) -> float:
        ratio = t / self.t_ref
        eg = BANDGAP_EV * elementary_charge
        return self.i_0 * ratio**3 * math.exp(
            eg / (self.ideality * Boltzmann) * (1.0 / self.t_ref - 1.0 / t)
        )


def _check_conditions(S, t):
    if np.any(np.asarray(S) < 0) or np.any(np.asarray(S) > 100):
        raise ValueError(f"irradiance must lie in [0, 100] %, got {S}")
    if not 250.0 <= t <= 350.0:
        raise ValueError(f"temperature must lie in [250, 350] K, got {t}")


def panel_current(params: PanelParams, v, S, t: float = 300.0):
    """Terminal current of the panel at voltage ``v`` (vectorised over ``v``/``S``).

    Solves ``I = Iph - I0 (exp((v + I Rs)/a) - 1) - (v + I Rs)/Rsh`` with a
    bracketed Newton iteration that falls back to bisection whenever the
    Newton step leaves the bracket.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("panel voltage must be non-negative")
    _check_conditions(S, t)
    v, s = np.broadcast_arrays(v, np.asarray(S, dtype=float))
    iph = params.i_ph * s / 100.0
    i0 = params.saturation_current(t)
    a = params.thermal_voltage(t)
    rs, rsh = params.r_s, params.r_sh

    def resid(i):
        vd = v + i * rs
        ex = np.exp(np.minimum(vd / a, 700.0))
        return iph - i0 * (ex - 1.0) - vd / rsh - i, -i0 * rs / a * ex - rs / rsh - 1.0

    lo = -v / rs
    hi = iph.copy()
    i = hi.copy()
    for _ in range(MAX_ITER):
        f, df = resid(i)
        lo = np.where(f > 0, i, lo)
        hi = np.where(f <= 0, i, hi)
        step = np.where(df != 0, f / df, 0.0)
        cand = i - step
        outside = (cand <= lo) | (cand >= hi)
        new = np.where(outside, 0.5 * (lo + hi), cand)
        delta = np.abs(new - i)
        i = new
        if np.all(delta < CURRENT_TOL):
            return i if i.ndim else float(i)
    raise ConvergenceError(
        f"diode equation did not converge in {MAX_ITER} iterations; check panel parameters"
    )


def panel_power(params: PanelParams, v, S, t: float = 300.0):
    return np.asarray(v, dtype=float) * panel_current(params, v, S, t)


def open_circuit_voltage(params: PanelParams, S: float, t: float = 300.0) -> float:
    """Voltage at which the terminal current crosses zero (bisection)."""
    if S <= 0:
        return 0.0
    lo = 0.0
    hi = params.thermal_voltage(t) * math.log(params.i_ph * S / 100.0 / params.saturation_current(t) + 1.0)
    while panel_current(params, hi, S, t) > 0:
        lo, hi = hi, 2.0 * hi
    for _ in range(MAX_ITER):
        mid = 0.5 * (lo + hi)
        if panel_current(params, mid, S, t) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(hi, 1.0):
            break
    return 0.5 * (lo + hi)


def find_mpp(params: PanelParams, S: float, t: float = 300.0) -> tuple[float, float]:
    """Maximum power point ``(v_mpp, p_mpp)`` by golden-section search on [0, Voc]."""
    if not S > 0:
        raise ValueError("no maximum power point exists for S <= 0")
    a, b = 0.0, open_circuit_voltage(params, S, t)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    pc = float(panel_power(params, c, S, t))
    pd = float(panel_power(params, d, S, t))
    while b - a > 1e-9 * max(b, 1.0):
        if pc > pd:
            b, d, pd = d, c, pc
            c = b - _GOLDEN * (b - a)
            pc = float(panel_power(params, c, S, t))
        else:
            a, c, pc = c, d, pd
            d = a + _GOLDEN * (b - a)
            pd = float(panel_power(params, d, S, t))
    v = 0.5 * (a + b)
    return v, float(panel_power(params, v, S, t))


def deload_point(params: PanelParams, S: float, t: float = 300.0, frac: float = 0.85) -> float:
    """Operating voltage above the MPP at which the panel yields ``frac * p_mpp``."""
    if not 0.0 < frac < 1.0:
        raise ValueError(f"de-load fraction must lie in (0, 1), got {frac}")
    if not S > 0:
        raise ValueError("de-load point undefined for S <= 0")
    v_mpp, p_mpp = find_mpp(params, S, t)
    v_oc = open_circuit_voltage(params, S, t)
    target = frac * p_mpp
    return brentq(
        lambda v: float(panel_power(params, v, S, t)) - target,
        v_mpp, v_oc, xtol=1e-12, rtol=4 * np.finfo(float).eps,
    )


def calibrate_panel(
    p_rated: float = 5695.0,
    n_cells: int = 500,
    ideality: float = 1.7,
    r_s: float = 2.5,
    r_sh: float = 2000.0,
    voc_per_cell: float = 0.62,
    t_ref: float = 300.0,
) -> PanelParams:
    """Fit photocurrent and saturation current so that p_mpp(100 %, t_ref) = p_rated.

    The saturation current is tied to the photocurrent through the requested
    open-circuit voltage, which leaves a scalar root-find on the photocurrent.
    """
    a = ideality * n_cells * Boltzmann * t_ref / elementary_charge
    voc = voc_per_cell * n_cells

    def build(i_ph):
        i_0 = i_ph / math.expm1(voc / a)
        return PanelParams(i_ph, i_0, ideality, r_s, r_sh, n_cells, p_rated, t_ref)

    def excess(i_ph):
        return find_mpp(build(i_ph), 100.0, t_ref)[1] - p_rated

    guess = p_rated / (0.8 * voc)
    lo, hi = 0.5 * guess, 2.0 * guess
    while excess(hi) < 0:
        hi *= 2.0
    i_ph = brentq(excess, lo, hi, xtol=1e-12, rtol=1e-14)
    return build(i_ph)


@dataclass
class PanelLut:
    """Tabulated ``g(dv, S)`` in watts per panel.

    ``table[k, j]`` is the power deviation at ``dv[k]`` and ``s[j]``. Nodes
    on the low-voltage side of the MPP hold the branch-boundary value and are
    marked in ``clamped``.
    """

    dv: np.ndarray
    s: np.ndarray
    table: np.ndarray
    v_op: np.ndarray
    v_mpp: np.ndarray
    p_mpp: np.ndarray
    t: float
    frac: float
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.clamped is None:
            self.clamped = self.dv[:, None] < (self.v_mpp - self.v_op)[None, :]

    @property
    def branch_limit(self) -> np.ndarray:
        """Per-irradiance voltage deviation that reaches the MPP."""
        return self.v_mpp - self.v_op


def _check_grid(name, grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError(f"{name} grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f"{name} grid must be strictly ascending")
    return grid


def default_grids() -> tuple[np.ndarray, np.ndarray]:
    """0.5 V steps over [-60, 20] V and 1 % steps over [10, 100] %."""
    return np.linspace(-60.0, 20.0, 161), np.linspace(10.0, 100.0, 91)


def build_lut(params: PanelParams, v_grid=None, s_grid=None, t: float = 300.0, frac: float = 0.85) -> PanelLut:
    dv_default, s_default = default_grids()
    dv = _check_grid("voltage", dv_default if v_grid is None else v_grid)
    s = _check_grid("irradiance", s_default if s_grid is None else s_grid)
    if s[0] <= 0 or s[-1] > 100:
        raise ValueError("irradiance grid must lie in (0, 100]")

    v_mpp = np.empty_like(s)
    p_mpp = np.empty_like(s)
    v_op = np.empty_like(s)
    table = np.empty((dv.size, s.size))
    for j, sj in enumerate(s):
        v_mpp[j], p_mpp[j] = find_mpp(params, sj, t)
        v_op[j] = deload_point(params, sj, t, frac)
        v = np.maximum(v_op[j] + dv, v_mpp[j])
        col = panel_power(params, v, sj, t) - frac * p_mpp[j]
        col[v_op[j] + dv <= v_mpp[j]] = (1.0 - frac) * p_mpp[j]
        col[dv == 0.0] = 0.0
        table[:, j] = col
    return PanelLut(dv, s, table, v_op, v_mpp, p_mpp, t, frac)


def _locate(grid, x, what):
    x = np.asarray(x, dtype=float)
    if np.any(x < grid[0]) or np.any(x > grid[-1]) or np.any(np.isnan(x)):
        raise LutRangeError(f"{what} outside tabulated range [{grid[0]}, {grid[-1]}]: {x}")
    k = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, grid.size - 2)
    w = (x - grid[k]) / (grid[k + 1] - grid[k])
    return k, w


def lut_forward(lut: PanelLut, dv, S):
    """Bilinear interpolation of g; exact at grid nodes."""
    kv, wv = _locate(lut.dv, dv, "voltage deviation")
    ks, ws = _locate(lut.s, S, "irradiance")
    T = lut.table
    out = (
        (1 - wv) * (1 - ws) * T[kv, ks]
        + wv * (1 - ws) * T[kv + 1, ks]
        + (1 - wv) * ws * T[kv, ks + 1]
        + wv * ws * T[kv + 1, ks + 1]
    )
    return float(out) if np.ndim(out) == 0 else out


def lut_column(lut: PanelLut, S: float) -> np.ndarray:
    """g(., S) on the voltage grid, linearly interpolated in irradiance."""
    ks, ws = _locate(lut.s, S, "irradiance")
    return (1 - ws) * lut.table[:, ks] + ws * lut.table[:, ks + 1]


def invert_column(dv: np.ndarray, col: np.ndarray, dp: float) -> float:
    """Largest dv with col(dv) = dp on a non-increasing piecewise-linear column."""
    m = int(np.count_nonzero(col >= dp))
    if m == 0:
        top = int(np.count_nonzero(col >= col.max()))
        raise LutSaturation(f"power deviation {dp:.6g} W exceeds headroom {col.max():.6g} W", dv[top - 1])
    if m == dv.size:
        if dp == col[-1]:
            return float(dv[-1])
        raise LutSaturation(f"power deviation {dp:.6g} W below tabulated minimum {col[-1]:.6g} W", dv[-1])
    k = m - 1
    c0, c1 = col[k], col[k + 1]
    return float(dv[k] + (c0 - dp) / (c0 - c1) * (dv[k + 1] - dv[k]))


def lut_inverse(lut: PanelLut, dp: float, S: float) -> float:
    """Voltage deviation that produces ``dp`` watts per panel at irradiance ``S``."""
    return invert_column(lut.dv, lut_column(lut, S), dp)


def headroom(lut: PanelLut, S: float) -> float:
    """Largest attainable g at irradiance ``S`` (the de-load reserve per panel)."""
    return float(lut_column(lut, S).max())


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def export_lut_csv(lut: PanelLut, path=None) -> str:
    """Write the table as CSV: header row of S, first column of dv, watts in cells."""
    buf = io.StringIO()
    buf.write(f"# t_K,{_fmt(lut.t)}\n")
    buf.write(f"# deload,{_fmt(lut.frac)}\n")
    for name, arr in (("v_mpp_V", lut.v_mpp), ("v_op_V", lut.v_op), ("p_mpp_W", lut.p_mpp)):
        buf.write(f"# {name}," + ",".join(_fmt(x) for x in arr) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dv_V\\S_pct"] + [_fmt(x) for x in lut.s])
    for k, d in enumerate(lut.dv):
        w.writerow([_fmt(d)] + [_fmt(x) for x in lut.table[k]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def import_lut_csv(source) -> PanelLut:
    """Inverse of :func:`export_lut_csv`; accepts a path or the CSV text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text()
    meta = {}
    rows = []
    for line in source.splitlines():
        if line.startswith("#"):
            key, *vals = line[1:].strip().split(",")
            meta[key] = np.array([float(v) for v in vals])
        elif line.strip():
            rows.append(line.split(","))
    s = np.array([float(x) for x in rows[0][1:]])
    dv = np.array([float(r[0]) for r in rows[1:]])
    table = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return PanelLut(
        dv, s, table,
        v_op=meta["v_op_V"], v_mpp=meta["v_mpp_V"], p_mpp=meta["p_mpp_W"],
        t=float(meta["t_K"][0]), frac=float(meta["deload"][0]),
    )

