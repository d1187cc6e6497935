"""Distributed PV fleet: parameters, aggregation and small-signal models.

Two models of the same fleet live here. The per-unit / aggregate small-signal
models are linear state-space systems with the array power deviation as an
input. The benchmark model keeps every unit separate and nonlinear (the DC
link obeys ``C V dV/dt = P_array - P_PV``) and is what the reduced model is
checked against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .panel import PanelLut, lut_forward
from .statespace import StateSpace


@dataclass(frozen=True)
class PvUnitParams:
    """One PV system: rating (W), voltage-loop gains, irradiance (%)."""

    p_r: float
    k_p: float
    k_i: float
    s: float

    def __post_init__(self):
        if not (self.p_r > 0 and self.k_p > 0 and self.k_i > 0):
            raise ValueError(f"rating and gains must be positive: {self}")
        if not 0 < self.s <= 100:
            raise ValueError(f"irradiance must lie in (0, 100]: {self.s}")


@dataclass(frozen=True)
class SharedParams:
    """Parameters common to every unit.

    ``C_d`` is the DC-link capacitance per watt of rating. The filter and
    current-loop entries are kept for completeness; the current loop is
    represented by ``tau`` alone.
    """

    C_d: float = 2e-7
    tau: float = 1e-3
    V_sd: float = 317.0
    V_dc0_ref: float = 500.0
    P_pa: float = 5695.0
    t: float = 300.0
    deload: float = 0.85
    n_s: int = 500
    n_p: int = 70
    R: float = 0.001
    L: float = 2e-5
    kp_current: float = 0.02
    kf_current: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"shared.{f.name} must be strictly positive")
        if not self.deload < 1:
            raise ValueError("shared.deload must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SharedParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown shared parameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AggregateParams:
    p_r: float
    c_p: float
    c_i: float
    s: float
    count: int


class Fleet:
    """Ordered collection of PV units stored column-wise."""

    def __init__(self, p_r, k_p, k_i, s, groups=None):
        self.p_r = np.asarray(p_r, dtype=float)
        self.k_p = np.asarray(k_p, dtype=float)
        self.k_i = np.asarray(k_i, dtype=float)
        self.s = np.asarray(s, dtype=float)
        n = self.p_r.size
        if n == 0:
            raise ValueError("fleet must contain at least one unit")
        for name in ("k_p", "k_i", "s"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"fleet column {name} has length {getattr(self, name).size}, expected {n}")
        # validates every unit
        self.units = [PvUnitParams(*row) for row in zip(self.p_r, self.k_p, self.k_i, self.s)]
        self.groups = np.zeros(n, dtype=int) if groups is None else np.asarray(groups, dtype=int)

    @classmethod
    def from_units(cls, units):
        units = list(units)
        if not units:
            raise ValueError("fleet must contain at least one unit")
        return cls([u.p_r for u in units], [u.k_p for u in units], [u.k_i for u in units], [u.s for u in units])

    @classmethod
    def from_dict(cls, d: dict) -> "Fleet":
        """Build from ``{S, P_r_kw, k_p, k_i}`` or ``{feeders: [{...}, ...]}``."""
        blocks = d["feeders"] if "feeders" in d else [d]
        cols = {k: [] for k in ("S", "P_r_kw", "k_p", "k_i")}
        groups = []
        for g, block in enumerate(blocks):
            extra = set(block) - set(cols) - {"shared"}
            if extra:
                raise KeyError(f"unknown fleet key(s): {sorted(extra)}")
            for k in cols:
                cols[k].extend(block[k])
            groups.extend([g] * len(block["S"]))
        return cls(np.array(cols["P_r_kw"], dtype=float) * 1e3, cols["k_p"], cols["k_i"], cols["S"], groups)

    def to_dict(self) -> dict:
        return {
            "S": self.s.tolist(),
            "P_r_kw": (self.p_r / 1e3).tolist(),
            "k_p": self.k_p.tolist(),
            "k_i": self.k_i.tolist(),
        }

    def __len__(self):
        return self.p_r.size

    def __iter__(self):
        return iter(self.units)

    def scaled(self, k: float) -> "Fleet":
        """Same fleet with every rating and gain multiplied by ``k`` (per-watt gains unchanged)."""
        return Fleet(self.p_r * k, self.k_p * k, self.k_i * k, self.s, self.groups)


def capacitor_of(p_r, shared: SharedParams):
    if np.any(np.asarray(p_r) < 0):
        raise ValueError("rated power must be non-negative")
    return p_r * shared.C_d


def aggregate_params(fleet: Fleet, shared: SharedParams | None = None) -> AggregateParams:
    """Total rating, least-squares per-watt gains and rating-weighted irradiance."""
    if len(fleet) == 0:
        raise ValueError("cannot aggregate an empty fleet")
    p_tot = float(fleet.p_r.sum())
    return AggregateParams(
        p_r=p_tot,
        c_p=float(np.mean(fleet.k_p / fleet.p_r)),
        c_i=float(np.mean(fleet.k_i / fleet.p_r)),
        s=float(fleet.p_r @ fleet.s / p_tot),
        count=len(fleet),
    )


def aggregate_inputs(fleet: Fleet, dv_pv, dv_dc_ref) -> tuple[float, float]:
    """Rating-weighted means of the individual array-voltage and DC-reference commands."""
    dv_pv = np.asarray(dv_pv, dtype=float)
    dv_dc_ref = np.asarray(dv_dc_ref, dtype=float)
    if dv_pv.shape != fleet.p_r.shape or dv_dc_ref.shape != fleet.p_r.shape:
        raise ValueError(
            f"command lengths {dv_pv.size}/{dv_dc_ref.size} do not match fleet size {len(fleet)}"
        )
    w = fleet.p_r / fleet.p_r.sum()
    return float(w @ dv_pv), float(w @ dv_dc_ref)


def verify_gain_collapse(fleet: Fleet, c: float, which: str = "k_p") -> float:
    """Sum of squared deviations between ``c`` and the per-watt gains ``k / P_r``."""
    ratio = getattr(fleet, which) / fleet.p_r
    return float(np.sum((c - ratio) ** 2))


def _check_shared(shared):
    if not isinstance(shared, SharedParams):
        raise TypeError("shared must be a SharedParams instance")


def build_unit_ssm(unit: PvUnitParams, shared: SharedParams) -> StateSpace:
    """Small-signal model of one unit.

    States (dV_dc, dP_PV, dx), inputs (dP_array [W], dV_dc_ref [V]). The
    voltage loop acts on V_dc - V_dc_ref, so a drop of the reference pushes
    power out of the DC link.
    """
    _check_shared(shared)
    cap = capacitor_of(unit.p_r, shared) * shared.V_dc0_ref
    half = shared.V_sd / (2 * shared.tau)
    A = [
        [0.0, -1.0 / cap, 0.0],
        [unit.k_p * half, -1.0 / shared.tau, half],
        [unit.k_i, 0.0, 0.0],
    ]
    B = [
        [1.0 / cap, 0.0],
        [0.0, -unit.k_p * half],
        [0.0, -unit.k_i],
    ]
    return StateSpace(
        A, B, [[0.0, 1.0, 0.0]],
        states=("dV_dc", "dP_PV", "dx"),
        inputs=("dP_array", "dV_dc_ref"),
        outputs=("dP_PV",),
    )


def build_aggregate_ssm(agg: AggregateParams, shared: SharedParams) -> StateSpace:
    """Reduced-order model of the whole fleet with the inverse table in front of it.

    Inputs are the aggregate power reference (total watts) and the aggregate
    DC-voltage reference; the output is the total power deviation.
    """
    _check_shared(shared)
    if not (agg.p_r > 0 and agg.c_p > 0 and agg.c_i > 0):
        raise ValueError(f"aggregate parameters must be positive: {agg}")
    cap = shared.C_d * agg.p_r * shared.V_dc0_ref
    half = shared.V_sd / (2 * shared.tau)
    kp = agg.c_p * agg.p_r
    ki = agg.c_i * agg.p_r
    A = [
        [0.0, -1.0 / cap, 0.0],
        [kp * half, -1.0 / shared.tau, half],
        [ki, 0.0, 0.0],
    ]
    B = [
        [1.0 / cap, 0.0],
        [0.0, -kp * half],
        [0.0, -ki],
    ]
    return StateSpace(
        A, B, [[0.0, 1.0, 0.0]],
        states=("dV_dc_a", "dP_PV_a", "dx_a"),
        inputs=("dP_PV_ref_a", "dV_dc_ref_a"),
        outputs=("dP_PV_a",),
    )


class BenchmarkFleet:
    """Nonlinear averaged model of every unit, summed at one bus.

    Per unit the state is (V_dc [V], i_d [A], x [A]). The boost stage sets
    the array voltage instantly, so array power is an algebraic function of
    the commanded voltage deviation through the panel table.
    """

    def __init__(self, fleet: Fleet, shared: SharedParams, lut: PanelLut):
        _check_shared(shared)
        self.fleet = fleet
        self.shared = shared
        self.lut = lut
        self.n_panels = fleet.p_r / shared.P_pa
        self.cap = capacitor_of(fleet.p_r, shared)
        self.p_base = self.n_panels * shared.deload * np.interp(fleet.s, lut.s, lut.p_mpp)
        self.i_d0 = 2.0 * self.p_base / shared.V_sd
        self._half_vsd = 0.5 * shared.V_sd
        self._inv_tau = 1.0 / shared.tau
        self._n = fleet.p_r.size
        self._k_p = fleet.k_p
        self._k_i = fleet.k_i

    def __len__(self):
        return len(self.fleet)

    def equilibrium(self) -> np.ndarray:
        n = len(self)
        x = np.empty((n, 3))
        x[:, 0] = self.shared.V_dc0_ref
        x[:, 1] = self.i_d0
        x[:, 2] = self.i_d0
        return x

    def array_power(self, dv_pv) -> np.ndarray:
        dv_pv = np.broadcast_to(np.asarray(dv_pv, dtype=float), self.fleet.s.shape)
        return self.p_base + self.n_panels * lut_forward(self.lut, dv_pv, self.fleet.s)

    def pv_power(self, states: np.ndarray) -> np.ndarray:
        return 0.5 * states[..., 1] * self.shared.V_sd

    def derivative(self, states: np.ndarray, p_array: np.ndarray, dv_dc_ref) -> np.ndarray:
        """Time derivative of the (N, 3) state for given array power and DC references."""
        flat = np.ascontiguousarray(states.T).ravel()
        v_ref = self.shared.V_dc0_ref + np.broadcast_to(dv_dc_ref, self.fleet.s.shape)
        return self.flat_derivative(flat, p_array, v_ref).reshape(3, -1).T

    def flat_derivative(self, x: np.ndarray, p_array: np.ndarray, v_ref: np.ndarray) -> np.ndarray:
        """Same dynamics on the block layout [V_dc..., i_d..., x...] with absolute references.

        This is the form used inside the integrators; it avoids reshapes.
        """
        n = self._n
        v, i_d, xi = x[:n], x[n:2 * n], x[2 * n:]
        if v.min() <= 0:
            raise FloatingPointError("DC-link voltage collapsed to zero; simulation blew up")
        err = v - v_ref
        return np.concatenate((
            (p_array - self._half_vsd * i_d) / (self.cap * v),
            (self._k_p * err + xi - i_d) * self._inv_tau,
            self._k_i * err,
        ))

    def flat_equilibrium(self) -> np.ndarray:
        return np.ascontiguousarray(self.equilibrium().T).ravel()


def benchmark_fleet_derivative(states, commands, fleet: Fleet, shared: SharedParams, lut: PanelLut):
    """Stateless form of :meth:`BenchmarkFleet.derivative`.

    ``states`` is (N, 3) = (V_dc, i_d, x); ``commands`` is (N, 2) =
    (dV_PV, dV_dc_ref).
    """
    states = np.asarray(states, dtype=float)
    commands = np.asarray(commands, dtype=float)
    if states.shape != (len(fleet), 3) or commands.shape != (len(fleet), 2):
        raise ValueError("need one (V_dc, i_d, x) state and one command per unit")
    bench = BenchmarkFleet(fleet, shared, lut)
    return bench.derivative(states, bench.array_power(commands[:, 0]), commands[:, 1])


def shared_to_dict(shared: SharedParams) -> dict:
    return asdict(shared)
