"""Load-frequency-control model of the bulk system and the combined PV + grid plant.

All grid quantities are per unit on the system base ``S_b``; the PV model
works in watts, so the coupling divides by ``S_b``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .statespace import StateSpace

F_NOMINAL = 60.0


@dataclass(frozen=True)
class LfcParams:
    T_g: float = 0.3
    T_t: float = 0.8
    H_g: float = 5.9746
    R_g: float = 0.08
    D: float = 1.0
    S_b: float = 116e6

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"grid.{f.name} must be strictly positive, got {getattr(self, f.name)}")

    @classmethod
    def from_dict(cls, d: dict) -> "LfcParams":
        d = dict(d)
        unknown = set(d) - {"T_g", "T_t", "H_g", "R_g", "D", "S_b_mva"}
        if unknown:
            raise KeyError(f"unknown grid key(s): {sorted(unknown)}")
        if "S_b_mva" in d:
            d["S_b"] = d.pop("S_b_mva") * 1e6
        return cls(**d)


@dataclass
class CombinedSystem:
    """Grid states followed by the aggregate PV states; output is the speed deviation."""

    ss: StateSpace
    n_grid: int = 3

    @property
    def A(self):
        return self.ss.A

    @property
    def B(self):
        return self.ss.B

    @property
    def C(self):
        return self.ss.C

    @property
    def E(self):
        return self.ss.E


def build_lfc(p: LfcParams) -> StateSpace:
    """Governor, turbine and swing equation with PV power as input and load as disturbance."""
    h2 = 2.0 * p.H_g
    A = [
        [-1.0 / p.T_g, 0.0, -1.0 / (p.R_g * p.T_g)],
        [1.0 / p.T_t, -1.0 / p.T_t, 0.0],
        [0.0, 1.0 / h2, -p.D / h2],
    ]
    return StateSpace(
        A,
        B=[[0.0], [0.0], [1.0 / h2]],
        C=[[0.0, 0.0, 1.0]],
        E=[[0.0], [0.0], [-1.0 / h2]],
        states=("dP_gov", "dP_m", "dw"),
        inputs=("dP_PV_pu",),
        outputs=("dw",),
        disturbances=("dP_L",),
        meta={"params": p},
    )


def steady_state_freq(p: LfcParams, d: float) -> float:
    """Settled speed deviation (pu) after a load step ``d`` (pu)."""
    return -d / (p.D + 1.0 / p.R_g)


def build_combined(lfc: StateSpace, pv: StateSpace, S_b: float) -> CombinedSystem:
    if lfc.B.shape[1] != 1 or pv.C.shape[0] != 1:
        raise ValueError("grid must take one PV power input and the PV model must output one power")
    if not S_b > 0:
        raise ValueError("system base must be positive")
    ng, npv = lfc.n, pv.n
    A = np.zeros((ng + npv, ng + npv))
    A[:ng, :ng] = lfc.A
    A[:ng, ng:] = lfc.B @ pv.C / S_b
    A[ng:, ng:] = pv.A
    B = np.vstack([np.zeros((ng, pv.B.shape[1])), pv.B])
    E = np.vstack([lfc.E, np.zeros((npv, lfc.E.shape[1]))])
    C = np.hstack([lfc.C, np.zeros((lfc.C.shape[0], npv))])
    ss = StateSpace(
        A, B, C, E,
        states=lfc.states + pv.states,
        inputs=pv.inputs,
        outputs=lfc.outputs,
        disturbances=lfc.disturbances,
        meta={"S_b": S_b},
    )
    return CombinedSystem(ss, ng)


def build_reference(H_ref: float, R_ref: float, base: LfcParams) -> StateSpace:
    """The grid as it should behave: same plant with the desired inertia and droop."""
    return build_lfc(replace(base, H_g=H_ref, R_g=R_ref))


def to_hz(dw_pu):
    return F_NOMINAL * (1.0 + np.asarray(dw_pu))
