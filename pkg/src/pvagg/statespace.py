from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class StateSpace:
    """Continuous-time model  x' = A x + B u + E d,  y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    E: np.ndarray = None
    states: tuple = ()
    inputs: tuple = ()
    outputs: tuple = ()
    disturbances: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        self.B = np.asarray(self.B, dtype=float).reshape(n, -1)
        self.C = np.asarray(self.C, dtype=float).reshape(-1, n)
        if self.E is None:
            self.E = np.zeros((n, 0))
        self.E = np.asarray(self.E, dtype=float).reshape(n, -1)
        self.states = tuple(self.states) or tuple(f"x{i}" for i in range(n))
        self.inputs = tuple(self.inputs) or tuple(f"u{i}" for i in range(self.B.shape[1]))
        self.outputs = tuple(self.outputs) or tuple(f"y{i}" for i in range(self.C.shape[0]))
        self.disturbances = tuple(self.disturbances) or tuple(f"d{i}" for i in range(self.E.shape[1]))
        for name, labels, size in (
            ("states", self.states, n),
            ("inputs", self.inputs, self.B.shape[1]),
            ("outputs", self.outputs, self.C.shape[0]),
            ("disturbances", self.disturbances, self.E.shape[1]),
        ):
            if len(labels) != size:
                raise ValueError(f"{len(labels)} {name} labels for dimension {size}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def eigvals(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def is_stable(self) -> bool:
        return bool(np.all(self.eigvals().real < 0))

    def derivative(self, x, u=None, d=None) -> np.ndarray:
        dx = self.A @ x
        if u is not None and self.B.shape[1]:
            dx = dx + self.B @ np.atleast_1d(u)
        if d is not None and self.E.shape[1]:
            dx = dx + self.E @ np.atleast_1d(d)
        return dx

    def steady_state(self, u=None, d=None) -> np.ndarray:
        """Equilibrium state for constant inputs (A must be nonsingular)."""
        rhs = np.zeros(self.n)
        if u is not None:
            rhs = rhs + self.B @ np.atleast_1d(u)
        if d is not None:
            rhs = rhs + self.E @ np.atleast_1d(d)
        return np.linalg.solve(self.A, -rhs)

    def dc_gain(self) -> np.ndarray:
        return -self.C @ np.linalg.solve(self.A, self.B)
