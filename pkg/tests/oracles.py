"""Independent reference computations used to check the package."""

import numpy as np
import scipy.linalg as spla
from scipy.optimize import brentq


def newton_kleinman(A, B, Q, R, K0, tol=1e-13, maxiter=50):
    """Kleinman iteration from a stabilising gain; each step is a Lyapunov solve."""
    K = np.asarray(K0, dtype=float)
    P_old = None
    for _ in range(maxiter):
        Ak = A - B @ K
        P = spla.solve_continuous_lyapunov(Ak.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K = np.linalg.solve(R, B.T @ P)
        if P_old is not None and np.linalg.norm(P - P_old) <= tol * max(1.0, np.linalg.norm(P)):
            break
        P_old = P
    return P


def diode_current(params, v, S, t=300.0):
    """Terminal current by a scalar bracketed root find on the implicit equation."""
    a = params.thermal_voltage(t)
    i_ph = params.i_ph * S / 100.0
    i_0 = params.saturation_current(t)

    def f(i):
        vd = v + i * params.r_s
        return i_ph - i_0 * np.expm1(vd / a) - vd / params.r_sh - i

    lo, hi = -1e3, i_ph + 1.0
    return brentq(f, lo, hi, xtol=1e-13, rtol=1e-14)


def diode_power(params, v, S, t=300.0):
    return v * diode_current(params, v, S, t)


def linear_response(A, B, u, x0, times):
    """x(t) of x' = A x + B u for constant u via the matrix exponential."""
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n] = B @ u
    z0 = np.append(x0, 1.0)
    return np.array([(spla.expm(M * t) @ z0)[:n] for t in times])


def pearson(x, y):
    x = np.asarray(x, float) - np.mean(x)
    y = np.asarray(y, float) - np.mean(y)
    return float(x @ y / np.sqrt((x @ x) * (y @ y)))
