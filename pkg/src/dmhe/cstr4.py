"""Four interconnected CSTRs with recycle, sampled by classical RK4.

States ``[C_A1, T1, C_A2, T2, C_A3, T3, C_A4, T4]`` (kmol/m3, K), inputs are
the jacket heat duties ``Q1..Q4`` (kJ/h), outputs are the four temperatures.
Time is in hours.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import root

from .model import ModelEvaluationError, NonlinearModel, register_model

STATE_NAMES = ("C_A1", "T1", "C_A2", "T2", "C_A3", "T3", "C_A4", "T4")
PARAM_NAMES = ("F01", "F02", "F03", "F04", "V1", "V2", "V3", "V4", "C01", "C02", "C03", "C04",
               "E1", "E2", "E3", "F1", "F2", "F3", "Fr1", "Fr2", "R")
INPUT_NAMES = ("Q1", "Q2", "Q3", "Q4")
OUTPUT_NAMES = ("T1", "T2", "T3", "T4")

# Column order of the per-variable selection counts table.
TALLY_ORDER = ("C_A1", "T1", "C_A2", "T2", "C_A3", "T3", "C_A4", "T4", "F1", "F2", "F3",
               "V1", "V2", "V3", "V4", "Fr1", "Fr2", "E1", "E2", "E3", "R",
               "F01", "F02", "F03", "F04", "C01", "C02", "C03", "C04")

X_S_PAPER = np.array([2.78, 363.0, 2.58, 356.0, 2.6, 355.0, 2.6, 392.0])
Q_NOMINAL = np.array([1.0e4, 2.0e4, 2.5e4, 1.0e4])
DT = 1.0 / 120.0

_P = {n: i for i, n in enumerate(PARAM_NAMES)}
_F0, _V, _C0, _E = slice(0, 4), slice(4, 8), slice(8, 12), slice(12, 15)
_R = _P["R"]

# Inter-vessel streams: destination, source, flow = coef . theta
_DST = np.array([0, 0, 1, 2, 3])
_SRC = np.array([1, 3, 0, 1, 2])
_FLOW = np.zeros((5, len(PARAM_NAMES)))
_FLOW[0, _P["Fr1"]] = 1.0
_FLOW[1, _P["Fr2"]] = 1.0
_FLOW[2, _P["F1"]] = 1.0
_FLOW[3, _P["F2"]] = 1.0
_FLOW[3, _P["Fr1"]] = -1.0
_FLOW[4, _P["F3"]] = 1.0
_INC = np.zeros((4, 5))
_INC[_DST, np.arange(5)] = 1.0


@dataclass(frozen=True)
class CSTR4Params:
    """Process constants; the 21 unknown ones are exposed via ``theta()``."""

    F0: tuple = (5.0, 10.0, 8.0, 12.0)          # m3/h
    V: tuple = (1.0, 3.0, 4.0, 6.0)             # m3
    C0: tuple = (4.0, 2.0, 3.0, 3.5)            # kmol/m3
    E: tuple = (5.0e4, 7.5e4, 7.53e4)           # kJ/kmol
    F1: float = 35.0
    F2: float = 45.0
    F3: float = 33.0
    Fr1: float = 20.0
    Fr2: float = 10.0
    R: float = 8.314                            # kJ/(kmol K)
    T0: tuple = (300.0, 300.0, 300.0, 300.0)    # K
    dH: tuple = (-5.0e4, -5.2e4, -5.0e4)        # kJ/kmol
    k: tuple = (3.0e6, 3.0e5, 3.0e5)            # 1/h
    cp: float = 0.231                           # kJ/(kg K)
    rho: float = 1000.0                         # kg/m3

    def __post_init__(self):
        if min(self.V) <= 0 or self.cp <= 0 or self.rho <= 0:
            raise ValueError("volumes, cp and rho must be positive")
        if min(self.F0) <= 0 or min(self.F1, self.F2, self.F3, self.Fr1, self.Fr2) <= 0:
            raise ValueError("flows must be positive")

    def theta(self) -> np.ndarray:
        return np.array([*self.F0, *self.V, *self.C0, *self.E,
                         self.F1, self.F2, self.F3, self.Fr1, self.Fr2, self.R], dtype=float)

    def with_theta(self, theta) -> "CSTR4Params":
        t = [float(v) for v in theta]
        return replace(self, F0=tuple(t[0:4]), V=tuple(t[4:8]), C0=tuple(t[8:12]), E=tuple(t[12:15]),
                       F1=t[15], F2=t[16], F3=t[17], Fr1=t[18], Fr2=t[19], R=t[20])


class _Kinetics:
    """Known constants packed as arrays for the vector field."""

    def __init__(self, params: CSTR4Params):
        self.T0 = np.asarray(params.T0, float)
        self.k = np.asarray(params.k, float)
        self.heat = -np.asarray(params.dH, float) / (params.rho * params.cp)
        self.rcp = params.rho * params.cp


def _unpack(x, theta):
    C = x[0::2]
    T = x[1::2]
    if np.any(T <= 0):
        raise ModelEvaluationError("non-positive temperature in Arrhenius term")
    return C, T, theta[_F0], theta[_V], theta[_C0], theta[_E], theta[_R]


def _arrhenius(kin, T, E, R):
    # e[r, i] = k_r exp(-E_r / (R T_i))
    return kin.k[:, None] * np.exp(-E[:, None] / (R * T[None, :]))


_IC, _IT, _VI = 2 * np.arange(4), 2 * np.arange(4) + 1, np.arange(4)


def _rhs_and_jac(kin: _Kinetics, x, u, theta, jac: bool = True):
    C, T, F0, V, C0, E, R = _unpack(x, theta)
    e = _arrhenius(kin, T, E, R)
    g = e.sum(0)
    q = kin.heat @ e
    flow = _FLOW @ theta
    dC = C[_SRC] - C[_DST]
    dT = T[_SRC] - T[_DST]
    mix_C = _INC @ (flow * dC) + F0 * (C0 - C)
    mix_T = _INC @ (flow * dT) + F0 * (kin.T0 - T)
    heat_in = u / kin.rcp
    out = np.empty(8)
    out[_IC] = mix_C / V - g * C
    out[_IT] = (mix_T + heat_in) / V + q * C
    if not jac:
        return out, None, None

    de_dT = e * (E[:, None] / (R * T[None, :] ** 2))
    outflow = _INC @ flow + F0
    fx = np.zeros((8, 8))
    fx[_IC, _IC] = -outflow / V - g
    fx[_IC, _IT] = -de_dT.sum(0) * C
    fx[_IT, _IT] = -outflow / V + (kin.heat @ de_dT) * C
    fx[_IT, _IC] = q
    fs = flow / V[_DST]
    fx[2 * _DST, 2 * _SRC] += fs
    fx[2 * _DST + 1, 2 * _SRC + 1] += fs

    fth = np.zeros((8, len(PARAM_NAMES)))
    fth[_IC] = _INC @ (_FLOW * (dC / V[_DST])[:, None])
    fth[_IT] = _INC @ (_FLOW * (dT / V[_DST])[:, None])
    fth[_IC, _VI] = (C0 - C) / V
    fth[_IT, _VI] = (kin.T0 - T) / V
    fth[_IC, 4 + _VI] = -mix_C / V ** 2
    fth[_IT, 4 + _VI] = -(mix_T + heat_in) / V ** 2
    fth[_IC, 8 + _VI] = F0 / V
    dE = e / (R * T[None, :])                       # -de/dE_r
    fth[_IC, 12:15] = (dE * C[None, :]).T
    fth[_IT, 12:15] = -(kin.heat[:, None] * dE * C[None, :]).T
    dR = dE * E[:, None] / R                        # de/dR
    fth[_IC, _R] = -dR.sum(0) * C
    fth[_IT, _R] = (kin.heat @ dR) * C
    return out, fx, fth


def cstr4_rhs(x, u, theta, params: CSTR4Params = CSTR4Params(), _kin: Optional[_Kinetics] = None) -> np.ndarray:
    """Time derivative of the eight states (per hour)."""
    kin = _kin or _Kinetics(params)
    return _rhs_and_jac(kin, np.asarray(x, float), np.asarray(u, float), np.asarray(theta, float), False)[0]


def cstr4_rhs_jacobians(x, u, theta, params: CSTR4Params = CSTR4Params(),
                        _kin: Optional[_Kinetics] = None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(d rhs/dx, d rhs/dtheta)``."""
    kin = _kin or _Kinetics(params)
    _, fx, fth = _rhs_and_jac(kin, np.asarray(x, float), np.asarray(u, float), np.asarray(theta, float))
    return fx, fth


def cstr4_input_jacobian(theta, params: CSTR4Params = CSTR4Params()) -> np.ndarray:
    V = np.asarray(theta, float)[_V]
    fu = np.zeros((8, 4))
    fu[2 * np.arange(4) + 1, np.arange(4)] = 1.0 / (params.rho * params.cp * V)
    return fu


def discretize_rk4(rhs: Callable, dt: float, rhs_jac: Optional[Callable] = None,
                   rhs_with_jac: Optional[Callable] = None):
    """Classical RK4 one-step map of ``dx/dt = rhs(x, u, theta)``.

    Returns ``(step, step_jac)``; ``step_jac`` chains ``rhs_jac`` through the
    four stages and is ``None`` when no vector-field Jacobian is given.
    ``rhs_with_jac(x, u, theta) -> (rhs, d/dx, d/dtheta)`` may be supplied to
    share work between the two.
    """
    if dt <= 0:
        raise ValueError("sample time must be positive")
    h = float(dt)

    def step(x, u, theta):
        k1 = rhs(x, u, theta)
        k2 = rhs(x + 0.5 * h * k1, u, theta)
        k3 = rhs(x + 0.5 * h * k2, u, theta)
        k4 = rhs(x + h * k3, u, theta)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if rhs_jac is None and rhs_with_jac is None:
        return step, None
    if rhs_with_jac is None:
        def rhs_with_jac(x, u, theta):
            return (rhs(x, u, theta), *rhs_jac(x, u, theta))

    def step_and_jac(x, u, theta):
        eye = np.eye(len(x))
        k1, a1, b1 = rhs_with_jac(x, u, theta)
        k2, a, b = rhs_with_jac(x + 0.5 * h * k1, u, theta)
        a2 = a + 0.5 * h * (a @ a1)
        b2 = 0.5 * h * (a @ b1) + b
        k3, a, b = rhs_with_jac(x + 0.5 * h * k2, u, theta)
        a3 = a + 0.5 * h * (a @ a2)
        b3 = 0.5 * h * (a @ b2) + b
        k4, a, b = rhs_with_jac(x + h * k3, u, theta)
        a4 = a + h * (a @ a3)
        b4 = h * (a @ b3) + b
        xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        fx = eye + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        fth = (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        return xn, fx, fth

    def step_jac(x, u, theta):
        _, fx, fth = step_and_jac(x, u, theta)
        return fx, fth

    step_jac.with_value = step_and_jac
    return step, step_jac


def steady_state() -> np.ndarray:
    """Steady state as printed (three significant digits)."""
    return X_S_PAPER.copy()


def refined_steady_state(params: CSTR4Params = CSTR4Params(), Q=Q_NOMINAL) -> np.ndarray:
    """Root of the vector field seeded at the printed steady state."""
    kin = _Kinetics(params)
    theta = params.theta()
    sol = root(lambda x: cstr4_rhs(x, Q, theta, _kin=kin), X_S_PAPER,
               jac=lambda x: cstr4_rhs_jacobians(x, Q, theta, _kin=kin)[0], method="hybr",
               options={"xtol": 1e-13})
    if np.abs(cstr4_rhs(sol.x, Q, theta, _kin=kin)).max() > 1e-8:
        raise RuntimeError(f"steady-state solve failed: {sol.message}")
    return sol.x


def cstr4_model(params: CSTR4Params = CSTR4Params(), dt: float = DT) -> NonlinearModel:
    kin = _Kinetics(params)

    def rhs(x, u, theta):
        return cstr4_rhs(x, u, theta, _kin=kin)

    def rhs_jac(x, u, theta):
        return cstr4_rhs_jacobians(x, u, theta, _kin=kin)

    def rhs_with_jac(x, u, theta):
        return _rhs_and_jac(kin, x, u, theta)

    step, step_jac = discretize_rk4(rhs, dt, rhs_with_jac=rhs_with_jac)
    out_idx = np.arange(1, 8, 2)
    hx = np.zeros((4, 8))
    hx[np.arange(4), out_idx] = 1.0

    def h(x, theta):
        return x[out_idx]

    def h_jac(x, theta):
        return hx, np.zeros((4, len(PARAM_NAMES)))

    def structure(x, u, theta):
        fx, fth = rhs_jac(np.asarray(x, float), np.asarray(u, float), np.asarray(theta, float))
        return {"fx": fx, "ftheta": fth, "fu": cstr4_input_jacobian(theta, params),
                "hx": hx, "htheta": np.zeros((4, len(PARAM_NAMES)))}

    return NonlinearModel(8, 4, 4, len(PARAM_NAMES), step, h, f_jac=step_jac, h_jac=h_jac,
                          structure=structure, state_names=STATE_NAMES, input_names=INPUT_NAMES,
                          output_names=OUTPUT_NAMES, param_names=PARAM_NAMES, name="cstr4", dt=dt)


register_model("cstr4")(cstr4_model)
