"""Discrete-time nonlinear models with unknown parameters.

A model is the pair ``x(t+1) = f(x, u, theta)``, ``y(t) = h(x, theta)``.
Appending ``theta`` to the state gives the augmented model whose parameter
block evolves as an integrator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np


class ModelEvaluationError(RuntimeError):
    """A model map or Jacobian produced a non-finite value."""


class SimulationDivergence(RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


def fd_step(value: np.ndarray) -> np.ndarray:
    """Per-coordinate central-difference step, max(1e-6, 1e-6*|v|)."""
    return np.maximum(1e-6, 1e-6 * np.abs(value))


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
                     steps: Optional[np.ndarray] = None) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    steps = fd_step(z) if steps is None else np.broadcast_to(steps, z.shape)
    f0 = np.asarray(fun(z), dtype=float)
    J = np.empty((f0.size, z.size))
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = steps[j]
        J[:, j] = (np.asarray(fun(z + e)) - np.asarray(fun(z - e))) / (2.0 * steps[j])
    return J


def _check_finite(M: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(M)):
        r, c = np.argwhere(~np.isfinite(M))[0]
        raise ModelEvaluationError(f"non-finite entry in {what} at row {r}, column {c}")
    return M


def _names(prefix: str, n: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(n))


@dataclass(frozen=True)
class NonlinearModel:
    """Discrete-time model ``x+ = f(x, u, theta)``, ``y = h(x, theta)``.

    ``f_jac(x, u, theta)`` returns ``(df/dx, df/dtheta)`` and
    ``h_jac(x, theta)`` returns ``(dh/dx, dh/dtheta)``; when omitted the
    Jacobians come from central differences.

    ``structure`` optionally returns the Jacobians used for graph
    construction (keys ``fx``, ``ftheta``, ``fu``, ``hx``, ``htheta``).
    Sampled-data models supply their continuous-time vector field here,
    since a one-step integrator map couples states that the physics does not.
    """

    n_x: int
    n_u: int
    n_y: int
    n_p: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    f_jac: Optional[Callable] = None
    h_jac: Optional[Callable] = None
    structure: Optional[Callable] = None
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()
    name: str = "model"
    dt: float = 1.0

    def __post_init__(self):
        for attr, prefix, n in (("state_names", "x", self.n_x), ("input_names", "u", self.n_u),
                                ("output_names", "y", self.n_y), ("param_names", "p", self.n_p)):
            names = getattr(self, attr)
            if not names:
                object.__setattr__(self, attr, _names(prefix, n))
            elif len(names) != n:
                raise ValueError(f"{attr} has {len(names)} entries, expected {n}")

    @property
    def augmented_names(self) -> tuple[str, ...]:
        return tuple(self.state_names) + tuple(self.param_names)

    def step(self, x, u, theta) -> np.ndarray:
        out = np.asarray(self.f(np.asarray(x, float), np.asarray(u, float), np.asarray(theta, float)), float)
        if out.shape != (self.n_x,):
            raise ValueError(f"f returned shape {out.shape}, expected ({self.n_x},)")
        return out

    def output(self, x, theta) -> np.ndarray:
        out = np.asarray(self.h(np.asarray(x, float), np.asarray(theta, float)), float)
        if out.shape != (self.n_y,):
            raise ValueError(f"h returned shape {out.shape}, expected ({self.n_y},)")
        return out

    def jac_f(self, x, u, theta) -> tuple[np.ndarray, np.ndarray]:
        x, u, theta = (np.asarray(v, float) for v in (x, u, theta))
        if self.f_jac is not None:
            fx, fth = self.f_jac(x, u, theta)
        else:
            fx = central_jacobian(lambda z: self.f(z, u, theta), x)
            fth = (central_jacobian(lambda p: self.f(x, u, p), theta)
                   if self.n_p else np.zeros((self.n_x, 0)))
        return (_check_finite(np.asarray(fx, float).reshape(self.n_x, self.n_x), "df/dx"),
                _check_finite(np.asarray(fth, float).reshape(self.n_x, self.n_p), "df/dtheta"))

    def step_and_jac(self, x, u, theta):
        """``(f, df/dx, df/dtheta)`` in one pass when the Jacobian supports it."""
        both = getattr(self.f_jac, "with_value", None)
        if both is None:
            return (self.step(x, u, theta), *self.jac_f(x, u, theta))
        x, u, theta = (np.asarray(v, float) for v in (x, u, theta))
        xn, fx, fth = both(x, u, theta)
        return (np.asarray(xn, float), _check_finite(np.asarray(fx, float), "df/dx"),
                _check_finite(np.asarray(fth, float), "df/dtheta"))

    def jac_f_u(self, x, u, theta) -> np.ndarray:
        x, u, theta = (np.asarray(v, float) for v in (x, u, theta))
        if self.n_u == 0:
            return np.zeros((self.n_x, 0))
        return _check_finite(central_jacobian(lambda v: self.f(x, v, theta), u), "df/du")

    def jac_h(self, x, theta) -> tuple[np.ndarray, np.ndarray]:
        x, theta = (np.asarray(v, float) for v in (x, theta))
        if self.h_jac is not None:
            hx, hth = self.h_jac(x, theta)
        else:
            hx = central_jacobian(lambda z: self.h(z, theta), x)
            hth = (central_jacobian(lambda p: self.h(x, p), theta)
                   if self.n_p else np.zeros((self.n_y, 0)))
        return (_check_finite(np.asarray(hx, float).reshape(self.n_y, self.n_x), "dh/dx"),
                _check_finite(np.asarray(hth, float).reshape(self.n_y, self.n_p), "dh/dtheta"))

    def numeric(self) -> "NonlinearModel":
        """Copy of this model that ignores analytic Jacobians."""
        return NonlinearModel(self.n_x, self.n_u, self.n_y, self.n_p, self.f, self.h,
                              structure=self.structure, state_names=self.state_names,
                              input_names=self.input_names, output_names=self.output_names,
                              param_names=self.param_names, name=self.name, dt=self.dt)


@dataclass(frozen=True)
class AugmentedModel:
    """Model over ``x_theta = [x; theta]`` with ``theta(t+1) = theta(t)``."""

    base: NonlinearModel

    @property
    def n(self) -> int:
        return self.base.n_x + self.base.n_p

    @property
    def names(self) -> tuple[str, ...]:
        return self.base.augmented_names

    def split(self, x_theta):
        x_theta = np.asarray(x_theta, float)
        if x_theta.shape != (self.n,):
            raise ValueError(f"augmented state has shape {x_theta.shape}, expected ({self.n},)")
        return x_theta[: self.base.n_x], x_theta[self.base.n_x:]

    def f(self, x_theta, u) -> np.ndarray:
        x, theta = self.split(x_theta)
        return np.concatenate([self.base.step(x, u, theta), theta])

    def h(self, x_theta) -> np.ndarray:
        x, theta = self.split(x_theta)
        return self.base.output(x, theta)

    def jac_f(self, x_theta, u) -> np.ndarray:
        x, theta = self.split(x_theta)
        fx, fth = self.base.jac_f(x, u, theta)
        nx = self.base.n_x
        A = np.eye(self.n)
        A[:nx, :nx] = fx
        A[:nx, nx:] = fth
        return A

    def jac_h(self, x_theta) -> np.ndarray:
        x, theta = self.split(x_theta)
        return np.hstack(self.base.jac_h(x, theta))


@dataclass(frozen=True)
class LinearizedModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x_theta: np.ndarray
    u: np.ndarray


def augment(model: NonlinearModel) -> AugmentedModel:
    return AugmentedModel(model)


def linearize(aug: AugmentedModel, x_theta, u) -> LinearizedModel:
    x_theta = np.asarray(x_theta, float)
    u = np.asarray(u, float)
    if u.shape != (aug.base.n_u,):
        raise ValueError(f"input has shape {u.shape}, expected ({aug.base.n_u},)")
    x, theta = aug.split(x_theta)
    B = np.zeros((aug.n, aug.base.n_u))
    B[: aug.base.n_x] = aug.base.jac_f_u(x, u, theta)
    return LinearizedModel(aug.jac_f(x_theta, u), B, aug.jac_h(x_theta), x_theta, u)


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian process/measurement noise standard deviations and seed."""

    process_std: np.ndarray | float = 0.0
    measurement_std: np.ndarray | float = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.process_std) < 0) or np.any(np.asarray(self.measurement_std) < 0):
            raise ValueError("noise standard deviations must be non-negative")

    def generator(self, stream: int = 0) -> np.random.Generator:
        # Philox is counter-based: child streams are independent by key.
        return np.random.Generator(np.random.Philox(key=[self.seed, stream]))


@dataclass
class Trajectory:
    x: np.ndarray           # (T+1, n_x)
    u: np.ndarray           # (T, n_u)
    y_true: np.ndarray      # (T+1, n_y)
    y: np.ndarray           # (T+1, n_y)
    theta: np.ndarray
    dt: float = 1.0
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.x)
        if len(self.y) != n or len(self.y_true) != n:
            raise ValueError("state and output sequences must have equal length")
        if len(self.u) not in (n, n - 1):
            raise ValueError("inputs must be as long as states or one shorter")

    def __len__(self):
        return len(self.x)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.x)) * self.dt

    def augmented(self, k: int) -> np.ndarray:
        return np.concatenate([self.x[k], self.theta])

    def input_at(self, k: int) -> np.ndarray:
        return self.u[min(k, len(self.u) - 1)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        nx, nu, ny = self.x.shape[1], self.u.shape[1], self.y.shape[1]
        sn = self.state_names or _names("x", nx)
        un = self.input_names or _names("u", nu)
        yn = self.output_names or _names("y", ny)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *sn, *un, *yn])
            for k in range(len(self.x)):
                uk = [repr(float(v)) for v in self.u[k]] if k < len(self.u) else [""] * nu
                w.writerow([repr(float(k * self.dt)), *(repr(float(v)) for v in self.x[k]), *uk,
                            *(repr(float(v)) for v in self.y[k])])
        return path


def simulate(model: NonlinearModel, x0, theta, inputs, noise: NoiseSpec = NoiseSpec()) -> Trajectory:
    """Simulate ``len(inputs)`` steps; same seed gives a bit-identical result."""
    inputs = np.atleast_2d(np.asarray(inputs, float))
    if inputs.size == 0 or len(inputs) == 0:
        raise ValueError("input sequence must be nonempty")
    if inputs.shape[1] != model.n_u:
        raise ValueError(f"inputs have {inputs.shape[1]} columns, expected {model.n_u}")
    theta = np.asarray(theta, float)
    T = len(inputs)
    rng_w = noise.generator(0)
    rng_v = noise.generator(1)
    w_std = np.broadcast_to(np.asarray(noise.process_std, float), (model.n_x,))
    v_std = np.broadcast_to(np.asarray(noise.measurement_std, float), (model.n_y,))
    W = rng_w.standard_normal((T, model.n_x)) * w_std
    V = rng_v.standard_normal((T + 1, model.n_y)) * v_std

    x = np.empty((T + 1, model.n_x))
    x[0] = np.asarray(x0, float)
    with np.errstate(all="ignore"):
        for k in range(T):
            x[k + 1] = model.step(x[k], inputs[k], theta) + W[k]
            if not np.all(np.isfinite(x[k + 1])):
                raise SimulationDivergence(k + 1)
        y_true = np.array([model.output(xk, theta) for xk in x])
    return Trajectory(x, inputs.copy(), y_true, y_true + V, theta.copy(), model.dt,
                      model.state_names, model.input_names, model.output_names)


def read_trajectory_csv(path, n_x: int, n_u: int, theta=None, dt: float | None = None) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    t = np.array([float(r[0]) for r in body])
    x = np.array([[float(v) for v in r[1:1 + n_x]] for r in body])
    u = np.array([[float(v) for v in r[1 + n_x:1 + n_x + n_u]] for r in body if r[1 + n_x] != ""])
    y = np.array([[float(v) for v in r[1 + n_x + n_u:]] for r in body])
    if dt is None:
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return Trajectory(x, u.reshape(-1, n_u), y, y, np.asarray(theta if theta is not None else [], float), dt,
                      tuple(header[1:1 + n_x]), tuple(header[1 + n_x:1 + n_x + n_u]),
                      tuple(header[1 + n_x + n_u:]))


_REGISTRY: dict[str, Callable[[], NonlinearModel]] = {}


def register_model(key: str):
    def deco(factory):
        _REGISTRY[key] = factory
        return factory
    return deco


def get_model(key: str) -> NonlinearModel:
    from . import cstr4  # noqa: F401  (registers "cstr4")
    try:
        return _REGISTRY[key]()
    except KeyError:
        raise KeyError(f"unknown model id {key!r}; known: {sorted(_REGISTRY)}") from None


def available_models() -> list[str]:
    from . import cstr4  # noqa: F401
    return sorted(_REGISTRY)
