"""Output sensitivities, windowed sensitivity / observability matrices and rank checks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import AugmentedModel, NonlinearModel, Trajectory

WELL_CONDITIONED = 1e8


@dataclass(frozen=True)
class SensitivityState:
    """Sensitivities of x(t) (and y(t)) to theta and to x(0)."""

    t: int
    S_xtheta: np.ndarray
    S_xx0: np.ndarray
    S_ytheta: Optional[np.ndarray] = None
    S_yx0: Optional[np.ndarray] = None


def propagate_param_sensitivity(model: NonlinearModel, traj: Trajectory) -> list[SensitivityState]:
    """Forward recursion ``S(t+1) = f_x S(t) + f_theta`` from ``S(0) = 0``."""
    S = np.zeros((model.n_x, model.n_p))
    out = []
    for k in range(len(traj)):
        hx, hth = model.jac_h(traj.x[k], traj.theta)
        out.append(SensitivityState(k, S.copy(), np.full((model.n_x, model.n_x), np.nan),
                                    S_ytheta=hx @ S + hth))
        if k < len(traj.u) and k + 1 < len(traj):
            fx, fth = model.jac_f(traj.x[k], traj.u[k], traj.theta)
            S = fx @ S + fth
    return out


def propagate_initial_state_sensitivity(model: NonlinearModel, traj: Trajectory) -> list[SensitivityState]:
    """Forward recursion ``S(t+1) = f_x S(t)`` from ``S(0) = I``."""
    S = np.eye(model.n_x)
    out = []
    for k in range(len(traj)):
        hx, _ = model.jac_h(traj.x[k], traj.theta)
        out.append(SensitivityState(k, np.full((model.n_x, model.n_p), np.nan), S.copy(), S_yx0=hx @ S))
        if k < len(traj.u) and k + 1 < len(traj):
            fx, _ = model.jac_f(traj.x[k], traj.u[k], traj.theta)
            S = fx @ S
    return out


@dataclass(frozen=True)
class SensitivityMatrix:
    S: np.ndarray
    N: int
    t: int
    labels: tuple[str, ...]
    n_y: int

    def __post_init__(self):
        if self.S.shape != (self.N * self.n_y, len(self.labels)):
            raise ValueError(f"sensitivity matrix shape {self.S.shape} inconsistent with N={self.N}, "
                             f"n_y={self.n_y}, {len(self.labels)} columns")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.labels)
            for row in self.S:
                w.writerow([repr(float(v)) for v in row])
        return path


def _window_states(aug: AugmentedModel, traj: Trajectory, t: int, N: int):
    if N < 1:
        raise ValueError("window length must be at least 1")
    if t - N + 1 < 0:
        raise ValueError(f"window of length {N} ending at t={t} starts before the trajectory")
    if t >= len(traj):
        raise ValueError(f"t={t} beyond trajectory of length {len(traj)}")
    return range(t - N + 1, t + 1)


def _stacked_products(aug: AugmentedModel, xs, us) -> np.ndarray:
    """Rows ``C(i) A(i-1) ... A(i0)`` for the window states ``xs``."""
    Phi = np.eye(aug.n)
    blocks = []
    for j, xk in enumerate(xs):
        blocks.append(aug.jac_h(xk) @ Phi)
        if j + 1 < len(xs):
            Phi = aug.jac_f(xk, us[j]) @ Phi
    return np.vstack(blocks)


def window_sensitivity(aug: AugmentedModel, xs, us, t: int = 0) -> SensitivityMatrix:
    """Sensitivity matrix over explicitly given augmented states and inputs."""
    xs = [np.asarray(v, float) for v in xs]
    return SensitivityMatrix(_stacked_products(aug, xs, us), len(xs), t, aug.names, aug.base.n_y)


def build_sensitivity_matrix(aug: AugmentedModel, traj: Trajectory, t: int, N: int) -> SensitivityMatrix:
    """Stack the output sensitivities to ``x_theta(t-N+1)`` over the window ending at ``t``."""
    idx = _window_states(aug, traj, t, N)
    xs = [traj.augmented(k) for k in idx]
    us = [traj.input_at(k) for k in idx]
    return SensitivityMatrix(_stacked_products(aug, xs, us), N, t, aug.names, aug.base.n_y)


def build_observability_matrix(aug: AugmentedModel, traj: Trajectory, t: int, N: int) -> np.ndarray:
    """Linearized observability matrix over the same window (same matrix as above)."""
    return build_sensitivity_matrix(aug, traj, t, N).S


def normalize_sensitivity(S: SensitivityMatrix, state_scales, output_scales) -> SensitivityMatrix:
    """Relative sensitivities: columns times the augmented-state scale, rows over the output scale."""
    cs = np.asarray(state_scales, float)
    rs = np.asarray(output_scales, float)
    if cs.shape != (S.S.shape[1],) or rs.shape != (S.n_y,):
        raise ValueError("scale vectors have the wrong length")
    if np.any(cs <= 0) or np.any(rs <= 0):
        raise ValueError("scales must be strictly positive")
    row = np.tile(1.0 / rs, S.N)
    return SensitivityMatrix(S.S * cs[None, :] * row[:, None], S.N, S.t, S.labels, S.n_y)


def default_rank_tol(shape) -> float:
    return max(shape) * np.finfo(float).eps * 1e3


@dataclass(frozen=True)
class ObservabilityReport:
    rank: int
    condition: float
    singular_values: np.ndarray
    full_rank: bool
    rank_tol: float

    @property
    def well_conditioned(self) -> bool:
        return self.condition <= WELL_CONDITIONED

    def to_dict(self) -> dict:
        return {"rank": self.rank, "condition": self.condition,
                "singular_values": [float(s) for s in self.singular_values],
                "full_rank": self.full_rank, "rank_tol": self.rank_tol}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d) -> "ObservabilityReport":
        return cls(int(d["rank"]), float(d["condition"]), np.asarray(d["singular_values"], float),
                   bool(d["full_rank"]), float(d["rank_tol"]))


def rank_and_condition(S, rank_tol: Optional[float] = None) -> ObservabilityReport:
    """Numerical rank (relative to sigma_max) and condition over retained values."""
    M = S.S if isinstance(S, SensitivityMatrix) else np.asarray(S, float)
    if M.size == 0:
        raise ValueError("matrix is empty")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    tol = default_rank_tol(M.shape) if rank_tol is None else float(rank_tol)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0:
        return ObservabilityReport(0, float("inf"), sv, False, tol)
    keep = sv > tol * sv[0]
    rank = int(keep.sum())
    cond = float(sv[0] / sv[keep][-1])
    return ObservabilityReport(rank, cond, sv, rank == min(M.shape), tol)
