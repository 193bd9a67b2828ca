"""Four-CSTR estimation experiments: centralized vs. distributed, with and without selection."""

from __future__ import annotations

import csv
from collections import Counter
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cstr4 import (CSTR4Params, PARAM_NAMES, Q_NOMINAL, STATE_NAMES, TALLY_ORDER, cstr4_model,
                    refined_steady_state)
from .decomposition import DecompositionResult, SubsystemSpec, groups_to_partition, subsystems_from_groups
from .graph import build_graph, modularity
from .mhe import DMHECoordinator, MHEConfig, centralized_spec
from .model import NoiseSpec, NonlinearModel, Trajectory, augment, simulate
from .selection import SelectionResult, cutoff_value, orthogonalize_select, tally_selection
from .sensitivity import normalize_sensitivity, window_sensitivity

# Communities as detected on the selected variables, extended with the
# variables the selection leaves out so that every entry is tracked.
_EXTRA_3 = (("C01", "C02", "F1", "Fr1", "R", "E1"), ("C03", "F2", "E2"), ("C04", "F3", "E3"))
SELECTED_3 = (
    ("C_A1", "T1", "C_A2", "T2", "F01", "F02", "V1", "V2", "Fr2"),
    ("C_A3", "T3", "F03", "V3"),
    ("C_A4", "T4", "F04", "V4"),
)
SELECTED_4 = (
    ("C_A1", "T1", "F01", "V1", "Fr2"),
    ("C_A2", "T2", "F02", "V2"),
    ("C_A3", "T3", "F03", "V3"),
    ("C_A4", "T4", "F04", "V4"),
)
_EXTRA_4 = (("C01", "Fr1", "R", "E1"), ("C02", "F1"), ("C03", "F2", "E2"), ("C04", "F3", "E3"))
THREE_SUBSYSTEMS = tuple(a + b for a, b in zip(SELECTED_3, _EXTRA_3))
FOUR_SUBSYSTEMS = tuple(a + b for a, b in zip(SELECTED_4, _EXTRA_4))

MISMATCH = 0.05
NOISE_LEVEL = 1e-3      # relative measurement noise (and cutoff noise levels)


def cstr4_scales(params: CSTR4Params = CSTR4Params()):
    """Augmented-state scales (steady state, nominal parameters) and output scales."""
    xs = refined_steady_state(params)
    return np.r_[xs, params.theta()], xs[1::2]


def cstr4_bounds(params: CSTR4Params = CSTR4Params()):
    th = params.theta()
    lb = np.r_[np.tile([0.0, 250.0], 4), 0.5 * th]
    ub = np.r_[np.tile([np.inf, 500.0], 4), 1.5 * th]
    return lb, ub


def alternating_mismatch(truth, fraction: float = MISMATCH) -> np.ndarray:
    sign = np.where(np.arange(len(truth)) % 2 == 0, 1.0, -1.0)
    return np.asarray(truth, float) * (1.0 + fraction * sign)


@dataclass
class CaseConfig:
    """One experiment: who estimates what, with which weights and noise."""

    case: int
    groups: Optional[tuple] = None         # None -> centralized
    use_selection: bool = True
    steps: int = 500
    horizon: int = 10
    mismatch: float = MISMATCH
    noise_level: float = NOISE_LEVEL
    process_noise: float = 0.0
    q_std: float = 0.05
    r_std: float = 0.05
    p_state_std: float = 0.1
    p_param_std: float = 0.07
    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iter: int = 200
    cutoff: Optional[float] = None

    def __post_init__(self):
        if self.case not in (1, 2, 3, 4):
            raise ValueError("case must be 1, 2, 3 or 4")
        if self.steps < 1 or self.horizon < 1:
            raise ValueError("steps and horizon must be positive")
        if self.mismatch < 0 or self.noise_level < 0 or self.process_noise < 0:
            raise ValueError("mismatch and noise levels must be non-negative")

    @property
    def alpha(self) -> float:
        return self.cutoff if self.cutoff is not None else cutoff_value(self.noise_level, self.noise_level)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("case", "use_selection", "steps", "horizon", "mismatch",
                                            "noise_level", "process_noise", "q_std", "r_std",
                                            "p_state_std", "p_param_std", "gtol", "xtol", "max_iter")}
        d["alpha"] = self.alpha
        d["groups"] = [list(g) for g in self.groups] if self.groups else None
        return d


def case_config(case: int, **overrides) -> CaseConfig:
    """Standard settings: 1 centralized, 2 three subsystems, 3 four subsystems, 4 all 29 free."""
    table = {1: None, 2: THREE_SUBSYSTEMS, 3: FOUR_SUBSYSTEMS, 4: THREE_SUBSYSTEMS}
    if case not in table:
        raise ValueError("case must be 1, 2, 3 or 4")
    groups = table[case]
    return CaseConfig(case, groups, use_selection=case != 4, **overrides)


@dataclass
class RMSEReport:
    rmse_x: np.ndarray
    rmse_theta: np.ndarray
    rmse_xtheta: np.ndarray

    @property
    def avg_x(self) -> float:
        return float(np.mean(self.rmse_x))

    @property
    def avg_theta(self) -> float:
        return float(np.mean(self.rmse_theta))

    @property
    def avg_xtheta(self) -> float:
        return float(np.mean(self.rmse_xtheta))

    def averages(self) -> dict:
        return {"rmse_x": self.avg_x, "rmse_theta": self.avg_theta, "rmse_xtheta": self.avg_xtheta}

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "rmse_x", "rmse_theta", "rmse_xtheta"])
            for k, row in enumerate(zip(self.rmse_x, self.rmse_theta, self.rmse_xtheta)):
                w.writerow([k, *(repr(float(v)) for v in row)])
        return path


def _rel_rmse(est, truth) -> np.ndarray:
    est, truth = np.atleast_2d(est), np.atleast_2d(truth)
    if np.any(truth == 0):
        raise ValueError("relative error undefined for a zero true value")
    return np.sqrt(np.mean(((est - truth) / truth) ** 2, axis=1))


def rmse(truth, estimates, n_x: int) -> RMSEReport:
    """Per-step relative RMSE over states, parameters and both.

    ``truth`` and ``estimates`` are ``(K, n_x + n_p)`` augmented sequences.
    """
    truth = np.asarray(truth, float)
    estimates = np.asarray(estimates, float)
    if truth.shape != estimates.shape:
        raise ValueError("truth and estimates are not aligned")
    return RMSEReport(_rel_rmse(estimates[:, :n_x], truth[:, :n_x]),
                      _rel_rmse(estimates[:, n_x:], truth[:, n_x:]) if truth.shape[1] > n_x
                      else np.zeros(len(truth)),
                      _rel_rmse(estimates, truth))


@dataclass
class CaseResult:
    config: CaseConfig
    seed: int
    report: RMSEReport
    truth: Trajectory
    estimates: np.ndarray                  # (steps, 29)
    specs: list
    selections: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    nonconverged: int = 0
    degraded_steps: list = field(default_factory=list)
    wall_time: float = 0.0

    def summary(self) -> dict:
        it = np.asarray(self.iterations, float)
        return {"case": self.config.case, "seed": self.seed, "steps": self.config.steps,
                **{k: 100.0 * v for k, v in self.report.averages().items()},
                "units": "percent",
                "solver": {"mean_iterations": float(it.mean()) if it.size else 0.0,
                           "max_iterations": int(it.max()) if it.size else 0,
                           "nonconverged_solves": self.nonconverged,
                           "degraded_steps": list(self.degraded_steps)},
                "wall_time_s": self.wall_time}


def truth_trajectory(model: NonlinearModel, steps: int, seed: int, noise_level: float = NOISE_LEVEL,
                     process_noise: float = 0.0, params: CSTR4Params = CSTR4Params()) -> Trajectory:
    xs = refined_steady_state(params)
    noise = NoiseSpec(process_noise * xs, noise_level * xs[1::2], seed)
    return simulate(model, xs, params.theta(), np.tile(Q_NOMINAL, (steps, 1)), noise)


def nominal_selections(model: NonlinearModel, traj: Trajectory, steps: int, N: int, alpha: float,
                       scales, output_scales) -> list[SelectionResult]:
    """Per-instant selection on the noise-free nominal trajectory (growing window at start)."""
    aug = augment(model)
    x_nom = traj.x
    out = []
    cache: dict = {}
    for t in range(steps):
        t0 = max(0, t - N + 1)
        zs = [np.r_[x_nom[k], traj.theta] for k in range(t0, t + 1)]
        key = tuple(np.round(np.concatenate(zs), 12))
        if key not in cache:
            S = window_sensitivity(aug, zs, [traj.input_at(k) for k in range(t0, t + 1)], t)
            S = normalize_sensitivity(S, scales, output_scales)
            cache[key] = orthogonalize_select(S.S, alpha, range(model.n_x), labels=aug.names)
        out.append(cache[key])
    return out


def build_specs(model: NonlinearModel, cfg: CaseConfig, params: CSTR4Params = CSTR4Params()) -> list[SubsystemSpec]:
    if cfg.groups is None:
        return [centralized_spec(model)]
    eq = (refined_steady_state(params), params.theta())
    return subsystems_from_groups(model, cfg.groups, eq, Q_NOMINAL)


def run_case(cfg: CaseConfig, seed: int = 0, params: CSTR4Params = CSTR4Params(),
             progress=None) -> CaseResult:
    """Simulate the plant, select, decompose, estimate and score one case."""
    start = time.perf_counter()
    model = cstr4_model(params)
    n_x = model.n_x
    try:
        truth = truth_trajectory(model, cfg.steps, seed, cfg.noise_level, cfg.process_noise, params)
    except Exception as exc:
        raise RuntimeError(f"[simulate] {exc}") from exc
    scales, yscales = cstr4_scales(params)
    try:
        if cfg.use_selection:
            nominal = truth_trajectory(model, cfg.steps, seed, 0.0, 0.0, params)
            selections = nominal_selections(model, nominal, cfg.steps, cfg.horizon, cfg.alpha, scales, yscales)
        else:
            selections = []
    except Exception as exc:
        raise RuntimeError(f"[select] {exc}") from exc
    try:
        specs = build_specs(model, cfg, params)
    except Exception as exc:
        raise RuntimeError(f"[decompose] {exc}") from exc

    lb, ub = cstr4_bounds(params)
    mcfg = MHEConfig(horizon=cfg.horizon, q_std=cfg.q_std, r_std=cfg.r_std, p_state_std=cfg.p_state_std,
                     p_param_std=cfg.p_param_std, lb=lb, ub=ub, scales=scales, output_scales=yscales,
                     gtol=cfg.gtol, xtol=cfg.xtol, max_iter=cfg.max_iter)
    z_true = np.array([truth.augmented(k) for k in range(cfg.steps)])
    guess = alternating_mismatch(z_true[0], cfg.mismatch)
    coord = DMHECoordinator(model, specs, mcfg, guess)
    est = np.empty((cfg.steps, n_x + model.n_p))
    iters, nonconv = [], 0
    try:
        for t in range(cfg.steps):
            U = selections[t].unselected if selections else ()
            results = coord.step(truth.y[t], truth.u[t - 1] if t else None, U)
            est[t] = coord.state.estimate
            for r in results:
                iters.append(r.iterations)
                nonconv += not r.converged
            if progress is not None:
                progress(t, est[t])
    except Exception as exc:
        raise RuntimeError(f"[estimate] t={t}: {exc}") from exc
    report = rmse(z_true, est, n_x)
    return CaseResult(cfg, seed, report, truth, est, specs, selections, iters, nonconv,
                      list(coord.state.degraded), time.perf_counter() - start)


# --------------------------------------------------------------------------- outputs

def write_estimate_log(result: CaseResult, model: NonlinearModel, path) -> Path:
    path = Path(path)
    names = model.augmented_names
    owner = {}
    for sp in result.specs:
        for i in sp.local:
            owner[i] = sp.id
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "subsystem", "channel", "truth", "estimate"])
        for k in range(len(result.estimates)):
            z = result.truth.augmented(k)
            for i, name in enumerate(names):
                w.writerow([repr(k * result.truth.dt), owner.get(i, -1), name, repr(float(z[i])),
                            repr(float(result.estimates[k, i]))])
    return path


def decomposition_for(result: CaseResult, model: NonlinearModel, params: CSTR4Params = CSTR4Params()):
    """Table-style decomposition record over the selected variables of the case."""
    if result.config.groups is None:
        return None
    xs = refined_steady_state(params)
    if result.selections:
        # the most frequent selected set over the run
        counts = Counter(tuple(sorted(s.selected)) for s in result.selections)
        sel = list(max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0])
    else:
        sel = list(range(model.n_x + model.n_p))
    graph = build_graph(model, sel, (xs, params.theta()), Q_NOMINAL, scales=(xs, params.theta(), xs[1::2]))
    part = groups_to_partition(graph, result.specs, model.n_x)
    return DecompositionResult(part, modularity(graph, part), result.specs, graph=graph)


def write_case_outputs(result: CaseResult, out_dir, params: CSTR4Params = CSTR4Params()) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = cstr4_model(params)
    c = result.config.case
    files = {"trajectory": result.truth.to_csv(out / f"case{c}_trajectory.csv"),
             "rmse": result.report.to_csv(out / f"case{c}_rmse.csv"),
             "estimates": write_estimate_log(result, model, out / f"case{c}_estimates.csv")}
    if result.selections:
        tally = tally_selection(result.selections, model.augmented_names, TALLY_ORDER)
        files["selection"] = tally.to_csv(out / f"case{c}_selection_tally.csv")
    dec = decomposition_for(result, model, params)
    if dec is not None:
        files["decomposition"] = Path(out / f"case{c}_decomposition.json")
        dec.to_json(model, files["decomposition"])
    summary = result.summary()
    summary["config"] = result.config.to_dict()
    files["summary"] = out / f"case{c}_summary.json"
    files["summary"].write_text(json.dumps(summary, indent=2))
    return {k: str(v) for k, v in files.items()}


def comparison_table(summaries: Sequence[dict]) -> str:
    lines = ["case,seed,rmse_x_pct,rmse_theta_pct,rmse_xtheta_pct"]
    for s in summaries:
        lines.append(f"{s['case']},{s['seed']},{s['rmse_x']:.4f},{s['rmse_theta']:.4f},{s['rmse_xtheta']:.4f}")
    return "\n".join(lines) + "\n"


__all__ = ["CaseConfig", "CaseResult", "RMSEReport", "case_config", "run_case", "rmse",
           "THREE_SUBSYSTEMS", "FOUR_SUBSYSTEMS", "STATE_NAMES", "PARAM_NAMES"]
