"""Local and distributed moving horizon estimation of augmented states.

Each subsystem estimates its own block of ``[x; theta]`` over a sliding
window by single shooting: the decision vector holds the window-initial
values of the free (selected) channels and the process disturbances on the
free state channels, all in scaled units.  Unselected channels start from the
prior and run open loop.  Entries owned by other subsystems enter as known
signals taken from their estimates at the previous instant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .decomposition import SubsystemSpec
from .model import ModelEvaluationError, NonlinearModel
from .nls import nls_solve

log = logging.getLogger(__name__)


@dataclass
class MHEConfig:
    """Window length, weights (scaled units), bounds and solver tolerances.

    Default weights are diagonal: ``q_std`` on every local state channel,
    ``r_std`` on every local output, and ``p_state_std`` / ``p_param_std``
    on the arrival cost.  ``weights[sub_id] = (Q, R, P)`` overrides them.
    """

    horizon: int = 10
    q_std: float = 0.05
    r_std: float = 0.05
    p_state_std: float = 0.1
    p_param_std: float = 0.07
    weights: dict = field(default_factory=dict)
    lb: Optional[np.ndarray] = None          # physical units, full augmented vector
    ub: Optional[np.ndarray] = None
    w_bound: Optional[float] = None          # |w| bound in scaled units
    scales: Optional[np.ndarray] = None      # augmented scales
    output_scales: Optional[np.ndarray] = None
    penalty: float = 1e4
    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if min(self.q_std, self.r_std, self.p_state_std, self.p_param_std) <= 0:
            raise ValueError("weight standard deviations must be positive")
        if self.lb is not None and self.ub is not None and np.any(np.asarray(self.lb) > np.asarray(self.ub)):
            raise ValueError("infeasible bounds: lower above upper")
        for key, mats in self.weights.items():
            for M in mats:
                M = np.asarray(M, float)
                if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                    raise ValueError(f"weights of subsystem {key} must be symmetric positive definite")

    def weights_for(self, spec: SubsystemSpec):
        if spec.id in self.weights:
            return tuple(np.asarray(M, float) for M in self.weights[spec.id])
        ns, no, npar = len(spec.states), len(spec.outputs), len(spec.params)
        Q = self.q_std ** 2 * np.eye(ns)
        R = self.r_std ** 2 * np.eye(no)
        P = np.diag(np.r_[np.full(ns, self.p_state_std ** 2), np.full(npar, self.p_param_std ** 2)])
        return Q, R, P

    def vectors(self, n: int, n_y: int):
        sc = np.ones(n) if self.scales is None else np.asarray(self.scales, float)
        ys = np.ones(n_y) if self.output_scales is None else np.asarray(self.output_scales, float)
        lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        return sc, ys, lb, ub


@dataclass
class MHEProblem:
    """One local estimation problem over the window ``[t0, t]``."""

    model: NonlinearModel
    spec: SubsystemSpec
    t: int
    y: np.ndarray              # (L+1, n_y) full measurement rows; local outputs are used
    u: np.ndarray              # (L, n_u)
    neighbor: np.ndarray       # (L+1, n_x+n_p) estimates used for non-owned entries
    prior: np.ndarray          # (n_local,) window-initial prior, physical units
    unselected: tuple = ()     # global augmented indices run open loop
    P: Optional[np.ndarray] = None
    guess_w: Optional[np.ndarray] = None  # warm start for the disturbances, (L, n_free_states)

    def __post_init__(self):
        L = len(self.u)
        if len(self.y) != L + 1 or len(self.neighbor) != L + 1:
            raise ValueError("window lengths of inputs, outputs and neighbor estimates disagree")
        if len(self.prior) != len(self.spec.local):
            raise ValueError("prior dimension differs from the local augmented dimension")

    @property
    def t0(self) -> int:
        return self.t - len(self.u)


@dataclass
class MHEResult:
    window: np.ndarray         # (L+1, n_local) optimal local trajectory
    estimate: np.ndarray       # last element, clipped to bounds
    objective: float
    iterations: int
    converged: bool
    status: str = ""
    decision: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None


def arrival_cost(x0, prior, P) -> float:
    """``||x0 - prior||^2`` weighted by ``P^-1``."""
    d = np.asarray(x0, float) - np.asarray(prior, float)
    c, low = sla.cho_factor(np.atleast_2d(np.asarray(P, float)))
    return float(d @ sla.cho_solve((c, low), d))


def _inv_sqrt_factor(M: np.ndarray) -> np.ndarray:
    """Upper factor U with ``U^T U = M^-1`` so that ``||U d||^2 = d^T M^-1 d``."""
    if M.size == 0:
        return np.zeros((0, 0))
    Minv = np.linalg.inv(M)
    Minv = 0.5 * (Minv + Minv.T)
    return np.linalg.cholesky(Minv).T


class _LocalProblem:
    """Residual map of one local MHE problem in scaled decision variables."""

    def __init__(self, prob: MHEProblem, cfg: MHEConfig):
        model = prob.model
        self.prob, self.model = prob, model
        n = model.n_x + model.n_p
        sc, ys, lb, ub = cfg.vectors(n, model.n_y)
        spec = prob.spec
        self.loc = np.array(spec.local, int)
        self.ns = len(spec.states)
        self.states = np.array(spec.states, int)
        self.outs = np.array(spec.outputs, int)
        self.L = len(prob.u)
        U = set(prob.unselected)
        self.free0 = np.array([i not in U for i in self.loc], bool)
        self.wfree = np.array([i not in U for i in self.states], bool)
        self.sc, self.ys = sc[self.loc], ys[self.outs]
        self.lb, self.ub = lb[self.loc], ub[self.loc]
        self.n0 = int(self.free0.sum())
        self.nw = int(self.wfree.sum())
        self.nd = self.n0 + self.L * self.nw

        Q, R, P = cfg.weights_for(spec)
        if prob.P is not None:
            P = np.asarray(prob.P, float)
        f0 = np.nonzero(self.free0)[0]
        wf = np.nonzero(self.wfree)[0]
        # frozen channels sit exactly at the prior, so only the free block of P^-1 matters
        Pinv = np.linalg.inv(P)
        self.Up = (np.linalg.cholesky(0.5 * (Pinv + Pinv.T)[np.ix_(f0, f0)]).T if self.n0 else np.zeros((0, 0)))
        Qinv = np.linalg.inv(Q) if self.ns else np.zeros((0, 0))
        self.Uq = np.linalg.cholesky(0.5 * (Qinv + Qinv.T)[np.ix_(wf, wf)]).T if self.nw else np.zeros((0, 0))
        self.Ur = _inv_sqrt_factor(R) if len(self.outs) else np.zeros((0, 0))
        self.sqrt_pen = np.sqrt(cfg.penalty)
        self.prior = np.asarray(prob.prior, float)
        self.prior_s = self.prior / self.sc

        self.z_lo = np.where(np.isfinite(self.lb), self.lb / self.sc, -np.inf)[self.free0]
        self.z_hi = np.where(np.isfinite(self.ub), self.ub / self.sc, np.inf)[self.free0]
        wb = np.inf if cfg.w_bound is None else cfg.w_bound
        self.d_lo = np.r_[self.z_lo, np.full(self.L * self.nw, -wb)]
        self.d_hi = np.r_[self.z_hi, np.full(self.L * self.nw, wb)]
        self.has_box = bool(np.any(np.isfinite(self.lb)) or np.any(np.isfinite(self.ub)))

    def initial_decision(self) -> np.ndarray:
        W = np.zeros((self.L, self.nw))
        g = self.prob.guess_w
        if g is not None and np.shape(g) == W.shape:
            W = np.asarray(g, float)
        return np.r_[self.prior_s[self.free0], W.ravel()]

    def split(self, d):
        z0 = self.prior.copy()
        z0[self.free0] = d[: self.n0] * self.sc[self.free0]
        W = d[self.n0:].reshape(self.L, self.nw)
        return z0, W

    def rollout(self, d, jac: bool = True):
        """Local window trajectory and (optionally) its sensitivity to ``d``."""
        model, prob = self.model, self.prob
        nx = model.n_x
        z0, W = self.split(d)
        nloc = len(self.loc)
        Z = np.empty((self.L + 1, nloc))
        Z[0] = z0
        full = prob.neighbor[0].copy()
        Ms = []
        if jac:
            M = np.zeros((nloc, self.nd))
            M[np.nonzero(self.free0)[0], np.arange(self.n0)] = self.sc[self.free0]
            Ms.append(M)
        wrows = np.nonzero(self.wfree)[0]
        sw = self.sc[: self.ns][self.wfree]
        for l in range(self.L):
            full = prob.neighbor[l].copy()
            full[self.loc] = Z[l]
            x, th = full[:nx], full[nx:]
            if jac:
                xn, fx, fth = model.step_and_jac(x, prob.u[l], th)
            else:
                xn = model.step(x, prob.u[l], th)
            if not np.all(np.isfinite(xn)):
                raise ModelEvaluationError("non-finite state in the window")
            Z[l + 1] = Z[l]
            Z[l + 1, : self.ns] = xn[self.states]
            Z[l + 1, wrows] += sw * W[l]
            if jac:
                A = np.hstack([fx, fth])[np.ix_(self.states, self.loc)]
                Mn = M.copy()
                Mn[: self.ns] = A @ M
                cols = self.n0 + l * self.nw + np.arange(self.nw)
                Mn[wrows, cols] += sw
                M = Mn
                Ms.append(M)
        return Z, Ms

    def residual(self, d, jac: bool = True):
        prob, model = self.prob, self.model
        nx = model.n_x
        Z, Ms = self.rollout(d, jac)
        res, rows = [], []
        # arrival cost
        dev = d[: self.n0] - self.prior_s[self.free0]
        res.append(self.Up @ dev)
        if jac:
            Ja = np.zeros((self.n0, self.nd))
            Ja[:, : self.n0] = self.Up
            rows.append(Ja)
        # process disturbances
        W = d[self.n0:].reshape(self.L, self.nw)
        for l in range(self.L):
            res.append(self.Uq @ W[l])
            if jac:
                Jw = np.zeros((self.nw, self.nd))
                Jw[:, self.n0 + l * self.nw: self.n0 + (l + 1) * self.nw] = self.Uq
                rows.append(Jw)
        # measurements
        if len(self.outs):
            for l in range(self.L + 1):
                full = prob.neighbor[l].copy()
                full[self.loc] = Z[l]
                x, th = full[:nx], full[nx:]
                e = (prob.y[l][self.outs] - model.output(x, th)[self.outs]) / self.ys
                res.append(self.Ur @ e)
                if jac:
                    hx, hth = model.jac_h(x, th)
                    H = np.hstack([hx, hth])[np.ix_(self.outs, self.loc)]
                    rows.append(-(self.Ur / self.ys[None, :]) @ H @ Ms[l])
        # exterior penalty keeping the propagated window inside the box
        if self.has_box and self.L:
            Zs = Z[1:] / self.sc
            lo = np.where(np.isfinite(self.lb), self.lb / self.sc, -np.inf)
            hi = np.where(np.isfinite(self.ub), self.ub / self.sc, np.inf)
            below = np.maximum(lo - Zs, 0.0)
            above = np.maximum(Zs - hi, 0.0)
            res.append(self.sqrt_pen * (below - above).ravel())
            if jac:
                Jp = np.zeros((self.L * len(self.loc), self.nd))
                for l in range(self.L):
                    sign = np.where(below[l] > 0, -1.0, 0.0) + np.where(above[l] > 0, -1.0, 0.0)
                    Jp[l * len(self.loc):(l + 1) * len(self.loc)] = (
                        self.sqrt_pen * sign[:, None] * Ms[l + 1] / self.sc[:, None])
                rows.append(Jp)
        r = np.concatenate(res) if res else np.zeros(0)
        if not jac:
            return r, None, Z
        return r, (np.vstack(rows) if rows else np.zeros((0, self.nd))), Z


def solve_local_mhe(problem: MHEProblem, config: MHEConfig) -> MHEResult:
    """Solve one local window problem (see module docstring)."""
    lp = _LocalProblem(problem, config)
    d0 = np.clip(lp.initial_decision(), lp.d_lo, lp.d_hi)

    def fun(d):
        r, J, _ = lp.residual(d)
        return r, J

    sol = nls_solve(fun, d0, lp.d_lo, lp.d_hi, gtol=config.gtol, xtol=config.xtol, max_iter=config.max_iter)
    r, _, Z = lp.residual(sol.x, jac=False)
    est = np.clip(Z[-1], lp.lb, lp.ub)
    _, W = lp.split(sol.x)
    return MHEResult(Z, est, float(r @ r), sol.iterations, sol.converged, sol.status, sol.x, W)


def open_loop_window(model: NonlinearModel, spec: SubsystemSpec, prior, u, neighbor) -> np.ndarray:
    """Propagate the prior with zero disturbance (fallback when a solve fails)."""
    loc = np.array(spec.local, int)
    ns = len(spec.states)
    Z = np.empty((len(u) + 1, len(loc)))
    Z[0] = prior
    for l in range(len(u)):
        full = neighbor[l].copy()
        full[loc] = Z[l]
        xn = model.step(full[: model.n_x], u[l], full[model.n_x:])
        Z[l + 1] = Z[l]
        Z[l + 1, :ns] = xn[list(spec.states)]
    return Z


# --------------------------------------------------------------------------- coordination

@dataclass
class CoordinatorState:
    """Everything the coordinator carries from one instant to the next."""

    t: int
    windows: list            # per subsystem: (t0, (L+1, n_local) array) from the last instant
    decisions: list          # per subsystem: last disturbance window (warm start)
    estimate: np.ndarray     # assembled full augmented estimate at t
    history: list = field(default_factory=list)   # assembled estimates, one per instant
    messages: list = field(default_factory=list)  # (t, sender id, estimate sent)
    degraded: list = field(default_factory=list)  # instants with a failed local solve


class DMHECoordinator:
    """Runs the subsystem estimators in lock step.

    At instant ``t`` every subsystem sees only the windows its peers
    published at ``t-1``; new windows are published after all local solves
    finish.
    """

    def __init__(self, model: NonlinearModel, specs: Sequence[SubsystemSpec], config: MHEConfig,
                 initial_guess, keep_messages: bool = False):
        self.model = model
        self.specs = list(specs)
        self.config = config
        n = model.n_x + model.n_p
        owned = [i for sp in self.specs for i in sp.local]
        if len(owned) != len(set(owned)):
            raise ValueError("an augmented entry is owned by more than one subsystem")
        self.owned = np.array(sorted(owned), int)
        self.x0 = np.asarray(initial_guess, float)
        if self.x0.shape != (n,):
            raise ValueError("initial guess must cover the full augmented state")
        self.keep_messages = keep_messages
        self.y_hist: list[np.ndarray] = []
        self.u_hist: list[np.ndarray] = []
        self.state: Optional[CoordinatorState] = None
        self._last_unselected: tuple = ()

    def _assembled_window(self, t0: int, t: int) -> np.ndarray:
        """Peer estimates for times ``t0..t`` as published at ``t-1``."""
        G = np.tile(self.x0, (t - t0 + 1, 1))
        st = self.state
        if st is None:
            return G
        for sp, (pt0, Zp) in zip(self.specs, st.windows):
            loc = list(sp.local)
            for k in range(t0, t + 1):
                j = min(k, t - 1) - pt0
                if 0 <= j < len(Zp):
                    G[k - t0, loc] = Zp[j]
        return G

    def _prior(self, i: int, t0: int) -> np.ndarray:
        sp = self.specs[i]
        if t0 == 0 or self.state is None:
            return self.x0[list(sp.local)].copy()
        pt0, Zp = self.state.windows[i]
        return Zp[t0 - pt0].copy()

    def step(self, y_t, u_prev=None, unselected: Sequence[int] = (), P_override=None) -> list[MHEResult]:
        t = len(self.y_hist)
        if t > 0:
            if u_prev is None:
                raise ValueError("the input applied since the last instant is required")
            self.u_hist.append(np.asarray(u_prev, float))
        self.y_hist.append(np.asarray(y_t, float))
        N = self.config.horizon
        t0 = max(0, t - N)
        Y = np.array(self.y_hist[t0:t + 1])
        Uw = np.array(self.u_hist[t0:t]).reshape(t - t0, self.model.n_u)
        G = self._assembled_window(t0, t)
        results, windows, decisions = [], [], []
        degraded = False
        for i, sp in enumerate(self.specs):
            prior = self._prior(i, t0)
            guess = self._warm_start(i, t0, t, unselected)
            P = None if P_override is None else P_override.get(sp.id)
            prob = MHEProblem(self.model, sp, t, Y, Uw, G, prior, tuple(unselected), P, guess)
            try:
                res = solve_local_mhe(prob, self.config)
            except (ModelEvaluationError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.warning("subsystem %d failed at t=%d: %s", sp.id, t, exc)
                degraded = True
                try:
                    Z = open_loop_window(self.model, sp, prior, Uw, G)
                except (ModelEvaluationError, FloatingPointError, ValueError):
                    Z = np.tile(prior, (len(Uw) + 1, 1))   # hold the prior when even the rollout fails
                res = MHEResult(Z, Z[-1], float("nan"), 0, False, f"failed: {exc}")
            results.append(res)
            windows.append((t0, res.window))
            decisions.append(res.w)
        est = self.x0.copy() if self.state is None else self.state.estimate.copy()
        for sp, res in zip(self.specs, results):
            est[list(sp.local)] = res.estimate
        prev = self.state
        self._last_unselected = tuple(unselected)
        self.state = CoordinatorState(t, windows, decisions, est,
                                      (prev.history if prev else []) + [est],
                                      prev.messages if prev else [],
                                      (prev.degraded if prev else []) + ([t] if degraded else []))
        if self.keep_messages:
            for sp, res in zip(self.specs, results):
                self.state.messages.append((t, sp.id, res.estimate.copy()))
        return results

    def _warm_start(self, i: int, t0: int, t: int, unselected) -> Optional[np.ndarray]:
        """Previous disturbances shifted onto the new window (zero for the newest step)."""
        st = self.state
        if st is None or st.decisions[i] is None or tuple(unselected) != self._last_unselected:
            return None
        W_prev = st.decisions[i]
        pt0 = st.windows[i][0]
        W = np.zeros((t - t0, W_prev.shape[1]))
        for k in range(t0, t - 1):
            if 0 <= k - pt0 < len(W_prev):
                W[k - t0] = W_prev[k - pt0]
        return W


def dmhe_step(coordinator: DMHECoordinator, measurements, u_prev=None, selection=None) -> list[MHEResult]:
    """Advance every subsystem by one instant; ``selection`` supplies U(t)."""
    unselected = () if selection is None else tuple(getattr(selection, "unselected", selection))
    return coordinator.step(measurements, u_prev, unselected)


def solve_centralized_mhe(model: NonlinearModel, y, u, prior, config: MHEConfig, unselected=(), P=None,
                          t: Optional[int] = None) -> MHEResult:
    """Single all-encompassing subsystem over the given window."""
    n = model.n_x + model.n_p
    spec = SubsystemSpec(0, tuple(range(model.n_x)), tuple(range(model.n_x, n)),
                         tuple(range(model.n_y)), tuple(range(model.n_u)))
    u = np.asarray(u, float).reshape(-1, model.n_u)
    y = np.asarray(y, float)
    neighbor = np.tile(np.asarray(prior, float), (len(y), 1))
    prob = MHEProblem(model, spec, len(u) if t is None else t, y, u, neighbor, prior, tuple(unselected), P)
    return solve_local_mhe(prob, config)


def centralized_spec(model: NonlinearModel) -> SubsystemSpec:
    n = model.n_x + model.n_p
    return SubsystemSpec(0, tuple(range(model.n_x)), tuple(range(model.n_x, n)),
                         tuple(range(model.n_y)), tuple(range(model.n_u)))
